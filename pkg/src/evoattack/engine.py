"""Evolutionary attack loop: population init, fitness, selection, crossover,
mutation, elitist generation update, and termination.

The optimizer treats the perturbation as the genome. Before any individual
fools the oracle, fitness is pure attack performance (confidence gap), so no
query is spent weighing perturbation size; from the first successful
generation onward, successful individuals pay a size penalty normalized by
the largest perceptual size seen in that generation, which steers the search
toward minimal perturbations without sacrificing the attack.

Determinism contract: with a fixed (config, seed, oracle) every run is
bit-identical. All randomness flows from one numpy Generator in a fixed
order: init patches per individual, then per iteration two roulette draws,
one crossover gate (plus mask), and one mutation gate (plus indices/factors)
per child, then Monte-Carlo noise per evaluated child in index order.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .metrics import DEFAULT_PERCEPTUAL, PerceptualParams, l2_per_pixel, perceptual_size
from .oracle import ConfidenceVector, Oracle, OracleError, monte_carlo_confidence
from .tensors import ImageTensor, Perturbation, ShapeError, apply_perturbation, load_perturbation

MODES = ("untargeted", "targeted", "binary")
SIZE_BASELINES = ("auto", "first_success", "initial")


class ConfigError(ValueError):
    """Rejected attack configuration."""


@dataclass(frozen=True)
class AttackConfig:
    """All attack hyperparameters. Defaults fit small (32x32-ish) images."""

    population_size: int = 20
    max_generations: int = 100
    crossover_prob: float = 1.0
    mutation_prob: float = 0.003
    mutation_density: float = 0.001
    alpha: float = 3.0
    fitness_threshold: float | None = None
    perceptual: PerceptualParams = DEFAULT_PERCEPTUAL
    init_stddevs: tuple[float, ...] = (5 / 255, 10 / 255, 15 / 255, 20 / 255, 25 / 255)
    init_point_counts: tuple[int, ...] = (50, 100, 150, 200, 250)
    init_point_sizes: tuple[int, ...] = (1,)
    init_seed_paths: tuple[str, ...] = ()
    mode: str = "untargeted"
    target_label: int | None = None
    mc_samples: int = 100
    mc_sigma: float = 30 / 255
    size_baseline: str = "auto"
    rng_seed: int = 0
    eval_workers: int = 1

    def __post_init__(self):
        for name in ("init_stddevs", "init_point_counts", "init_point_sizes", "init_seed_paths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.population_size < 2 or self.population_size % 2 != 0:
            raise ConfigError("population_size must be even and >= 2 (selection pairs parents)")
        if self.max_generations < 1:
            raise ConfigError("max_generations must be >= 1")
        if not (0.0 <= self.crossover_prob <= 1.0 and 0.0 <= self.mutation_prob <= 1.0):
            raise ConfigError("crossover_prob and mutation_prob must lie in [0, 1]")
        if not (0.0 < self.mutation_density <= 1.0):
            raise ConfigError("mutation_density must lie in (0, 1]")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.mode == "targeted" and self.target_label is None:
            raise ConfigError("targeted mode needs target_label")
        if self.mode != "targeted" and self.target_label is not None:
            raise ConfigError("target_label is only meaningful in targeted mode")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.mc_sigma < 0:
            raise ConfigError("mc_sigma must be >= 0")
        if self.size_baseline not in SIZE_BASELINES:
            raise ConfigError(f"size_baseline must be one of {SIZE_BASELINES}")
        if self.mode == "targeted" and self.resolved_size_baseline() == "first_success":
            raise ConfigError("targeted mode needs the 'initial' size baseline "
                              "(its penalty applies to every individual, so a mid-run "
                              "baseline switch would break fitness monotonicity)")
        if not self.init_stddevs or not self.init_point_counts or not self.init_point_sizes:
            raise ConfigError("init grid must not be empty")
        if any(sd <= 0 for sd in self.init_stddevs):
            raise ConfigError("init_stddevs must be > 0")
        if any(c < 0 for c in self.init_point_counts):
            raise ConfigError("init_point_counts must be >= 0")
        if any(s < 1 for s in self.init_point_sizes):
            raise ConfigError("init_point_sizes must be >= 1")
        if len(self.init_seed_paths) > self.population_size:
            raise ConfigError("more seed perturbations than population slots")
        if self.eval_workers < 1:
            raise ConfigError("eval_workers must be >= 1")

    def resolved_size_baseline(self) -> str:
        """"auto" resolves per mode: targeted penalizes everyone from the
        first generation, the other modes only after the first success."""
        if self.size_baseline != "auto":
            return self.size_baseline
        return "initial" if self.mode == "targeted" else "first_success"

    @classmethod
    def large_image_defaults(cls, **overrides) -> "AttackConfig":
        base = dict(
            population_size=50,
            max_generations=400,
            mutation_prob=0.001,
            init_point_counts=(5000, 7500, 10000, 12500, 15000),
        )
        base.update(overrides)
        return cls(**base)

    def with_overrides(self, **overrides) -> "AttackConfig":
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        return {
            "population_size": self.population_size,
            "max_generations": self.max_generations,
            "crossover_prob": self.crossover_prob,
            "mutation_prob": self.mutation_prob,
            "mutation_density": self.mutation_density,
            "alpha": self.alpha,
            "fitness_threshold": self.fitness_threshold,
            "perceptual": self.perceptual.to_dict(),
            "init_stddevs": list(self.init_stddevs),
            "init_point_counts": list(self.init_point_counts),
            "init_point_sizes": list(self.init_point_sizes),
            "init_seed_paths": list(self.init_seed_paths),
            "mode": self.mode,
            "target_label": self.target_label,
            "mc_samples": self.mc_samples,
            "mc_sigma": self.mc_sigma,
            "size_baseline": self.size_baseline,
            "rng_seed": self.rng_seed,
            "eval_workers": self.eval_workers,
        }


@dataclass(eq=False)
class Individual:
    """One genome plus its cached oracle response and derived scores.

    Identity semantics: the same object may live through many generations."""

    pert: Perturbation
    confidence: ConfidenceVector | None = None
    label: int | None = None
    success: bool | None = None
    performance: float | None = None
    size: float | None = None
    fitness: float | None = None

    @property
    def evaluated(self) -> bool:
        return self.confidence is not None


@dataclass(eq=False)
class Population:
    individuals: list[Individual]
    generation: int
    z_denominator: float | None = None

    def __len__(self) -> int:
        return len(self.individuals)

    def best(self) -> Individual:
        return max(self.individuals, key=lambda ind: ind.fitness)


class SelectionWeights(NamedTuple):
    probabilities: np.ndarray
    cumulative: np.ndarray


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_fitness: float
    best_performance: float
    best_size: float
    cumulative_queries: int

    def to_dict(self) -> dict:
        return {
            "t": self.generation,
            "best_fitness": self.best_fitness,
            "best_P": self.best_performance,
            "best_Z": self.best_size,
            "cumulative_queries": self.cumulative_queries,
        }


@dataclass(frozen=True)
class FirstSuccess:
    generation: int
    queries: int
    l2_per_pixel: float

    def to_dict(self) -> dict:
        return {"generation": self.generation, "queries": self.queries,
                "l2_per_pixel": self.l2_per_pixel}


@dataclass(frozen=True)
class QueryUsage:
    total: int
    cache_hits: int

    def to_dict(self) -> dict:
        return {"total": self.total, "cache_hits": self.cache_hits}


@dataclass(frozen=True)
class AttackResult:
    best: Individual | None
    succeeded: bool
    status: str  # "ok" or "infrastructure_error"
    error: str | None
    history: tuple[GenerationRecord, ...]
    queries: QueryUsage
    first_success: FirstSuccess | None
    true_label: int
    config: AttackConfig

    @property
    def final_label(self) -> int | None:
        return None if self.best is None else self.best.label


def attack_performance(conf: ConfidenceVector, true_label: int) -> float:
    """Confidence gap driving the non-targeted attack: top-vs-true once the
    labels differ, runner-up-vs-true (non-positive) while they agree."""
    if len(conf) < 2:
        raise ValueError("need at least two classes")
    y1, y2 = conf.top_two()
    if y1 != true_label:
        return conf.prob(y1) - conf.prob(true_label)
    return conf.prob(y2) - conf.prob(true_label)


def targeted_performance(conf: ConfidenceVector, true_label: int, target_label: int) -> float:
    return conf.prob(target_label) - conf.prob(true_label)


def fitness(ind: Individual, true_label: int, population: Population,
            config: AttackConfig) -> float:
    """Attack performance minus the normalized size penalty.

    Non-targeted/binary: the penalty applies only to successful individuals,
    and only once the baseline is fixed (no size pressure before the first
    success). Targeted: the penalty applies to every individual; a
    success-only penalty would hand non-target free riders (p(target) above
    p(true) under some other top label) an unpenalized fitness edge that
    permanently evicts true target hits.
    """
    if not ind.evaluated:
        raise ValueError("individual has no cached oracle response")
    if config.mode == "targeted":
        perf = targeted_performance(ind.confidence, true_label, config.target_label)
        if population.z_denominator is not None:
            return perf - (config.alpha / population.z_denominator) * ind.size
        return perf
    perf = attack_performance(ind.confidence, true_label)
    if ind.success and population.z_denominator is not None:
        return perf - (config.alpha / population.z_denominator) * ind.size
    return perf


def selection_weights(population: Population) -> SelectionWeights:
    """Fitness-proportionate selection table.

    Raw normalization is undefined for non-positive fitness (the failure
    branch is non-positive), so when min(phi) <= 0 every value is shifted by
    -min + eps first; the shift preserves ordering and the argmax.
    """
    phi = np.array([ind.fitness for ind in population.individuals], dtype=np.float64)
    if phi.size == 0:
        raise ValueError("empty population")
    lo, hi = float(phi.min()), float(phi.max())
    if lo <= 0.0:
        phi = phi - lo + 1e-6 * (hi - lo + 1.0)
    total = float(phi.sum())
    probs = phi / total
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return SelectionWeights(probabilities=probs, cumulative=cdf)


def roulette_index(weights: SelectionWeights, u: float) -> int:
    """First index whose cumulative weight strictly exceeds u."""
    idx = int(np.searchsorted(weights.cumulative, u, side="right"))
    return min(idx, len(weights.cumulative) - 1)


def roulette_select(population: Population, weights: SelectionWeights,
                    rng: np.random.Generator) -> Individual:
    return population.individuals[roulette_index(weights, rng.random())]


def crossover(a: Perturbation, b: Perturbation, crossover_prob: float,
              rng: np.random.Generator) -> tuple[Perturbation, Perturbation]:
    """Uniform per-pixel exchange; the 0/1 mask is shared across channels so
    whole pixels swap. Children are elementwise complementary: c1+c2 = a+b."""
    if a.shape != b.shape:
        raise ShapeError(f"cannot cross shapes {a.shape} and {b.shape}")
    gate = rng.random()
    if gate >= crossover_prob:
        return a, b
    mask = rng.integers(0, 2, size=a.shape[:2]).astype(bool)[:, :, None]
    child1 = np.where(mask, a.data, b.data)
    child2 = np.where(mask, b.data, a.data)
    return Perturbation._wrap(child1), Perturbation._wrap(child2)


def mutate(pert: Perturbation, mutation_prob: float, rng: np.random.Generator,
           density: float = 0.001) -> Perturbation:
    """Multiplicative multi-point mutation: with probability mutation_prob,
    scale a small number of elements by factors uniform in [0, 2], clip back
    into range. Zero elements stay zero."""
    gate = rng.random()
    if gate >= mutation_prob:
        return pert
    n = pert.data.size
    k = max(1, round(density * n))
    idx = rng.choice(n, size=k, replace=False)
    factors = rng.uniform(0.0, 2.0, size=k)
    flat = pert.data.reshape(-1).copy()
    flat[idx] *= factors
    return Perturbation._wrap(np.clip(flat.reshape(pert.shape), -1.0, 1.0))


def init_population(original: ImageTensor, config: AttackConfig,
                    rng: np.random.Generator) -> Population:
    """Diverse Gaussian noise-patch genomes, cycling a (stddev, count, size)
    grid; optional seed perturbations from files fill the first slots."""
    h, w, c = original.shape
    grid = list(itertools.product(config.init_stddevs, config.init_point_counts,
                                  config.init_point_sizes))
    if max(config.init_point_sizes) > min(h, w):
        raise ConfigError("noise patch larger than the image")
    seeds = []
    for path in config.init_seed_paths:
        pert = load_perturbation(path)
        if pert.shape != original.shape:
            raise ShapeError(f"seed {path} has shape {pert.shape}, image is {original.shape}")
        seeds.append(pert)
    individuals = []
    for i in range(config.population_size):
        if i < len(seeds):
            individuals.append(Individual(pert=seeds[i]))
            continue
        stddev, count, size = grid[i % len(grid)]
        arr = np.zeros((h, w, c), dtype=np.float64)
        for _ in range(count):
            row = int(rng.integers(0, h - size + 1))
            col = int(rng.integers(0, w - size + 1))
            arr[row : row + size, col : col + size, :] = rng.normal(0.0, stddev, (size, size, c))
        individuals.append(Individual(pert=Perturbation._wrap(np.clip(arr, -1.0, 1.0))))
    return Population(individuals, generation=1)


def _refresh(pool: Sequence[Individual], true_label: int, population: Population,
             config: AttackConfig) -> None:
    for ind in pool:
        ind.fitness = fitness(ind, true_label, population, config)


def _maybe_fix_baseline(population: Population, pool: Sequence[Individual],
                        config: AttackConfig) -> None:
    """Freeze the size-penalty denominator once.

    Default: at the first generation containing a success, using the max
    perceptual size over the whole candidate pool of that generation. The
    "initial" variant freezes it from the very first population instead.
    """
    if population.z_denominator is not None:
        return
    if config.resolved_size_baseline() == "initial":
        trigger = population.generation == 1
    else:
        trigger = any(ind.success for ind in pool)
    if trigger:
        denominator = max(ind.size for ind in pool)
        if denominator > 0.0:
            population.z_denominator = denominator


def generation_update(parents: Population, children: Sequence[Individual],
                      true_label: int, config: AttackConfig) -> Population:
    """Elitist merge: keep the N fittest of parents plus children. Ties go to
    the smaller perturbation, then to parents, then to lower index."""
    if any(not ch.evaluated for ch in children):
        raise ValueError("children must be evaluated before the merge")
    pool = list(parents.individuals) + list(children)
    merged = Population(pool, parents.generation + 1, parents.z_denominator)
    _maybe_fix_baseline(merged, pool, config)
    _refresh(pool, true_label, merged, config)
    # Stable sort on (-fitness, size): pool lists parents first, so equal keys
    # already resolve parent-before-child, then by index.
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].fitness, pool[i].size))
    merged.individuals = [pool[i] for i in order[: config.population_size]]
    return merged


class _Evaluator:
    """Per-run evaluation bookkeeper: caching, costs, and query accounting.

    Children whose perturbation bytes match an already-answered genome are
    served from the cache and never re-queried.
    """

    def __init__(self, original: ImageTensor, true_label: int, oracle: Oracle,
                 config: AttackConfig):
        self.original = original
        self.true_label = true_label
        self.oracle = oracle
        self.config = config
        self.cache: dict[bytes, ConfidenceVector] = {}
        self.cache_hits = 0
        # The oracle counter is the source of truth so accounting stays exact
        # even when a batch dies halfway through.
        self._base_queries = oracle.stats.total_queries

    @property
    def loop_queries(self) -> int:
        return self.oracle.stats.total_queries - self._base_queries

    def _success(self, label: int) -> bool:
        if self.config.mode == "targeted":
            return label == self.config.target_label
        return label != self.true_label

    def _annotate(self, ind: Individual, conf: ConfidenceVector) -> None:
        ind.confidence = conf
        ind.label = conf.label
        ind.success = self._success(ind.label)
        if self.config.mode == "targeted":
            ind.performance = targeted_performance(conf, self.true_label,
                                                   self.config.target_label)
        else:
            ind.performance = attack_performance(conf, self.true_label)
        ind.size = perceptual_size(ind.pert, self.config.perceptual)

    def _query_cost(self) -> int:
        return self.config.mc_samples if self.config.mode == "binary" else 1

    def evaluate(self, batch: Sequence[Individual], rng: np.random.Generator) -> list[int]:
        """Fill in oracle responses for a batch, returning per-individual
        query costs in index order."""
        keys = [ind.pert.data.tobytes() for ind in batch]
        costs = [0] * len(batch)
        if self.config.mode == "binary":
            for i, (ind, key) in enumerate(zip(batch, keys)):
                if key in self.cache:
                    self.cache_hits += 1
                else:
                    image = apply_perturbation(self.original, ind.pert)
                    conf = monte_carlo_confidence(self.oracle, image,
                                                  self.config.mc_samples,
                                                  self.config.mc_sigma, rng)
                    self.cache[key] = conf
                    costs[i] = self.config.mc_samples
                self._annotate(ind, self.cache[key])
        else:
            todo: list[tuple[int, bytes]] = []
            seen: set[bytes] = set()
            for i, key in enumerate(keys):
                if key in self.cache or key in seen:
                    self.cache_hits += 1
                    continue
                seen.add(key)
                todo.append((i, key))
                costs[i] = 1
            images = [apply_perturbation(self.original, batch[i].pert) for i, _ in todo]
            if len(images) > 1 and self.config.eval_workers > 1 and self.oracle.concurrent_safe:
                with ThreadPoolExecutor(max_workers=self.config.eval_workers) as pool:
                    confs = list(pool.map(self.oracle.query, images))
            else:
                confs = [self.oracle.query(img) for img in images]
            for (_, key), conf in zip(todo, confs):
                self.cache[key] = conf
            for ind, key in zip(batch, keys):
                self._annotate(ind, self.cache[key])
        return costs


def _immediate_result(conf: ConfidenceVector, original: ImageTensor, true_label: int,
                      config: AttackConfig) -> AttackResult:
    h, w, c = original.shape
    ind = Individual(pert=Perturbation.zeros(h, w, c), confidence=conf, label=conf.label,
                     success=True, size=0.0)
    ind.performance = (targeted_performance(conf, true_label, config.target_label)
                       if config.mode == "targeted" else attack_performance(conf, true_label))
    ind.fitness = ind.performance
    return AttackResult(
        best=ind, succeeded=True, status="ok", error=None, history=(),
        queries=QueryUsage(total=0, cache_hits=0),
        first_success=FirstSuccess(generation=0, queries=0, l2_per_pixel=0.0),
        true_label=true_label, config=config,
    )


def _validate_run_inputs(original: ImageTensor, true_label: int, oracle: Oracle,
                         config: AttackConfig) -> None:
    config.validate()
    if original.shape != oracle.input_shape:
        raise ConfigError(f"image shape {original.shape} != oracle shape {oracle.input_shape}")
    if not (0 <= true_label < oracle.num_classes):
        raise ConfigError(f"true label {true_label} outside [0, {oracle.num_classes})")
    if config.mode == "targeted":
        if not (0 <= config.target_label < oracle.num_classes):
            raise ConfigError(f"target label {config.target_label} outside class range")
        if config.target_label == true_label:
            raise ConfigError("target label equals the true label")
    if oracle.binary_only and config.mode != "binary":
        raise ConfigError("oracle only answers binary outcomes; use binary mode")


def run_attack(original: ImageTensor, true_label: int, oracle: Oracle,
               config: AttackConfig) -> AttackResult:
    """Full attack: initialize, evaluate, evolve for at most max_generations
    evaluated generations, and return the best-ever individual with exact
    query accounting and per-generation history."""
    _validate_run_inputs(original, true_label, oracle, config)
    rng = np.random.default_rng(config.rng_seed)

    history: list[GenerationRecord] = []
    first_success: FirstSuccess | None = None
    evaluator = _Evaluator(original, true_label, oracle, config)

    def scan_first_success(batch: Sequence[Individual], costs: Sequence[int],
                           queries_before: int, generation: int) -> None:
        nonlocal first_success
        if first_success is not None:
            return
        spent = queries_before
        for ind, cost in zip(batch, costs):
            spent += cost
            if ind.success:
                first_success = FirstSuccess(generation=generation, queries=spent,
                                             l2_per_pixel=l2_per_pixel(ind.pert))
                oracle.stats.mark_first_success(oracle.stats.total_queries
                                                - evaluator.loop_queries + spent)
                return

    def record(pop: Population) -> None:
        best = pop.best()
        history.append(GenerationRecord(
            generation=pop.generation, best_fitness=float(best.fitness),
            best_performance=float(best.performance), best_size=float(best.size),
            cumulative_queries=evaluator.loop_queries,
        ))

    try:
        precheck = oracle.query_uncounted(original)
        if config.mode == "targeted":
            if precheck.label == config.target_label:
                return _immediate_result(precheck, original, true_label, config)
        elif precheck.label != true_label:
            return _immediate_result(precheck, original, true_label, config)

        pop = init_population(original, config, rng)
        costs = evaluator.evaluate(pop.individuals, rng)
        _maybe_fix_baseline(pop, pop.individuals, config)
        _refresh(pop.individuals, true_label, pop, config)
        scan_first_success(pop.individuals, costs, 0, pop.generation)
        record(pop)

        while pop.generation < config.max_generations:
            if (config.fitness_threshold is not None
                    and history[-1].best_fitness > config.fitness_threshold):
                break
            weights = selection_weights(pop)
            child_perts: list[Perturbation] = []
            for _ in range(config.population_size // 2):
                parent_a = roulette_select(pop, weights, rng)
                parent_b = roulette_select(pop, weights, rng)
                child1, child2 = crossover(parent_a.pert, parent_b.pert,
                                           config.crossover_prob, rng)
                child_perts.append(mutate(child1, config.mutation_prob, rng,
                                          config.mutation_density))
                child_perts.append(mutate(child2, config.mutation_prob, rng,
                                          config.mutation_density))
            children = [Individual(pert=p) for p in child_perts]
            queries_before = evaluator.loop_queries
            costs = evaluator.evaluate(children, rng)
            pop = generation_update(pop, children, true_label, config)
            scan_first_success(children, costs, queries_before, pop.generation)
            record(pop)
    except OracleError as exc:
        best = None
        if history:
            best = pop.best()
        return AttackResult(
            best=best, succeeded=False, status="infrastructure_error", error=str(exc),
            history=tuple(history),
            queries=QueryUsage(total=evaluator.loop_queries, cache_hits=evaluator.cache_hits),
            first_success=first_success, true_label=true_label, config=config,
        )

    best = pop.best()
    return AttackResult(
        best=best, succeeded=bool(best.success), status="ok", error=None,
        history=tuple(history),
        queries=QueryUsage(total=evaluator.loop_queries, cache_hits=evaluator.cache_hits),
        first_success=first_success, true_label=true_label, config=config,
    )
