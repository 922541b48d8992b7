"""Batch attack campaigns: per-example artifacts, JSON reports, summaries.

A campaign is a declarative JSON file: one oracle, one shared attack config,
and a list of (image, true label, mode) examples. Every artifact a campaign
writes is reproducible byte-for-byte from the same spec and seed, and every
number in the summary is a pure aggregation of the per-example reports.
"""

from __future__ import annotations

import json
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .engine import AttackConfig, AttackResult, ConfigError, run_attack
from .metrics import PerceptualParams, perturbation_report
from .oracle import HalfBrightnessOracle, Oracle, PrototypeOracle, RemoteOracle
from .tensors import ImageTensor, apply_perturbation, load_image, save_flat, save_png

SCHEMA_VERSION = 1
ENDPOINT_ENV_VAR = "EVOATTACK_ORACLE_URL"
HISTORY_COLUMNS = ("generation", "best_fitness", "best_P", "best_Z", "cumulative_queries")


@dataclass(frozen=True)
class ExampleSpec:
    image_path: str
    label: int
    mode: str = "untargeted"
    target_label: int | None = None


@dataclass(frozen=True)
class OracleSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def build(self) -> Oracle:
        params = dict(self.params)
        if self.kind == "half-brightness":
            return HalfBrightnessOracle(
                height=int(params["height"]), width=int(params["width"]),
                channels=int(params.get("channels", 1)),
                temperature=float(params.get("temperature", 0.05)),
                binary_only=bool(params.get("binary_only", False)),
            )
        if self.kind == "prototype":
            return PrototypeOracle.from_files(
                params["prototypes"],
                temperature=float(params.get("temperature", 1.0)),
                binary_only=bool(params.get("binary_only", False)),
            )
        if self.kind == "remote":
            url = os.environ.get(ENDPOINT_ENV_VAR) or params.get("url")
            if not url:
                raise ConfigError(f"remote oracle needs a url (or {ENDPOINT_ENV_VAR})")
            return RemoteOracle(
                url,
                retries=int(params.get("retries", 2)),
                timeout=float(params.get("timeout", 10.0)),
                expected_classes=params.get("classes"),
                expected_shape=tuple(params["shape"]) if "shape" in params else None,
            )
        raise ConfigError(f"unknown oracle kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass(frozen=True)
class CampaignSpec:
    examples: tuple[ExampleSpec, ...]
    attack: AttackConfig
    oracle: OracleSpec
    output_dir: str
    verify: bool = True
    parallel: int = 1

    @classmethod
    def from_file(cls, path, **overrides) -> "CampaignSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read campaign file {path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=Path(path).parent, **overrides)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None,
                  attack_overrides: dict | None = None,
                  output_dir: str | None = None,
                  verify: bool | None = None,
                  parallel: int | None = None) -> "CampaignSpec":
        base = Path(base_dir) if base_dir is not None else Path(".")

        def resolve(p: str) -> str:
            q = Path(p)
            return str(q if q.is_absolute() else base / q)

        attack_raw = dict(raw.get("attack", {}))
        if "perceptual" in attack_raw:
            attack_raw["perceptual"] = PerceptualParams(**attack_raw["perceptual"])
        if "init_seed_paths" in attack_raw:
            attack_raw["init_seed_paths"] = tuple(resolve(p) for p in attack_raw["init_seed_paths"])
        attack_raw.update(attack_overrides or {})
        try:
            attack = AttackConfig(**attack_raw)
        except TypeError as exc:
            raise ConfigError(f"bad attack config: {exc}") from exc

        oracle_raw = raw.get("oracle")
        if not oracle_raw or "kind" not in oracle_raw:
            raise ConfigError("campaign needs an oracle section with a 'kind'")
        params = {k: v for k, v in oracle_raw.items() if k != "kind"}
        if oracle_raw["kind"] == "prototype" and "prototypes" in params:
            params["prototypes"] = [resolve(p) for p in params["prototypes"]]
        oracle = OracleSpec(kind=oracle_raw["kind"], params=params)

        examples = []
        for entry in raw.get("examples", []):
            if "image" not in entry or "label" not in entry:
                raise ConfigError(f"example entry needs 'image' and 'label': {entry}")
            examples.append(ExampleSpec(
                image_path=resolve(entry["image"]), label=int(entry["label"]),
                mode=entry.get("mode", attack.mode),
                target_label=entry.get("target_label"),
            ))
        if not examples:
            raise ConfigError("campaign has no examples")

        out = output_dir or raw.get("output_dir")
        if not out:
            raise ConfigError("campaign needs an output_dir (file key or flag)")
        return cls(
            examples=tuple(examples), attack=attack, oracle=oracle,
            output_dir=str(out),
            verify=raw.get("verify", True) if verify is None else verify,
            parallel=int(raw.get("parallel", 1) if parallel is None else parallel),
        )


def result_report(result: AttackResult) -> dict:
    """JSON-able report for one attack run."""
    best = None
    if result.best is not None:
        size_report = perturbation_report(result.best.pert, result.config.perceptual)
        best = {
            "fitness": float(result.best.fitness),
            "performance": float(result.best.performance),
            "label": result.best.label,
            "success": bool(result.best.success),
            "report": size_report.to_dict(),
        }
    return {
        "schema": SCHEMA_VERSION,
        "config": result.config.to_dict(),
        "seed": result.config.rng_seed,
        "true_label": result.true_label,
        "mode": result.config.mode,
        "status": result.status,
        "error": result.error,
        "succeeded": result.succeeded,
        "final_label": result.final_label,
        "best": best,
        "history": [row.to_dict() for row in result.history],
        "queries": {
            "total": result.queries.total,
            "cache_hits": result.queries.cache_hits,
            "first_success": None if result.first_success is None else result.first_success.queries,
        },
        "first_success": None if result.first_success is None else result.first_success.to_dict(),
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def history_csv(result: AttackResult) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in result.history:
        lines.append(f"{row.generation},{row.best_fitness!r},{row.best_performance!r},"
                     f"{row.best_size!r},{row.cumulative_queries}")
    return "\n".join(lines) + "\n"


def _verify(oracle: Oracle, adversarial: ImageTensor, example: ExampleSpec) -> dict:
    conf = oracle.query_uncounted(adversarial)
    if example.mode == "targeted":
        ok = conf.label == example.target_label
    else:
        ok = conf.label != example.label
    return {"label": conf.label, "success": bool(ok)}


def _example_config(spec: CampaignSpec, example: ExampleSpec, index: int) -> AttackConfig:
    overrides: dict = {"rng_seed": spec.attack.rng_seed + index}
    if example.mode != spec.attack.mode:
        overrides["mode"] = example.mode
    if example.mode == "targeted":
        overrides["target_label"] = example.target_label
    elif spec.attack.target_label is not None:
        overrides["target_label"] = None
    return spec.attack.with_overrides(**overrides)


def run_example(spec: CampaignSpec, index: int) -> tuple[dict, AttackResult]:
    """Run one campaign entry and write its artifacts; returns (report, result)."""
    example = spec.examples[index]
    oracle = spec.oracle.build()
    original = load_image(example.image_path)
    config = _example_config(spec, example, index)
    result = run_attack(original, example.label, oracle, config)

    out = Path(spec.output_dir) / f"ex{index:03d}"
    out.mkdir(parents=True, exist_ok=True)
    report = result_report(result)
    report["image"] = example.image_path
    report["example_index"] = index
    if result.best is not None:
        adversarial = apply_perturbation(original, result.best.pert)
        save_png(adversarial, out / "adversarial.png")
        save_flat(adversarial, out / "adversarial.pten")
        if spec.verify and result.status == "ok":
            from .tensors import load_flat

            saved = load_flat(out / "adversarial.pten")
            report["verification"] = _verify(oracle, saved, example)
        else:
            report["verification"] = None
    else:
        report["verification"] = None
    (out / "report.json").write_text(dumps_report(report))
    (out / "history.csv").write_text(history_csv(result))
    return report, result


def summarize(reports: list[dict], spec: CampaignSpec) -> dict:
    """Aggregate per-example reports; every figure is recomputable from them."""
    def _stats(values: list) -> dict | None:
        if not values:
            return None
        return {"mean": float(statistics.fmean(values)), "median": float(statistics.median(values))}

    succeeded = [r for r in reports if r["succeeded"]]
    verified = [r["verification"]["success"] for r in reports
                if r.get("verification") is not None]
    first_success = [r["queries"]["first_success"] for r in reports
                     if r["queries"]["first_success"] is not None]
    l2_success = [r["best"]["report"]["l2_per_pixel"] for r in succeeded if r["best"]]
    rows = []
    for r in sorted(reports, key=lambda r: r["example_index"]):
        rows.append({
            "example_index": r["example_index"],
            "image": r["image"],
            "true_label": r["true_label"],
            "mode": r["mode"],
            "status": r["status"],
            "succeeded": r["succeeded"],
            "verified_success": None if r.get("verification") is None
                                else r["verification"]["success"],
            "final_label": r["final_label"],
            "queries": r["queries"]["total"],
            "first_success_queries": r["queries"]["first_success"],
            "l2_per_pixel": r["best"]["report"]["l2_per_pixel"] if r["best"] else None,
            "z": r["best"]["report"]["z"] if r["best"] else None,
            "seed": r["seed"],
        })
    return {
        "schema": SCHEMA_VERSION,
        "n_examples": len(reports),
        "n_succeeded": len(succeeded),
        "asr": len(succeeded) / len(reports),
        "verified_asr": (sum(verified) / len(verified)) if verified else None,
        "n_infrastructure_errors": sum(1 for r in reports if r["status"] != "ok"),
        "mean_l2_per_pixel": float(statistics.fmean(l2_success)) if l2_success else None,
        "queries": _stats([r["queries"]["total"] for r in reports]),
        "first_success_queries": _stats(first_success),
        "attack": spec.attack.to_dict(),
        "oracle": spec.oracle.to_dict(),
        "examples": rows,
    }


def run_campaign(spec: CampaignSpec) -> dict:
    """Run every example, write summary.json, and return the summary."""
    Path(spec.output_dir).mkdir(parents=True, exist_ok=True)
    indices = range(len(spec.examples))
    if spec.parallel > 1:
        with ThreadPoolExecutor(max_workers=spec.parallel) as pool:
            reports = [rep for rep, _ in pool.map(lambda i: run_example(spec, i), indices)]
    else:
        reports = [run_example(spec, i)[0] for i in indices]
    summary = summarize(reports, spec)
    (Path(spec.output_dir) / "summary.json").write_text(dumps_report(summary))
    return summary


def run_alpha_sweep(spec: CampaignSpec, alphas: list[float]) -> list[dict]:
    """Re-run the campaign per alpha; emits alpha_sweep.csv with the mean
    final attack performance, mean final perturbation size, and ASR."""
    rows = []
    root = Path(spec.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    for alpha in alphas:
        sub = CampaignSpec(
            examples=spec.examples,
            attack=spec.attack.with_overrides(alpha=alpha),
            oracle=spec.oracle,
            output_dir=str(root / f"alpha_{alpha:g}"),
            verify=spec.verify,
            parallel=spec.parallel,
        )
        summary = run_campaign(sub)
        finals = [r for r in summary["examples"] if r["status"] == "ok"]
        mean_p = None
        mean_z = None
        if finals:
            reports = [json.loads((root / f"alpha_{alpha:g}" / f"ex{r['example_index']:03d}"
                                   / "report.json").read_text()) for r in finals]
            perf = [rep["best"]["performance"] for rep in reports if rep["best"]]
            size = [rep["best"]["report"]["z"] for rep in reports if rep["best"]]
            mean_p = float(statistics.fmean(perf)) if perf else None
            mean_z = float(statistics.fmean(size)) if size else None
        rows.append({"alpha": alpha, "mean_final_P": mean_p, "mean_final_Z": mean_z,
                     "asr": summary["asr"]})
    lines = ["alpha,mean_final_P,mean_final_Z,asr"]
    for row in rows:
        lines.append(f"{row['alpha']!r},{row['mean_final_P']!r},"
                     f"{row['mean_final_Z']!r},{row['asr']!r}")
    (root / "alpha_sweep.csv").write_text("\n".join(lines) + "\n")
    return rows
