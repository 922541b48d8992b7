"""Query-budgeted black-box adversarial attack engine.

Evolves minimal image perturbations against an opaque classifier with a
genetic algorithm whose fitness combines the oracle's confidence gap with a
sigmoid perceptual size metric.
"""

from .engine import (
    AttackConfig,
    AttackResult,
    ConfigError,
    Individual,
    Population,
    attack_performance,
    crossover,
    fitness,
    generation_update,
    init_population,
    mutate,
    roulette_select,
    run_attack,
    selection_weights,
)
from .metrics import (
    DEFAULT_PERCEPTUAL,
    REPORTING_PERCEPTUAL,
    PerceptualParams,
    PerturbationReport,
    attack_success_rate,
    perceptual_size,
    perturbation_report,
)
from .oracle import (
    ConfidenceVector,
    HalfBrightnessOracle,
    Oracle,
    OracleError,
    OracleStats,
    ProtocolError,
    PrototypeOracle,
    RemoteOracle,
    TransportError,
    monte_carlo_confidence,
)
from .tensors import (
    ImageTensor,
    Perturbation,
    ShapeError,
    TensorFormatError,
    apply_perturbation,
    load_image,
    load_perturbation,
    save_image,
    save_perturbation,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "ConfigError", "Individual", "Population",
    "attack_performance", "crossover", "fitness", "generation_update",
    "init_population", "mutate", "roulette_select", "run_attack", "selection_weights",
    "DEFAULT_PERCEPTUAL", "REPORTING_PERCEPTUAL", "PerceptualParams",
    "PerturbationReport", "attack_success_rate", "perceptual_size", "perturbation_report",
    "ConfidenceVector", "HalfBrightnessOracle", "Oracle", "OracleError", "OracleStats",
    "ProtocolError", "PrototypeOracle", "RemoteOracle", "TransportError",
    "monte_carlo_confidence",
    "ImageTensor", "Perturbation", "ShapeError", "TensorFormatError",
    "apply_perturbation", "load_image", "load_perturbation", "save_image",
    "save_perturbation",
]
