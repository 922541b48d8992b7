"""Perturbation-size and attack-quality measurements.

The central measure is a sigmoid-mapped per-element score calibrated to how
noticeable a pixel change is: each element contributes
``sigmoid(|a| * slope - offset) - sigmoid(-offset)``, so a zero perturbation
scores exactly zero and a saturated change approaches (but never reaches) 1
per element. Conventional L0/L2/Linf figures are kept for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .tensors import Perturbation


@dataclass(frozen=True)
class PerceptualParams:
    """Slope/offset of the sigmoid element mapping; both must be positive."""

    slope: float
    offset: float

    def __post_init__(self):
        if not (self.slope > 0 and self.offset > 0):
            raise ValueError("slope and offset must both be > 0")

    def to_dict(self) -> dict:
        return {"slope": self.slope, "offset": self.offset}


# Steep mapping that separates the small perturbations the optimizer works
# with; used inside the fitness loop.
DEFAULT_PERCEPTUAL = PerceptualParams(slope=15.0, offset=3.0)
# Gentler mapping tuned to match naked-eye rankings; used for reporting.
REPORTING_PERCEPTUAL = PerceptualParams(slope=10.0, offset=5.8)


def perceptual_size(pert: Perturbation | np.ndarray, params: PerceptualParams = DEFAULT_PERCEPTUAL) -> float:
    """Sum of sigmoid-mapped absolute element changes; 0 iff all-zero."""
    arr = pert.data if isinstance(pert, Perturbation) else np.asarray(pert, dtype=np.float64)
    mapped = expit(np.abs(arr) * params.slope - params.offset)
    return float(np.sum(mapped - expit(-params.offset), dtype=np.float64))


@dataclass(frozen=True)
class PerturbationReport:
    """Size summary: perceptual score plus the usual Lp figures."""

    z: float
    l0: int
    l2_per_pixel: float
    linf: float

    def to_dict(self) -> dict:
        return {"z": self.z, "l0": self.l0, "l2_per_pixel": self.l2_per_pixel, "linf": self.linf}


def l2_per_pixel(pert: Perturbation | np.ndarray) -> float:
    arr = pert.data if isinstance(pert, Perturbation) else np.asarray(pert, dtype=np.float64)
    return float(np.sum(arr * arr, dtype=np.float64) / arr.size)


def perturbation_report(
    pert: Perturbation,
    params: PerceptualParams = REPORTING_PERCEPTUAL,
) -> PerturbationReport:
    """Full size report. l0 counts pixels with any changed channel."""
    arr = pert.data
    changed = np.any(arr != 0.0, axis=2)
    return PerturbationReport(
        z=perceptual_size(pert, params),
        l0=int(np.count_nonzero(changed)),
        l2_per_pixel=l2_per_pixel(pert),
        linf=float(np.max(np.abs(arr))) if arr.size else 0.0,
    )


def attack_success_rate(
    final_labels: Sequence[int],
    reference_labels: Sequence[int],
    targeted: bool,
) -> float:
    """Fraction of outcomes that hit the target (targeted) or left the true
    label (non-targeted). reference_labels are targets resp. true labels."""
    if len(final_labels) == 0:
        raise ValueError("attack_success_rate needs at least one outcome")
    if len(final_labels) != len(reference_labels):
        raise ValueError("label lists must have equal length")
    pairs = zip(final_labels, reference_labels)
    if targeted:
        hits = sum(1 for got, want in pairs if got == want)
    else:
        hits = sum(1 for got, true in pairs if got != true)
    return hits / len(final_labels)
