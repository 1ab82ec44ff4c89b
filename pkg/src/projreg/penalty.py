"""L1, L2, and projected penalties with gradients under frozen masks.

The projected penalty sums the L2 norms (or squared norms) of the
weight vector restricted to each projection mask:

    sqrt variant     R(w) = lam_eff * sum_s ||w . I_s||_2
    squared variant  R(w) = lam_eff * sum_s ||w . I_s||_2^2

with ``lam_eff = lambda / max_j counter[j]`` when counter normalization
is on. Masks are constants for differentiation: the sampling
distribution does depend on w, but the indicator is non-differentiable,
so gradients flow through the selected coordinates only.

Limiting cases of the sqrt variant: the full basis-vector mask set gives
the L1 norm; a single all-ones mask gives the L2 norm.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from projreg.numerics import as_vector, require_finite
from projreg.sampler import ProjectionMask

__all__ = [
    "PenaltyFamily",
    "PenaltySpec",
    "PenaltyResult",
    "penalty_l1",
    "penalty_l2",
    "penalty_proposed",
    "penalty_value",
    "penalty_gradient_check",
]


class PenaltyFamily(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"
    PROJECTED_SQRT = "projected-sqrt"
    PROJECTED_SQUARED = "projected-squared"


@dataclass
class PenaltySpec:
    family: PenaltyFamily = PenaltyFamily.PROJECTED_SQUARED
    lambda_base: float = 1.0
    normalize_by_counter: bool = True

    def __post_init__(self):
        if self.lambda_base < 0:
            raise ValueError(f"lambda_base must be >= 0, got {self.lambda_base}")
        self.family = PenaltyFamily(self.family)


@dataclass
class PenaltyResult:
    value: float
    gradient: np.ndarray
    lambda_effective: float
    masks_used: list[ProjectionMask] = field(default_factory=list)


def penalty_l1(w, lam: float) -> PenaltyResult:
    """lam * sum |w_j|; subgradient sign(0) := 0."""
    w = require_finite(as_vector(w), "weights")
    return PenaltyResult(
        value=float(lam * np.abs(w).sum()),
        gradient=lam * np.sign(w),
        lambda_effective=float(lam),
    )


def penalty_l2(w, lam: float) -> PenaltyResult:
    """lam * ||w||_2; gradient lam * w / ||w||_2, zero at the origin."""
    w = require_finite(as_vector(w), "weights")
    norm = float(np.sqrt(np.dot(w, w)))
    grad = lam * w / norm if norm > 0 else np.zeros_like(w)
    return PenaltyResult(value=lam * norm, gradient=grad, lambda_effective=float(lam))


def _check_masks(w: np.ndarray, masks: list[ProjectionMask]) -> None:
    for m in masks:
        if m.indicators.size != w.size:
            raise ValueError(
                f"mask length {m.indicators.size} does not match weight length {w.size}"
            )


def penalty_proposed(w, masks: list[ProjectionMask], counter, spec: PenaltySpec) -> PenaltyResult:
    """Projected penalty over the given masks, frozen-mask gradient.

    The per-experiment sums run sequentially over the mask list so
    results are bit-reproducible. A sqrt-variant experiment whose
    projected norm is zero contributes zero to the gradient (a valid
    subgradient). An all-zero counter means nothing was ever selected:
    the value is 0 and lambda_effective is reported as lambda_base.
    """
    w = require_finite(as_vector(w), "weights")
    _check_masks(w, masks)
    if spec.family not in (PenaltyFamily.PROJECTED_SQRT, PenaltyFamily.PROJECTED_SQUARED):
        raise ValueError(f"penalty_proposed requires a projected family, got {spec.family}")

    counter = np.asarray(counter)
    max_count = int(counter.max()) if counter.size else 0
    lam_eff = spec.lambda_base
    if spec.normalize_by_counter and max_count > 0:
        lam_eff = spec.lambda_base / max_count

    value = 0.0
    grad = np.zeros_like(w)
    squared = spec.family is PenaltyFamily.PROJECTED_SQUARED
    for m in masks:
        projected = w * m.indicators
        sq = float(np.dot(projected, projected))
        if squared:
            value += sq
            grad += 2.0 * projected
        else:
            norm = np.sqrt(sq)
            value += norm
            if norm > 0:
                grad += projected / norm
    return PenaltyResult(
        value=lam_eff * value,
        gradient=lam_eff * grad,
        lambda_effective=float(lam_eff),
        masks_used=list(masks),
    )


def penalty_value(w, spec: PenaltySpec, masks=None, counter=None) -> PenaltyResult:
    """Dispatch on the penalty family; masks required for projected families."""
    if spec.family is PenaltyFamily.L1:
        return penalty_l1(w, spec.lambda_base)
    if spec.family is PenaltyFamily.L2:
        return penalty_l2(w, spec.lambda_base)
    if masks is None:
        raise ValueError("projected penalties need masks")
    if counter is None:
        counter = np.sum([m.indicators for m in masks], axis=0)
    return penalty_proposed(w, masks, counter, spec)


def penalty_gradient_check(w, spec: PenaltySpec, masks=None) -> float:
    """Max relative error of the analytic gradient vs central differences.

    Step per coordinate is 1e-6 * max(1, |w_j|). The sqrt variant must be
    evaluated away from its singularity (no projected norm near zero).
    """
    w = as_vector(w).copy()
    counter = None
    if masks is not None:
        counter = np.sum([m.indicators for m in masks], axis=0)
    analytic = penalty_value(w, spec, masks, counter).gradient

    worst = 0.0
    for j in range(w.size):
        h = 1e-6 * max(1.0, abs(w[j]))
        wj = w[j]
        w[j] = wj + h
        up = penalty_value(w, spec, masks, counter).value
        w[j] = wj - h
        down = penalty_value(w, spec, masks, counter).value
        w[j] = wj
        fd = (up - down) / (2.0 * h)
        rel = abs(analytic[j] - fd) / max(1.0, abs(analytic[j]), abs(fd))
        worst = max(worst, rel)
    return worst
