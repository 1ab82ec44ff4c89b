"""Penalty-geometry evidence: the L2 bound check, norm histograms, density sweep.

The bound being verified: under the simplified uniform-threshold sampler
(coordinate j kept independently iff u_j > T), Jensen's inequality
E[sqrt(x)] <= sqrt(E[x]) gives

    E[ ||w . I||_2 ]  <=  sqrt( (1 - T) * sum_j w_j^2 )

which is the selection-probability-scaled L2 norm of w. The exhaustive
path computes both sides exactly by enumerating all 2^N masks; the Monte
Carlo path estimates the left side by sampling. Reports also carry the
alternative scaling sqrt(s_p * S * (1 - T) / N) * ||w||_2 for reference;
that constant mixes the experiment count into a per-expectation bound,
so it is reported but never asserted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from projreg.numerics import Rng, as_vector, require_finite
from projreg.penalty import (
    PenaltyFamily,
    PenaltySpec,
    penalty_l1,
    penalty_l2,
    penalty_proposed,
)
from projreg.sampler import SamplerConfig, SamplerState, SelectionMode, draw_masks

__all__ = [
    "BoundReport",
    "SweepRow",
    "HistogramSpec",
    "verify_jensen_small",
    "verify_bound_mc",
    "norm_histogram",
    "penalty_density_sweep",
    "sparse_unit_vector",
]

_EXHAUSTIVE_LIMIT = 20


@dataclass
class BoundReport:
    mc_mean_lhs: float
    analytic_rhs: float
    bound_rhs_alt: float  # sqrt(s_p*S*(1-T)/N) * ||w||_2, reported only
    S_used: int
    seed: int
    holds: bool


@dataclass
class SweepRow:
    density: float
    r_l1: float
    r_l2: float
    r_proposed: float


@dataclass
class HistogramSpec:
    s_p: float
    n_experiments: int
    bin_edges: np.ndarray
    counts: np.ndarray
    norms: np.ndarray = field(repr=False, default=None)


def verify_jensen_small(w, T: float) -> tuple[float, float]:
    """Exact expectation over all 2^N masks under Bernoulli(1 - T) selection.

    Returns (exact_lhs, exact_rhs) where lhs = E[||w . I||_2] and
    rhs = sqrt((1 - T) * sum w^2). Raises if the inequality fails, which
    would mean a broken enumeration rather than a tight draw: it is a
    theorem, not a statistical statement.
    """
    w = require_finite(as_vector(w), "weights")
    n = w.size
    if n > _EXHAUSTIVE_LIMIT:
        raise ValueError("use Monte Carlo path")
    if not (0.0 <= T < 1.0):
        raise ValueError(f"T must be in [0, 1), got {T}")

    q = 1.0 - T  # per-coordinate selection probability
    codes = np.arange(2**n, dtype=np.uint64)
    bits = ((codes[:, None] >> np.arange(n, dtype=np.uint64)) & 1).astype(np.float64)
    norms = np.sqrt(bits @ (w**2))
    popcount = bits.sum(axis=1)
    log_prob = popcount * np.log(q) if q > 0 else np.where(popcount == 0, 0.0, -np.inf)
    if T > 0:
        log_prob = log_prob + (n - popcount) * np.log(T)
    probs = np.exp(log_prob)
    exact_lhs = float(probs @ norms)
    exact_rhs = float(np.sqrt(q * np.sum(w**2)))
    if exact_lhs > exact_rhs * (1 + 1e-12) + 1e-300:
        raise AssertionError(
            f"exact enumeration violated the expectation bound: {exact_lhs} > {exact_rhs}"
        )
    return exact_lhs, exact_rhs


def verify_bound_mc(w, cfg: SamplerConfig, rng: Rng, tolerance: float = 0.02) -> BoundReport:
    """Monte Carlo check of the expectation bound over S masks."""
    if cfg.selection_mode is not SelectionMode.UNIFORM_THRESHOLD:
        raise ValueError("bound verification requires the uniform-threshold sampler")
    w = require_finite(as_vector(w), "weights")

    draw = draw_masks(w, cfg, SamplerState(), rng)
    norms = np.array([np.sqrt(np.sum((w * m.indicators) ** 2)) for m in draw.masks])
    mc_mean_lhs = float(norms.mean())
    analytic_rhs = float(np.sqrt((1.0 - cfg.T) * np.sum(w**2)))
    l2 = float(np.sqrt(np.sum(w**2)))
    bound_rhs_alt = float(np.sqrt(cfg.s_p * cfg.S * (1.0 - cfg.T) / w.size) * l2)
    return BoundReport(
        mc_mean_lhs=mc_mean_lhs,
        analytic_rhs=analytic_rhs,
        bound_rhs_alt=bound_rhs_alt,
        S_used=cfg.S,
        seed=rng.seed,
        holds=bool(mc_mean_lhs <= analytic_rhs * (1.0 + tolerance)),
    )


def norm_histogram(
    w,
    cfg: SamplerConfig,
    n_experiments: int,
    rng: Rng,
    bin_edges=None,
) -> HistogramSpec:
    """Distribution of ||w . I_s||_2 over repeated mask draws.

    Default bins: 50 uniform bins over [0, ||w||_2]. Projected norms
    never exceed the parent norm, and numpy's closed last bin keeps the
    full-mask case counted, so the counts always sum to n_experiments.
    """
    w = require_finite(as_vector(w), "weights")
    parent_norm = float(np.sqrt(np.sum(w**2)))
    if bin_edges is None:
        bin_edges = np.linspace(0.0, parent_norm if parent_norm > 0 else 1.0, 51)
    bin_edges = as_vector(bin_edges)
    if np.any(np.diff(bin_edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")

    hist_cfg = SamplerConfig(
        s_p=cfg.s_p,
        S=n_experiments,
        T=cfg.T,
        alpha=1.0,  # momentum off
        score_mode=cfg.score_mode,
        selection_mode=cfg.selection_mode,
    )
    draw = draw_masks(w, hist_cfg, SamplerState(), rng)
    norms = np.array([np.sqrt(np.sum((w * m.indicators) ** 2)) for m in draw.masks])
    counts, _ = np.histogram(norms, bins=bin_edges)
    return HistogramSpec(
        s_p=cfg.s_p,
        n_experiments=n_experiments,
        bin_edges=bin_edges,
        counts=counts,
        norms=norms,
    )


def sparse_unit_vector(n: int, density: float, rng: Rng, magnitudes: str = "equal") -> np.ndarray:
    """Vector with ceil(density * n) nonzeros, unit L2 norm.

    magnitudes "equal": all nonzeros identical. "gaussian": standard
    normal values rescaled to unit norm (used for histogram parents).
    Positions are drawn from rng either way.
    """
    if not (0.0 < density <= 1.0):
        raise ValueError(f"density must be in (0, 1], got {density}")
    m = int(np.ceil(density * n))
    w = np.zeros(n)
    pos = rng.subset(n, m)
    if magnitudes == "equal":
        w[pos] = 1.0 / np.sqrt(m)
    elif magnitudes == "gaussian":
        vals = rng.normal(size=m)
        w[pos] = vals / np.sqrt(np.sum(vals**2))
    else:
        raise ValueError(f"unknown magnitudes rule {magnitudes!r}")
    return w


def penalty_density_sweep(
    n: int,
    densities,
    cfg: SamplerConfig,
    rng: Rng,
) -> list[SweepRow]:
    """L1, L2, and counter-normalized projected penalty per parent density.

    Each density gets a unit-L2 parent with equal-magnitude nonzeros, so
    r_l2 is 1 and r_l1 is sqrt(ceil(density * n)) by construction; the
    projected value uses the sqrt variant with lambda' = 1 / max counter.
    Each density consumes its own rng sub-stream.
    """
    spec = PenaltySpec(
        family=PenaltyFamily.PROJECTED_SQRT, lambda_base=1.0, normalize_by_counter=True
    )
    rows = []
    for i, density in enumerate(densities):
        sub = rng.substream(i)
        w = sparse_unit_vector(n, float(density), sub.substream(0))
        draw = draw_masks(w, cfg, SamplerState(), sub.substream(1))
        proposed = penalty_proposed(w, draw.masks, draw.counter, spec)
        rows.append(
            SweepRow(
                density=float(density),
                r_l1=penalty_l1(w, 1.0).value,
                r_l2=penalty_l2(w, 1.0).value,
                r_proposed=proposed.value,
            )
        )
    return rows
