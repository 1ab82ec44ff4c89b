"""Sampling distribution over weights, momentum, and projection-mask draws.

One penalty evaluation runs S experiments. Each experiment draws a
scalar ``p_s ~ U(0, 1)``, scores every coordinate with it, turns the
scores into a probability distribution, blends that distribution with
the previous step's retained distribution (momentum), and selects a
subset of coordinates as a binary projection mask. A per-coordinate
counter accumulates how often each coordinate was selected across the S
masks; its maximum normalizes the penalty weight downstream.

Selection modes:

* ``TOP_K`` keeps the ``ceil(s_p * N)`` most probable coordinates
  (deterministic given the distribution; ties go to the lowest index).
* ``PROB_THRESHOLD`` keeps coordinates whose probability exceeds
  ``T / N``. T is read as a multiple of the uniform probability 1/N,
  since raw softmax probabilities scale like 1/N.
* ``UNIFORM_THRESHOLD`` ignores the weights: coordinate j is kept iff an
  independent uniform draw exceeds T. This is the simplified sampler the
  L2-bound analysis assumes.
* ``UNIFORM_SUBSET`` ignores the weights: a uniformly random subset of
  exactly ``ceil(s_p * N)`` coordinates. This realizes "sample s_p of
  the axes at random" with an exact mask size and is what the norm
  histograms and the penalty-geometry sweep use.

Random streams: experiment s consumes only ``rng.substream(s)``, so the
S experiments are reproducible regardless of evaluation order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from projreg.numerics import Rng, as_vector, require_finite, stable_softmax

__all__ = [
    "ScoreMode",
    "SelectionMode",
    "SamplerConfig",
    "SamplerState",
    "ProjectionMask",
    "MaskDraw",
    "score_distribution",
    "apply_momentum",
    "commit_state",
    "draw_masks",
]


class ScoreMode(str, enum.Enum):
    # exponent +p_s*|w_j|: large-magnitude weights are the likely picks
    MAGNITUDE = "magnitude"
    # exponent -p_s*w_j: the raw negated-value form, decreasing in w_j
    NEGATED = "negated"


class SelectionMode(str, enum.Enum):
    TOP_K = "topk"
    PROB_THRESHOLD = "prob-threshold"
    UNIFORM_THRESHOLD = "uniform-threshold"
    UNIFORM_SUBSET = "uniform-subset"


@dataclass
class SamplerConfig:
    """Knobs for one family of mask draws.

    s_p: sampling density, the target fraction of coordinates kept per mask.
    S: number of experiments per penalty evaluation.
    T: threshold in [0, 1); meaning depends on selection_mode (see module docs).
    alpha: momentum coefficient; 1 means no memory of previous steps.
    """

    s_p: float = 0.01
    S: int = 10
    T: float = 0.5
    alpha: float = 1.0
    score_mode: ScoreMode = ScoreMode.MAGNITUDE
    selection_mode: SelectionMode = SelectionMode.TOP_K

    def __post_init__(self):
        if not (0.0 < self.s_p <= 1.0):
            raise ValueError(f"s_p must be in (0, 1], got {self.s_p}")
        if self.S < 1:
            raise ValueError(f"S must be a positive integer, got {self.S}")
        if not (0.0 <= self.T < 1.0):
            raise ValueError(f"T must be in [0, 1), got {self.T}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        self.score_mode = ScoreMode(self.score_mode)
        self.selection_mode = SelectionMode(self.selection_mode)

    def mask_size(self, n: int) -> int:
        k = int(np.ceil(self.s_p * n))
        if k > n:
            raise ValueError("sampling density exceeds vector length")
        return k


@dataclass
class SamplerState:
    """Distribution retained from the previous optimizer step."""

    prev_distribution: np.ndarray | None = None
    initialized: bool = False


@dataclass
class ProjectionMask:
    """Binary indicator vector for one experiment."""

    indicators: np.ndarray  # uint8, length N
    selected_count: int = field(init=False)

    def __post_init__(self):
        self.indicators = np.ascontiguousarray(self.indicators, dtype=np.uint8)
        self.selected_count = int(self.indicators.sum())


@dataclass
class MaskDraw:
    """Result of one draw_masks call.

    counter[j] counts how many of the S masks selected coordinate j.
    step_distribution is the mean momentum-blended distribution across
    experiments, the vector a trainer commits after its optimizer step;
    it is None for the weight-independent selection modes.
    """

    masks: list[ProjectionMask]
    counter: np.ndarray
    step_distribution: np.ndarray | None


def score_distribution(w, p_s: float, mode: ScoreMode = ScoreMode.MAGNITUDE) -> np.ndarray:
    """Probability of each coordinate being sampled, given the shared draw p_s."""
    w = as_vector(w)
    require_finite(w, "weights")
    if not (0.0 <= p_s < 1.0):
        raise ValueError(f"p_s must be in [0, 1), got {p_s}")
    if ScoreMode(mode) is ScoreMode.MAGNITUDE:
        return stable_softmax(p_s * np.abs(w))
    return stable_softmax(-p_s * w)


def apply_momentum(current, state: SamplerState, alpha: float) -> np.ndarray:
    """Convex blend ``alpha * current + (1 - alpha) * previous``.

    An uninitialized state stands in for the uniform distribution. Does
    not mutate the state. ``alpha == 1`` returns the current distribution
    bit-for-bit.
    """
    current = as_vector(current)
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return current.copy()
    if state.initialized:
        prev = state.prev_distribution
        if prev.shape != current.shape:
            raise ValueError(
                f"length mismatch: current has {current.size}, previous has {prev.size}"
            )
    else:
        prev = np.full_like(current, 1.0 / current.size)
    return alpha * current + (1.0 - alpha) * prev


def commit_state(state: SamplerState, distribution) -> SamplerState:
    """Replace the retained distribution. Call once per optimizer step."""
    d = as_vector(distribution)
    require_finite(d, "distribution")
    state.prev_distribution = d.copy()
    state.initialized = True
    return state


def _select_top_k(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated probabilities -> ties resolved to lowest index
    order = np.argsort(-probs, kind="stable")
    mask = np.zeros(probs.size, dtype=np.uint8)
    mask[order[:k]] = 1
    return mask


def draw_masks(w, cfg: SamplerConfig, state: SamplerState, rng: Rng) -> MaskDraw:
    """Draw S projection masks for w and accumulate the selection counter."""
    w = as_vector(w)
    if w.size == 0:
        raise ValueError("empty weight vector")
    require_finite(w, "weights")

    n = w.size
    counter = np.zeros(n, dtype=np.int64)
    masks: list[ProjectionMask] = []
    blend_sum = None

    uses_distribution = cfg.selection_mode in (
        SelectionMode.TOP_K,
        SelectionMode.PROB_THRESHOLD,
    )

    for s in range(cfg.S):
        sub = rng.substream(s)
        if uses_distribution:
            p_s = sub.uniform()
            blended = apply_momentum(score_distribution(w, p_s, cfg.score_mode), state, cfg.alpha)
            if cfg.selection_mode is SelectionMode.TOP_K:
                indicators = _select_top_k(blended, cfg.mask_size(n))
            else:
                indicators = (blended > cfg.T / n).astype(np.uint8)
            blend_sum = blended if blend_sum is None else blend_sum + blended
        elif cfg.selection_mode is SelectionMode.UNIFORM_THRESHOLD:
            indicators = (sub.uniform(n) > cfg.T).astype(np.uint8)
        else:  # UNIFORM_SUBSET
            indicators = np.zeros(n, dtype=np.uint8)
            indicators[sub.subset(n, cfg.mask_size(n))] = 1
        mask = ProjectionMask(indicators)
        masks.append(mask)
        counter += mask.indicators

    step_distribution = blend_sum / cfg.S if blend_sum is not None else None
    return MaskDraw(masks=masks, counter=counter, step_distribution=step_distribution)
