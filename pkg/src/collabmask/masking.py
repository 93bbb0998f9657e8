"""Attention maps to mask sets: random, top-k, stochastic, and the collaborative blend."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

POLARITIES = ("most", "least")
SELECTION_MODES = ("topk", "stochastic", "random")


@dataclass(frozen=True)
class MaskSet:
    """Sorted distinct indices of masked patches out of ``n`` total."""

    indices: np.ndarray
    n: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        if idx.ndim != 1:
            raise DimensionError("mask indices must be one-dimensional")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.n or np.any(np.diff(idx) <= 0)):
            raise ValueError("mask indices must be sorted, distinct and within [0, n)")
        object.__setattr__(self, "indices", idx)

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.n, dtype=bool)
        keep[self.indices] = False
        return np.flatnonzero(keep)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __contains__(self, i) -> bool:
        return bool(np.any(self.indices == i))


def num_masked(n: int, mask_ratio: float) -> int:
    """k = ceil(mask_ratio * n); both degenerate extremes are rejected."""
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    # round before ceil so 0.75 * 196 = 147.00000000000003 style noise cannot bump k
    k = math.ceil(round(mask_ratio * n, 9))
    if k == 0 or k == n:
        raise ConfigError(f"mask_ratio {mask_ratio} masks {k} of {n} patches")
    return k


def aggregate_attention(a_s: np.ndarray, a_t: np.ndarray, alpha: float) -> np.ndarray:
    """Collaborative map: alpha * student + (1 - alpha) * teacher, elementwise."""
    a_s = np.asarray(a_s, dtype=np.float64)
    a_t = np.asarray(a_t, dtype=np.float64)
    if a_s.shape != a_t.shape:
        raise DimensionError(f"attention maps differ in shape: {a_s.shape} vs {a_t.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * a_s + (1.0 - alpha) * a_t


def _order(scores: np.ndarray, polarity: str) -> np.ndarray:
    if polarity == "most":
        return np.argsort(-scores, kind="stable")
    if polarity == "least":
        return np.argsort(scores, kind="stable")
    raise ConfigError(f"mask polarity must be one of {POLARITIES}, got {polarity!r}")


def select_mask_topk(scores: np.ndarray, mask_ratio: float, polarity: str = "most") -> MaskSet:
    """Mask the k highest (or lowest) scoring patches; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    k = num_masked(n, mask_ratio)
    return MaskSet(np.sort(_order(scores, polarity)[:k]), n)


def select_mask_random(n: int, mask_ratio: float, rng: np.random.Generator) -> MaskSet:
    k = num_masked(n, mask_ratio)
    return MaskSet(np.sort(rng.permutation(n)[:k]), n)


def select_mask_stochastic(
    scores: np.ndarray,
    mask_ratio: float,
    rng: np.random.Generator,
    polarity: str = "most",
) -> MaskSet:
    """Sequential sampling without replacement, probability proportional to score.

    Implemented with Gumbel keys (log score + Gumbel noise, sorted descending),
    which has the same law as drawing one patch at a time from the renormalised
    remaining scores. Zero-score patches come last in uniformly random order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    k = num_masked(n, mask_ratio)
    if polarity == "least":
        scores = scores.max() - scores
    elif polarity != "most":
        raise ConfigError(f"mask polarity must be one of {POLARITIES}, got {polarity!r}")
    gumbel = rng.gumbel(size=n)
    tiebreak = rng.random(n)
    with np.errstate(divide="ignore"):
        keys = np.log(scores) + gumbel
    # lexsort sorts by the last key first
    order = np.lexsort((-tiebreak, -keys))
    return MaskSet(np.sort(order[:k]), n)


def select_mask(
    scores: np.ndarray,
    mask_ratio: float,
    mode: str,
    rng: np.random.Generator,
    polarity: str = "most",
) -> MaskSet:
    if mode == "topk":
        return select_mask_topk(scores, mask_ratio, polarity)
    if mode == "stochastic":
        return select_mask_stochastic(scores, mask_ratio, rng, polarity)
    if mode == "random":
        return select_mask_random(len(scores), mask_ratio, rng)
    raise ConfigError(f"selection mode must be one of {SELECTION_MODES}, got {mode!r}")


def batch_masks(
    scores: np.ndarray,
    mask_ratio: float,
    mode: str,
    rng: np.random.Generator,
    polarity: str = "most",
):
    """Per-image masks for a [B, N] score array, as ([B, K_vis], [B, K_mask]) index arrays."""
    masks = [select_mask(s, mask_ratio, mode, rng, polarity) for s in scores]
    masked = np.stack([m.indices for m in masks])
    visible = np.stack([m.visible for m in masks])
    return visible, masked
