"""Reconstruction losses over masked patches.

All losses accept either a single image (rows x dim) or a batch
(batch x rows x dim). Per-image losses average over the masked rows; the
batch loss is the mean of the per-image losses.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

TARGET_EPS = 1e-6


def normalize_rows(x, eps: float = TARGET_EPS) -> Tensor:
    """Detached zero-mean, unit-variance rows (no affine)."""
    return T.layer_norm(T.as_tensor(x).detach(), eps=eps)


def pixel_targets(patches: np.ndarray, eps: float = TARGET_EPS) -> Tensor:
    """Per-patch normalised pixels."""
    return normalize_rows(patches, eps)


def _row_mean_loss(pred: Tensor, target: Tensor, mask=None) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} does not match target {target.shape}")
    if mask is not None and len(mask) != pred.shape[-2]:
        raise DimensionError(f"{pred.shape[-2]} prediction rows for {len(mask)} masked patches")
    if pred.shape[-2] == 0:
        return Tensor(0.0)
    return T.mean(T.sq_error_rows(pred, target))


def mae_pixel_loss(pred: Tensor, targets: Tensor, mask=None) -> Tensor:
    """(1/|M|) sum_i ||p_i - p_hat_i||^2 over the masked rows already selected.

    ``mask`` (a MaskSet), when given, only checks the row count. An empty
    mask yields 0.
    """
    return _row_mean_loss(T.as_tensor(pred), T.as_tensor(targets), mask)


def teacher_feature_loss(pred_t: Tensor, targets_t: Tensor, mask=None) -> Tensor:
    return _row_mean_loss(T.as_tensor(pred_t), T.as_tensor(targets_t), mask)


def collaborative_terms(
    pred_s: Tensor, pred_t: Tensor, targets_s: Tensor, targets_t: Tensor, mask=None
) -> Tuple[Tensor, Tensor]:
    """(student term, teacher term), each a mean over masked rows."""
    return (
        _row_mean_loss(T.as_tensor(pred_s), T.as_tensor(targets_s), mask),
        _row_mean_loss(T.as_tensor(pred_t), T.as_tensor(targets_t), mask),
    )


def combine(student_term: Tensor, teacher_term: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return student_term * alpha + teacher_term * (1.0 - alpha)


def collaborative_loss(
    pred_s: Tensor, pred_t: Tensor, targets_s: Tensor, targets_t: Tensor, alpha: float, mask=None
) -> Tensor:
    """alpha * student reconstruction + (1 - alpha) * teacher reconstruction."""
    s, t = collaborative_terms(pred_s, pred_t, targets_s, targets_t, mask)
    return combine(s, t, alpha)


def masked_rows(x: Tensor, masked: np.ndarray) -> Tensor:
    """Pick the masked rows: x [B, N, D], masked [B, K] -> [B, K, D]."""
    return T.gather_rows(T.as_tensor(x), masked)
