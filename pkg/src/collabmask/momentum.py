"""EMA shadow of the online student encoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from . import tensor as T
from .errors import CompatibilityError
from .tensor import Tensor
from .vit import Params, ViTConfig, encode, extract_attention, normalized_features


@dataclass
class MomentumState:
    """Shadow parameters (no gradients, never optimised) and the EMA coefficient."""

    shadow: Dict[str, Tensor]
    m: float = 0.999
    literal_update: bool = False
    updates: int = field(default=0)

    @classmethod
    def from_online(cls, online: Params, m: float = 0.999, literal_update: bool = False) -> "MomentumState":
        shadow = {k: Tensor(v.data.copy()) for k, v in online.items()}
        return cls(shadow=shadow, m=m, literal_update=literal_update)


def ema_update(state: MomentumState, online: Params) -> MomentumState:
    """shadow <- m * shadow + (1 - m) * online, in place.

    With ``literal_update`` the non-convex form shadow <- shadow + (1 - m) * online
    is applied instead; it accumulates without bound and exists for comparison only.
    """
    if set(state.shadow) != set(online):
        missing = sorted(set(state.shadow) ^ set(online))
        raise CompatibilityError(f"momentum/online parameter names differ: {missing[:5]}")
    m = state.m
    for name, sp in state.shadow.items():
        op = online[name].data
        if sp.shape != op.shape:
            raise CompatibilityError(f"shape mismatch for {name}: {sp.shape} vs {op.shape}")
        if state.literal_update:
            sp.data += (1.0 - m) * op
        else:
            np.multiply(sp.data, m, out=sp.data)
            sp.data += (1.0 - m) * op
    state.updates += 1
    return state


def momentum_forward(
    patches: np.ndarray,
    state: MomentumState,
    cfg: ViTConfig,
    reduction: str = "cls_mean",
) -> Tuple[np.ndarray, Tensor]:
    """Full-image pass of the shadow encoder: (attention map [B, N], detached targets [B, N, D])."""
    with T.no_grad():
        enc = encode(state.shadow, patches, cfg)
        return extract_attention(enc, reduction), normalized_features(enc)
