"""Small ViT encoder, MAE-style decoder with dual linear heads, attention export.

Parameters are plain ``dict[str, Tensor]`` keyed by dotted names, which keeps
checkpointing and the momentum shadow trivial. All forwards are batch-first.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

Params = Dict[str, Tensor]

ATTENTION_REDUCTIONS = ("cls_mean", "cls_max", "all_rows_mean")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}"
            )
        if min(self.depth, self.decoder_depth, self.in_chans) < 1:
            raise ConfigError("depth, decoder_depth and in_chans must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size**2

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def decoder_mlp_hidden(self) -> int:
        return int(self.decoder_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# -- patches -------------------------------------------------------------------
def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[C,H,W] -> [N, C*P*P] or [B,C,H,W] -> [B, N, C*P*P], row-major patch scan."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    b, c, h, w = images.shape
    p = patch_size
    if p <= 0 or h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = images.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, patch_size: int, channels: int, height: int, width: int) -> np.ndarray:
    patches = np.asarray(patches)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    p = patch_size
    gh, gw = height // p, width // p
    b = patches.shape[0]
    out = patches.reshape(b, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, channels, height, width)
    return out[0] if single else out


# -- init ------------------------------------------------------------------------
def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _p(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _init_blocks(params: Params, prefix: str, depth: int, dim: int, hidden: int, rng) -> None:
    for i in range(depth):
        b = f"{prefix}blocks.{i}."
        params[b + "norm1.weight"] = _p(np.ones(dim))
        params[b + "norm1.bias"] = _p(np.zeros(dim))
        params[b + "attn.qkv.weight"] = _p(trunc_normal(rng, (dim, 3 * dim)))
        params[b + "attn.qkv.bias"] = _p(np.zeros(3 * dim))
        params[b + "attn.proj.weight"] = _p(trunc_normal(rng, (dim, dim)))
        params[b + "attn.proj.bias"] = _p(np.zeros(dim))
        params[b + "norm2.weight"] = _p(np.ones(dim))
        params[b + "norm2.bias"] = _p(np.zeros(dim))
        params[b + "mlp.fc1.weight"] = _p(trunc_normal(rng, (dim, hidden)))
        params[b + "mlp.fc1.bias"] = _p(np.zeros(hidden))
        params[b + "mlp.fc2.weight"] = _p(trunc_normal(rng, (hidden, dim)))
        params[b + "mlp.fc2.bias"] = _p(np.zeros(dim))


def init_encoder(cfg: ViTConfig, rng: np.random.Generator) -> Params:
    d = cfg.embed_dim
    params: Params = {
        "patch_embed.weight": _p(trunc_normal(rng, (cfg.patch_dim, d))),
        "patch_embed.bias": _p(np.zeros(d)),
        "cls_token": _p(trunc_normal(rng, (1, d))),
        "pos_embed": _p(trunc_normal(rng, (cfg.num_patches + 1, d))),
    }
    _init_blocks(params, "", cfg.depth, d, cfg.mlp_hidden, rng)
    params["norm.weight"] = _p(np.ones(d))
    params["norm.bias"] = _p(np.zeros(d))
    return params


def init_head(rng: np.random.Generator, in_dim: int, out_dim: int, name: str) -> Params:
    return {
        f"head_{name}.weight": _p(trunc_normal(rng, (in_dim, out_dim))),
        f"head_{name}.bias": _p(np.zeros(out_dim)),
    }


def init_decoder(cfg: ViTConfig, rng: np.random.Generator, heads: Dict[str, int]) -> Params:
    """Decoder trunk plus one linear head per entry of ``heads`` (name -> width)."""
    dd = cfg.decoder_dim
    params: Params = {
        "embed.weight": _p(trunc_normal(rng, (cfg.embed_dim, dd))),
        "embed.bias": _p(np.zeros(dd)),
        "mask_token": _p(trunc_normal(rng, (1, dd))),
        "pos_embed": _p(trunc_normal(rng, (cfg.num_patches + 1, dd))),
    }
    _init_blocks(params, "", cfg.decoder_depth, dd, cfg.decoder_mlp_hidden, rng)
    params["norm.weight"] = _p(np.ones(dd))
    params["norm.bias"] = _p(np.zeros(dd))
    for name, width in heads.items():
        params.update(init_head(rng, dd, width, name))
    return params


def count_parameters(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


# -- transformer blocks ----------------------------------------------------------
def _attention(x: Tensor, params: Params, prefix: str, heads: int):
    b, t, d = x.shape
    dh = d // heads
    qkv = T.linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = qkv.reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = T.softmax(T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh)), axis=-1)
    out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return T.linear(out, params[prefix + "proj.weight"], params[prefix + "proj.bias"]), att


def _block(x: Tensor, params: Params, prefix: str, heads: int):
    h = T.layer_norm(x, params[prefix + "norm1.weight"], params[prefix + "norm1.bias"])
    a, att = _attention(h, params, prefix + "attn.", heads)
    x = x + a
    h = T.layer_norm(x, params[prefix + "norm2.weight"], params[prefix + "norm2.bias"])
    h = T.gelu(T.linear(h, params[prefix + "mlp.fc1.weight"], params[prefix + "mlp.fc1.bias"]))
    h = T.linear(h, params[prefix + "mlp.fc2.weight"], params[prefix + "mlp.fc2.bias"])
    return x + h, att


# -- encoder -----------------------------------------------------------------------
@dataclass
class EncoderOutput:
    """Encoder result for a batch.

    ``hidden`` is the normalised sequence [B, 1+K, D] with the CLS token first
    and patch tokens in ascending original-patch order. ``visible`` is the
    [B, K] index array of patches that were encoded (None in full-image mode).
    """

    hidden: Tensor
    attention_last: np.ndarray
    visible: Optional[np.ndarray]
    num_patches: int

    @property
    def tokens(self) -> Tensor:
        return self.hidden[:, 1:]

    @property
    def cls_token(self) -> Tensor:
        return self.hidden[:, 0]

    @property
    def full_image(self) -> bool:
        return self.visible is None or self.visible.shape[1] == self.num_patches


def encode(params: Params, patches, cfg: ViTConfig, visible: Optional[np.ndarray] = None) -> EncoderOutput:
    """Run the encoder on the visible patches only.

    patches: [B, N, C*P*P]; visible: [B, K] sorted patch indices, or None for
    the full image. Masked patch pixels are dropped before any arithmetic.
    """
    x = T.as_tensor(patches)
    b, n, _ = x.shape
    if n != cfg.num_patches:
        raise ContractError(f"expected {cfg.num_patches} patches, got {n}")
    pos = params["pos_embed"]
    pos_patch = pos[1:]
    if visible is not None:
        visible = np.asarray(visible, dtype=np.intp)
        if visible.ndim != 2 or visible.shape[0] != b:
            raise ContractError(f"visible index array must be [B, K], got {visible.shape}")
        if visible.shape[1] == 0:
            raise ContractError("no unmasked patches to encode")
        x = T.gather_rows(x, visible)
        pos_patch = T.gather_rows(T.expand(pos_patch, (b, n, cfg.embed_dim)), visible)
    x = T.linear(x, params["patch_embed.weight"], params["patch_embed.bias"]) + pos_patch
    cls = T.expand((params["cls_token"] + pos[0:1]).reshape(1, 1, cfg.embed_dim), (b, 1, cfg.embed_dim))
    x = T.concat([cls, x], axis=1)
    att = None
    for i in range(cfg.depth):
        x, att = _block(x, params, f"blocks.{i}.", cfg.heads)
    x = T.layer_norm(x, params["norm.weight"], params["norm.bias"])
    return EncoderOutput(hidden=x, attention_last=att.data, visible=visible, num_patches=n)


def extract_attention(enc: EncoderOutput, reduction: str = "cls_mean") -> np.ndarray:
    """Per-image patch saliency [B, N] from the last attention layer.

    Default: the CLS query row over patch keys, averaged over heads, with the
    CLS self-entry dropped and the remainder renormalised to sum to one.
    """
    if not enc.full_image:
        raise ContractError("attention maps require a full-image (unmasked) encoder pass")
    att = enc.attention_last
    if reduction == "cls_mean":
        scores = att[:, :, 0, 1:].mean(axis=1)
    elif reduction == "cls_max":
        scores = att[:, :, 0, 1:].max(axis=1)
    elif reduction == "all_rows_mean":
        scores = att[:, :, 1:, 1:].mean(axis=(1, 2))
    else:
        raise ConfigError(f"unknown attention reduction {reduction!r}")
    return scores / scores.sum(axis=-1, keepdims=True)


def normalized_features(enc: EncoderOutput) -> Tensor:
    """Detached per-token layer norm (no affine) of the patch tokens: [B, N, D]."""
    return T.layer_norm(enc.tokens.detach(), eps=1e-6)


# -- decoder -----------------------------------------------------------------------
@dataclass
class DecoderOutput:
    pred_teacher: Optional[Tensor] = None
    pred_student: Optional[Tensor] = None
    pred_pixel: Optional[Tensor] = None


def restore_order(visible: np.ndarray, masked: np.ndarray) -> np.ndarray:
    """Indices that put [visible..., masked...] rows back into patch order."""
    shuffle = np.concatenate([visible, masked], axis=1)
    return np.argsort(shuffle, axis=1, kind="stable")


def decode(
    params: Params,
    enc: EncoderOutput,
    masked: np.ndarray,
    cfg: ViTConfig,
    heads=("teacher", "student"),
) -> DecoderOutput:
    """Insert mask tokens, run the decoder trunk over N+1 tokens, apply heads.

    Each requested head maps every one of the N patch positions; losses pick
    out the masked rows.
    """
    masked = np.asarray(masked, dtype=np.intp)
    b = enc.hidden.shape[0]
    n = cfg.num_patches
    visible = enc.visible
    if visible is None:
        visible = np.broadcast_to(np.arange(n), (b, n))
    if masked.ndim != 2 or masked.shape[0] != b or visible.shape[1] + masked.shape[1] != n:
        raise ContractError(
            f"encoder produced {visible.shape[1]} tokens but the mask hides {masked.shape[-1]} of {n}"
        )
    dd = cfg.decoder_dim
    x = T.linear(enc.hidden, params["embed.weight"], params["embed.bias"])
    if masked.shape[1]:
        mask_tokens = T.expand(params["mask_token"].reshape(1, 1, dd), (b, masked.shape[1], dd))
        body = T.concat([x[:, 1:], mask_tokens], axis=1)
        body = T.gather_rows(body, restore_order(visible, masked))
        x = T.concat([x[:, :1], body], axis=1)
    x = x + params["pos_embed"]
    for i in range(cfg.decoder_depth):
        x, _ = _block(x, params, f"blocks.{i}.", cfg.decoder_heads)
    x = T.layer_norm(x, params["norm.weight"], params["norm.bias"])
    trunk = x[:, 1:]
    out = DecoderOutput()
    for name in heads:
        pred = T.linear(trunk, params[f"head_{name}.weight"], params[f"head_{name}.bias"])
        setattr(out, f"pred_{name}", pred)
    return out
