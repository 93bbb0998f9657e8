"""Attention heatmap overlays and mask overlays, written as binary PPM/PGM."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np

from . import tensor as T
from .data import ImageDataset, load_checkpoint, make_batch
from .errors import CompatibilityError, DimensionError
from .masking import aggregate_attention, select_mask_topk
from .tensor import Tensor
from .vit import ViTConfig, encode, extract_attention, patchify

HEAT_WEIGHT = 0.6


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Binary P6; rgb is [H, W, 3] uint8."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"expected [H, W, 3], got {rgb.shape}")
    h, w, _ = rgb.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    return path


def write_pgm(path, gray: np.ndarray) -> Path:
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise DimensionError(f"expected [H, W], got {gray.shape}")
    h, w = gray.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read back a P5/P6 file written by this module."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    if int(maxval) != 255:
        raise ValueError("only 8-bit maps are supported")
    if magic == b"P6":
        return np.frombuffer(body, np.uint8).reshape(h, w, 3)
    if magic == b"P5":
        return np.frombuffer(body, np.uint8).reshape(h, w)
    raise ValueError(f"unsupported magic {magic!r}")


def heatmap(scores: np.ndarray, grid: int, patch_size: int) -> np.ndarray:
    """Per-patch scores -> [H, W] uint8, the maximum score mapped to 255."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (grid * grid,):
        raise DimensionError(f"{scores.shape[0]} scores for a {grid}x{grid} grid")
    top = scores.max()
    level = scores / top if top > 0 else np.zeros_like(scores)
    level = np.clip(level, 0.0, 1.0).reshape(grid, grid)
    up = np.kron(level, np.ones((patch_size, patch_size)))
    return np.rint(up * 255.0).astype(np.uint8)


def to_rgb(image: np.ndarray) -> np.ndarray:
    """[C, H, W] uint8 (C in {1, 3}) -> [H, W, 3] uint8."""
    image = np.asarray(image, dtype=np.uint8)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    if image.shape[0] != 3:
        raise DimensionError(f"cannot display {image.shape[0]}-channel images")
    return image.transpose(1, 2, 0)


def overlay(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Blend a red-to-yellow heat colour over the dimmed image."""
    rgb = to_rgb(image).astype(np.float64)
    h = heat.astype(np.float64)[..., None] / 255.0
    colour = np.concatenate([np.ones_like(h), h, np.zeros_like(h)], axis=-1) * 255.0
    out = (1.0 - HEAT_WEIGHT * h) * rgb + HEAT_WEIGHT * h * colour
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def mask_overlay(image: np.ndarray, masked: np.ndarray, grid: int, patch_size: int) -> np.ndarray:
    """Masked patches painted mid-grey; visible patches shown as-is."""
    rgb = to_rgb(image).copy()
    for i in np.asarray(masked, dtype=np.int64):
        r, c = divmod(int(i), grid)
        rgb[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = 128
    return rgb


@dataclass
class AttentionMaps:
    teacher: np.ndarray
    student: np.ndarray
    collaborative: np.ndarray
    masked: np.ndarray


def attention_maps(
    teacher_params, teacher_cfg: ViTConfig, student_params, student_cfg: ViTConfig,
    patches: np.ndarray, alpha: float, mask_ratio: float = 0.75, polarity: str = "most",
    reduction: str = "cls_mean",
) -> AttentionMaps:
    """A^t, A^s, their blend and the resulting top-k mask for one image [N, patch_dim]."""
    with T.no_grad():
        a_t = extract_attention(encode(teacher_params, patches[None], teacher_cfg), reduction)[0]
        a_s = extract_attention(encode(student_params, patches[None], student_cfg), reduction)[0]
    a_c = aggregate_attention(a_s, a_t, alpha)
    return AttentionMaps(a_t, a_s, a_c, select_mask_topk(a_c, mask_ratio, polarity).indices)


def render(image: np.ndarray, maps: AttentionMaps, grid: int, patch_size: int) -> Dict[str, np.ndarray]:
    return {
        "attention_teacher": overlay(image, heatmap(maps.teacher, grid, patch_size)),
        "attention_student": overlay(image, heatmap(maps.student, grid, patch_size)),
        "attention_collaborative": overlay(image, heatmap(maps.collaborative, grid, patch_size)),
        "mask": mask_overlay(image, maps.masked, grid, patch_size),
    }


def visualize(
    checkpoint, ds: ImageDataset, index: int, alpha: float, out_dir,
    mask_ratio: float = 0.75, polarity: str = "most",
) -> Dict[str, Path]:
    """Write the three attention overlays and the mask overlay for one image.

    The student map comes from the momentum encoder when the checkpoint has
    one (stage 2), otherwise from the online student. A checkpoint without a
    teacher (pixel bootstrap) uses its own encoder for both maps.
    """
    ckpt = load_checkpoint(checkpoint)
    if "vit" not in ckpt.meta or not ckpt.has_namespace("student"):
        raise CompatibilityError(f"{checkpoint}: no encoder in checkpoint")
    s_cfg = ViTConfig.from_dict(ckpt.meta["vit"])
    s_ns = "momentum" if ckpt.has_namespace("momentum") else "student"
    s_params = {k: Tensor(v) for k, v in ckpt.namespace(s_ns).items()}
    if ckpt.has_namespace("teacher"):
        t_cfg = ViTConfig.from_dict(ckpt.meta["teacher_vit"])
        t_params = {k: Tensor(v) for k, v in ckpt.namespace("teacher").items()}
    else:
        t_cfg, t_params = s_cfg, s_params
    if ds.shape != (s_cfg.in_chans, s_cfg.image_size, s_cfg.image_size):
        raise CompatibilityError(f"dataset images {ds.shape} do not match the checkpoint's model")
    patches = patchify(make_batch(ds, [index]), s_cfg.patch_size)[0]
    maps = attention_maps(t_params, t_cfg, s_params, s_cfg, patches, alpha, mask_ratio, polarity)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = render(ds.image(index), maps, s_cfg.grid, s_cfg.patch_size)
    return {name: write_ppm(out_dir / f"{name}.ppm", rgb) for name, rgb in images.items()}
