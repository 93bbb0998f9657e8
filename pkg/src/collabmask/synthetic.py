"""Synthetic labelled images for desk-scale runs.

``make_shapes``: a smooth coloured background (optionally noisy) with one
shape whose class is the label, placed and coloured at random.

``make_gratings``: two-colour sinusoidal gratings whose orientation bin is the
label. Every patch is determined by a handful of global parameters, so masked
patches are predictable from visible ones -- the structure masked modelling
needs to show a clear loss curve at toy scale.
"""

from __future__ import annotations

import numpy as np

SHAPES = ("square", "ring", "cross", "diagonal")


def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    t = max(size // 4, 1)
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "ring":
        return (yy < t) | (yy >= size - t) | (xx < t) | (xx >= size - t)
    if kind == "cross":
        c0, c1 = (size - t) // 2, (size + t) // 2
        return ((yy >= c0) & (yy < c1)) | ((xx >= c0) & (xx < c1))
    if kind == "diagonal":
        return np.abs(yy - xx) < t
    raise ValueError(f"unknown shape {kind!r}")


def make_shapes(
    count: int,
    image_size: int = 32,
    seed: int = 0,
    num_classes: int = 4,
    min_size: int = 10,
    max_size: int = 18,
    noise: float = 0.03,
) -> tuple:
    """Return (pixels [count, 3, H, W] uint8, labels [count])."""
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
    max_size = min(max_size, image_size)
    min_size = min(min_size, max_size)
    rng = np.random.default_rng(seed)
    h = w = image_size
    yy, xx = np.mgrid[0:h, 0:w] / max(h - 1, 1)
    pixels = np.empty((count, 3, h, w), dtype=np.uint8)
    labels = rng.integers(0, num_classes, size=count)
    for i in range(count):
        c0, c1 = rng.uniform(0.1, 0.6, size=(2, 3))
        ang = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(ang) * xx + np.sin(ang) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]
        img += rng.normal(0.0, noise, size=img.shape) if noise > 0 else 0.0
        size = int(rng.integers(min_size, max_size + 1))
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        m = _shape_mask(SHAPES[labels[i]], size)
        colour = rng.uniform(0.0, 1.0, size=3)
        region = img[:, top:top + size, left:left + size]
        region[:, m] = colour[:, None]
        pixels[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, labels


def make_gratings(
    count: int,
    image_size: int = 32,
    seed: int = 0,
    num_classes: int = 4,
    jitter: float = 0.15,
    freq: tuple = (1.5, 3.0),
) -> tuple:
    """Return (pixels [count, 3, H, W] uint8, labels [count]).

    Class k has orientation k*pi/num_classes (+- jitter radians); frequency in
    cycles per image, phase and the two end colours are random.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    labels = rng.integers(0, num_classes, size=count)
    pixels = np.empty((count, 3, image_size, image_size), dtype=np.uint8)
    for i in range(count):
        theta = labels[i] * np.pi / num_classes + rng.uniform(-jitter, jitter)
        f = rng.uniform(*freq)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        c0, c1 = rng.uniform(0, 1, size=(2, 3))
        img = c0[:, None, None] + (c1 - c0)[:, None, None] * wave[None]
        pixels[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, labels


GENERATORS = {"shapes": make_shapes, "gratings": make_gratings}
