"""Packed image datasets, batch assembly and checkpoint files.

Dataset file (little-endian)::

    magic  b"CMTD"   4 bytes
    version          u32
    count            u64
    C, H, W          u32 each
    pixels           count*C*H*W bytes, u8, image-major then C, H, W

Labels live in a sibling file with suffix ``.cmtl``::

    magic  b"CMTL", version u32, count u64, labels u16[count]

Checkpoint file::

    magic  b"CMTC", version u32
    meta_len u64, meta (UTF-8 JSON, sorted keys)
    n_tensors u32, then per tensor:
        name_len u16, name (UTF-8), ndim u32, dims u64[ndim], data f64[prod(dims)]
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    CompatibilityError,
    DataError,
    EmptyDatasetError,
    IndivisibleDimsError,
    TruncatedFileError,
)

DATASET_MAGIC = b"CMTD"
LABEL_MAGIC = b"CMTL"
CHECKPOINT_MAGIC = b"CMTC"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

_DS_HEADER = struct.Struct("<4sIQIII")
_LABEL_HEADER = struct.Struct("<4sIQ")


def labels_path(path) -> Path:
    return Path(path).with_suffix(".cmtl")


@dataclass
class ImageDataset:
    pixels: np.ndarray  # [count, C, H, W] uint8
    labels: Optional[np.ndarray] = None
    path: Optional[Path] = None
    _stats: Optional[tuple] = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def shape(self):
        return tuple(int(s) for s in self.pixels.shape[1:])

    def __len__(self) -> int:
        return self.count

    def image(self, i: int) -> np.ndarray:
        return self.pixels[i]

    def channel_stats(self):
        """Per-channel mean and std of pixels scaled to [0, 1]."""
        if self._stats is None:
            x = self.pixels.astype(np.float64) / 255.0
            mean = x.mean(axis=(0, 2, 3))
            std = x.std(axis=(0, 2, 3))
            self._stats = (mean, np.where(std > 0, std, 1.0))
        return self._stats


def write_dataset(path, pixels: np.ndarray, labels: Optional[Sequence[int]] = None) -> Path:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 4:
        raise DataError(f"pixels must be [count, C, H, W], got shape {pixels.shape}")
    count, c, h, w = pixels.shape
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, count, c, h, w))
        f.write(pixels.tobytes())
    if labels is not None:
        lab = np.asarray(labels)
        if lab.shape != (count,) or lab.min(initial=0) < 0 or lab.max(initial=0) > 0xFFFF:
            raise DataError("labels must be one u16 per image")
        with open(labels_path(path), "wb") as f:
            f.write(_LABEL_HEADER.pack(LABEL_MAGIC, DATASET_VERSION, count))
            f.write(lab.astype("<u2").tobytes())
    return path


def _read_labels(path: Path, count: int) -> Optional[np.ndarray]:
    lp = labels_path(path)
    if not lp.exists():
        return None
    raw = lp.read_bytes()
    if len(raw) < _LABEL_HEADER.size:
        raise TruncatedFileError(f"{lp}: label header truncated")
    magic, version, n = _LABEL_HEADER.unpack_from(raw)
    if magic != LABEL_MAGIC:
        raise BadMagicError(f"{lp}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DataError(f"{lp}: unsupported version {version}")
    if n != count:
        raise DataError(f"{lp}: {n} labels for {count} images")
    body = raw[_LABEL_HEADER.size:]
    if len(body) != 2 * n:
        raise TruncatedFileError(f"{lp}: expected {2 * n} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<u2").astype(np.int64)


def load_dataset(path, patch_size: Optional[int] = None) -> ImageDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(_DS_HEADER.size)
    if len(head) < 4 or head[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: not a packed dataset (bad magic)")
    if len(head) < _DS_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, count, c, h, w = _DS_HEADER.unpack(head)
    if version != DATASET_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if count == 0:
        raise EmptyDatasetError(f"{path}: dataset holds no images")
    expected = _DS_HEADER.size + count * c * h * w
    if size < expected:
        raise TruncatedFileError(f"{path}: header implies {expected} bytes, file has {size}")
    if size > expected:
        raise DataError(f"{path}: {size - expected} trailing bytes after pixel data")
    if patch_size is not None and (h % patch_size or w % patch_size):
        raise IndivisibleDimsError(f"{path}: {h}x{w} images not divisible by patch size {patch_size}")
    pixels = np.memmap(path, dtype=np.uint8, mode="r", offset=_DS_HEADER.size, shape=(count, c, h, w))
    return ImageDataset(pixels=pixels, labels=_read_labels(path, count), path=path)


def sample_flips(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.random(n) < 0.5


def make_batch(
    ds: ImageDataset,
    indices: Sequence[int],
    augment: bool = False,
    rng: Optional[np.random.Generator] = None,
    flips: Optional[np.ndarray] = None,
) -> np.ndarray:
    """[B, C, H, W] float64 batch: scaled to [0, 1], then channel-standardised.

    Horizontal flips come from ``flips`` when given, else are drawn from ``rng``
    when ``augment`` is on.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= ds.count):
        raise IndexError(f"batch index out of range for dataset of {ds.count} images")
    x = ds.pixels[idx].astype(np.float64) / 255.0
    mean, std = ds.channel_stats()
    x = (x - mean[None, :, None, None]) / std[None, :, None, None]
    if flips is None and augment:
        if rng is None:
            raise ValueError("augmentation needs an rng")
        flips = sample_flips(rng, len(idx))
    if flips is not None and np.any(flips):
        x[flips] = x[flips][..., ::-1]
    return x


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    """Dataset visiting order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(count)


# -- checkpoints -----------------------------------------------------------------
def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    meta: dict

    def namespace(self, prefix: str) -> Dict[str, np.ndarray]:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def has_namespace(self, prefix: str) -> bool:
        p = prefix.rstrip("/") + "/"
        return any(k.startswith(p) for k in self.tensors)


def _encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(meta)), meta]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8")
        bname = name.encode()
        parts.append(struct.pack("<H", len(bname)))
        parts.append(bname)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_encode_checkpoint(ckpt))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    r = _Reader(raw, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint metadata") from exc
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(raw):
        raise DataError(f"{path}: {len(raw) - r.pos} trailing bytes after tensor table")
    return Checkpoint(tensors=tensors, meta=meta)


def check_names(ckpt: Checkpoint, namespace: str, expected: Dict[str, tuple]) -> None:
    """Raise CompatibilityError naming the first missing, extra or misshapen tensor."""
    have = ckpt.namespace(namespace)
    for name, shape in expected.items():
        if name not in have:
            raise CompatibilityError(f"checkpoint is missing tensor {namespace}/{name}")
        if tuple(have[name].shape) != tuple(shape):
            raise CompatibilityError(
                f"tensor {namespace}/{name} has shape {have[name].shape}, model expects {tuple(shape)}"
            )
    extra = sorted(set(have) - set(expected))
    if extra:
        raise CompatibilityError(f"checkpoint has unexpected tensor {namespace}/{extra[0]}")


def params_digest(arrays: Iterable) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".pgm", ".tif", ".tiff", ".webp")


def pack_image_dir(src, out, image_size: int, channels: int = 3) -> ImageDataset:
    """Pack a directory of images into the dataset format.

    Images are centre-cropped to a square and resized. When ``src`` holds
    subdirectories, each subdirectory is a class (sorted by name) and a label
    file is written; loose files at the top level are then ignored.
    """
    from PIL import Image  # only needed for ingestion

    src = Path(src)
    if not src.is_dir():
        raise DataError(f"{src}: not a directory")
    classes = sorted(p.name for p in src.iterdir() if p.is_dir())
    if classes:
        items = [(f, ci) for ci, c in enumerate(classes) for f in sorted((src / c).rglob("*"))]
    else:
        items = [(f, None) for f in sorted(src.rglob("*"))]
    items = [(f, c) for f, c in items if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES]
    if not items:
        raise EmptyDatasetError(f"{src}: no images found")
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise DataError(f"channels must be 1 or 3, got {channels}")
    pixels = np.empty((len(items), channels, image_size, image_size), dtype=np.uint8)
    for i, (f, _) in enumerate(items):
        try:
            with Image.open(f) as im:
                im = im.convert(mode)
                w, h = im.size
                s = min(w, h)
                im = im.crop(((w - s) // 2, (h - s) // 2, (w - s) // 2 + s, (h - s) // 2 + s))
                im = im.resize((image_size, image_size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.uint8)
        except OSError as exc:
            raise DataError(f"{f}: cannot decode image ({exc})") from exc
        pixels[i] = arr[None] if channels == 1 else arr.transpose(2, 0, 1)
    labels = [c for _, c in items] if classes else None
    return load_dataset(write_dataset(out, pixels, labels))
