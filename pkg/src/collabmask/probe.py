"""Linear probing on frozen, mean-pooled encoder features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ImageDataset, make_batch
from .errors import DataError
from .optim import AdamW
from .tensor import Tensor
from .vit import Params, ViTConfig, encode, patchify


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_train: int
    n_test: int


def encoder_features(params: Params, cfg: ViTConfig, ds: ImageDataset, batch_size: int = 128) -> np.ndarray:
    """Mean-pooled final patch tokens for every image, [count, D]."""
    feats = []
    with T.no_grad():
        for start in range(0, ds.count, batch_size):
            idx = np.arange(start, min(start + batch_size, ds.count))
            x = patchify(make_batch(ds, idx), cfg.patch_size)
            feats.append(encode(params, x, cfg).tokens.data.mean(axis=1))
    return np.concatenate(feats)


def split_indices(count: int, holdout: float, seed: int):
    order = np.random.default_rng([seed, 0x9B0]).permutation(count)
    n_test = max(1, int(round(holdout * count)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def whitening(train_x: np.ndarray, ridge: float = 1e-3):
    """(mean, projection) mapping features to decorrelated, unit-variance coordinates.

    Encoder features are strongly correlated; whitening makes the softmax
    regression well conditioned so a fixed epoch budget converges.
    """
    mean = train_x.mean(axis=0)
    _, s, vt = np.linalg.svd(train_x - mean, full_matrices=False)
    keep = s > 1e-8 * max(s[0], 1e-300)
    proj = vt[keep].T / np.sqrt(s[keep] ** 2 / len(train_x) + ridge)
    return mean, proj


def fit_linear(
    train_x: np.ndarray,
    train_y: np.ndarray,
    num_classes: int,
    epochs: int = 200,
    lr: float = 0.05,
    seed: int = 0,
):
    """Full-batch softmax regression on whitened features; returns (weight, bias, mean, proj)."""
    mean, proj = whitening(train_x)
    x = Tensor((train_x - mean) @ proj)
    rng = np.random.default_rng([seed, 0x11])
    w = Tensor(rng.normal(0.0, 0.01, size=(proj.shape[1], num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    opt = AdamW({"w": w, "b": b}, betas=(0.9, 0.999), weight_decay=0.0)
    for _ in range(epochs):
        opt.zero_grad()
        T.backward(T.cross_entropy(T.linear(x, w, b), train_y))
        opt.step(lr)
    return w.data.copy(), b.data.copy(), mean, proj


def predict(model, x: np.ndarray) -> np.ndarray:
    w, b, mean, proj = model
    return np.argmax(((x - mean) @ proj) @ w + b, axis=1)


def probe(
    params: Params,
    cfg: ViTConfig,
    ds: ImageDataset,
    epochs: int = 200,
    lr: float = 0.05,
    holdout: float = 0.2,
    seed: int = 0,
) -> ProbeResult:
    """Top-1 accuracy of a linear classifier on frozen features, held-out split."""
    if ds.labels is None:
        raise DataError("linear probing needs a labelled dataset (missing .cmtl file)")
    feats = encoder_features(params, cfg, ds)
    labels = np.asarray(ds.labels)
    tr, te = split_indices(ds.count, holdout, seed)
    k = int(labels.max()) + 1
    model = fit_linear(feats[tr], labels[tr], k, epochs, lr, seed)
    acc = float(np.mean(predict(model, feats[te]) == labels[te]))
    tr_acc = float(np.mean(predict(model, feats[tr]) == labels[tr]))
    return ProbeResult(acc, tr_acc, len(tr), len(te))
