"""Two-stage pre-training driver.

Stage 1 masks by the frozen teacher's attention and regresses teacher
features. Stage 2 blends teacher attention with the momentum student's
attention, masks by the blend, and regresses both feature sets with the same
mixing ratio. A ``pixel`` mode runs plain random-mask pixel reconstruction;
it is how a desk-scale pseudo-teacher is bootstrapped.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import (
    Checkpoint,
    ImageDataset,
    check_names,
    config_hash,
    epoch_order,
    load_checkpoint,
    make_batch,
    sample_flips,
    save_checkpoint,
)
from .errors import CompatibilityError, ConfigError, ContractError, NonFiniteError
from .masking import POLARITIES, SELECTION_MODES, aggregate_attention, batch_masks
from .momentum import MomentumState, ema_update, momentum_forward
from .objectives import (
    collaborative_terms,
    combine,
    mae_pixel_loss,
    masked_rows,
    pixel_targets,
    teacher_feature_loss,
)
from .optim import AdamW, lr_schedule
from .tensor import Tensor
from .vit import (
    ATTENTION_REDUCTIONS,
    Params,
    ViTConfig,
    decode,
    encode,
    extract_attention,
    init_decoder,
    init_encoder,
    init_head,
    normalized_features,
    patchify,
)

log = logging.getLogger(__name__)

MODES = ("cmt", "pixel")


@dataclass(frozen=True)
class TrainConfig:
    mask_ratio: float = 0.75
    alpha: float = 0.3
    ema_m: float = 0.999
    lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.95)
    warmup_steps: int = 20
    total_epochs: int = 8
    stage1_fraction: float = 0.5
    batch_size: int = 16
    seed: int = 0
    mask_polarity: str = "most"
    selection_mode: str = "topk"
    attention_reduction: str = "cls_mean"
    mode: str = "cmt"
    augment: bool = True
    grad_clip: float = 0.0
    reinit_student_head: bool = True
    literal_ema: bool = False

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.ema_m <= 1.0:
            raise ConfigError(f"ema_m must lie in [0, 1], got {self.ema_m}")
        if not 0.0 < self.stage1_fraction < 1.0:
            raise ConfigError(f"stage1_fraction must lie in (0, 1), got {self.stage1_fraction}")
        if self.batch_size < 1 or self.total_epochs < 1 or self.warmup_steps < 0:
            raise ConfigError("batch_size and total_epochs must be positive, warmup_steps >= 0")
        if self.mask_polarity not in POLARITIES:
            raise ConfigError(f"mask_polarity must be one of {POLARITIES}")
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.attention_reduction not in ATTENTION_REDUCTIONS:
            raise ConfigError(f"attention_reduction must be one of {ATTENTION_REDUCTIONS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class StepMetrics:
    step: int
    stage: int
    loss_total: float
    loss_student_term: float
    loss_teacher_term: float
    lr: float
    wallclock: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def deterministic(self) -> tuple:
        """All fields except wallclock."""
        return (self.step, self.stage, self.loss_total, self.loss_student_term,
                self.loss_teacher_term, self.lr)


@dataclass
class Batch:
    indices: np.ndarray
    flips: np.ndarray
    patches: np.ndarray  # [B, N, C*P*P]


# -- frozen teacher --------------------------------------------------------------
class FrozenTeacher:
    """Frozen encoder supplying attention maps and normalised feature targets.

    Outputs depend only on (image, flip). They are computed in fixed chunks of
    the dataset and memoised, so a value never depends on which batch asked
    for it first (resumed runs see bit-identical targets).
    """

    def __init__(self, params: Params, cfg: ViTConfig, reduction: str = "cls_mean", chunk: int = 64):
        self.params = {k: Tensor(v.data) for k, v in params.items()}
        self.cfg = cfg
        self.reduction = reduction
        self.chunk = chunk
        self._cache: Dict[tuple, Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def dim(self) -> int:
        return self.cfg.embed_dim

    def forward_patches(self, patches: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        with T.no_grad():
            enc = encode(self.params, patches, self.cfg)
            return extract_attention(enc, self.reduction), normalized_features(enc).data

    def _chunk(self, ds: ImageDataset, c: int, flip: bool):
        key = (id(ds), c, flip)
        if key not in self._cache:
            idx = np.arange(c * self.chunk, min((c + 1) * self.chunk, ds.count))
            x = make_batch(ds, idx, flips=np.full(len(idx), flip))
            self._cache[key] = self.forward_patches(patchify(x, self.cfg.patch_size))
        return self._cache[key]

    def __call__(self, ds: ImageDataset, batch: Batch) -> Tuple[np.ndarray, Tensor]:
        att, feat = [], []
        for i, f in zip(batch.indices, batch.flips):
            a, z = self._chunk(ds, int(i) // self.chunk, bool(f))
            att.append(a[int(i) % self.chunk])
            feat.append(z[int(i) % self.chunk])
        return np.stack(att), Tensor(np.stack(feat))


def teacher_from_checkpoint(path, reduction: str = "cls_mean") -> FrozenTeacher:
    """Any checkpoint with an encoder under ``student/`` can serve as teacher."""
    ckpt = load_checkpoint(path)
    if "vit" not in ckpt.meta or not ckpt.has_namespace("student"):
        raise CompatibilityError(f"{path}: checkpoint holds no encoder to use as teacher")
    cfg = ViTConfig.from_dict(ckpt.meta["vit"])
    expected = {k: v.shape for k, v in init_encoder(cfg, np.random.default_rng(0)).items()}
    check_names(ckpt, "student", expected)
    params = {k: Tensor(v) for k, v in ckpt.namespace("student").items()}
    return FrozenTeacher(params, cfg, reduction)


# -- single steps -------------------------------------------------------------------
def _finish_step(loss: Tensor, opt: AdamW, lr: float, grad_clip: float, where: str) -> None:
    if not np.isfinite(loss.data).all():
        norms = {k: float(np.linalg.norm(p.data)) for k, p in opt.params.items()}
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:3]
        raise NonFiniteError(f"non-finite loss in {where} (lr={lr:.3g}); largest param norms: {worst}")
    opt.zero_grad()
    T.backward(loss)
    if grad_clip > 0:
        total = np.sqrt(sum(float((p.grad * p.grad).sum()) for p in opt.params.values() if p.grad is not None))
        if total > grad_clip:
            scale = grad_clip / (total + 1e-6)
            for p in opt.params.values():
                if p.grad is not None:
                    p.grad *= scale
    opt.step(lr)


def stage1_step(
    batch: Batch,
    ds: ImageDataset,
    teacher: FrozenTeacher,
    student: Params,
    decoder: Params,
    opt: AdamW,
    cfg: TrainConfig,
    vit: ViTConfig,
    lr: float,
    rng: np.random.Generator,
    step: int = 0,
) -> StepMetrics:
    """Teacher-guided masking, teacher-feature reconstruction, one optimizer step."""
    att_t, feat_t = teacher(ds, batch)
    visible, masked = batch_masks(att_t, cfg.mask_ratio, cfg.selection_mode, rng, cfg.mask_polarity)
    enc = encode(student, batch.patches, vit, visible)
    dec = decode(decoder, enc, masked, vit, heads=("teacher",))
    loss = teacher_feature_loss(masked_rows(dec.pred_teacher, masked), masked_rows(feat_t, masked))
    _finish_step(loss, opt, lr, cfg.grad_clip, f"stage-1 step {step}")
    value = loss.item()
    return StepMetrics(step, 1, value, 0.0, value, lr)


def stage2_step(
    batch: Batch,
    ds: ImageDataset,
    teacher: FrozenTeacher,
    student: Params,
    momentum: MomentumState,
    decoder: Params,
    opt: AdamW,
    cfg: TrainConfig,
    vit: ViTConfig,
    lr: float,
    rng: np.random.Generator,
    step: int = 0,
) -> StepMetrics:
    """Collaborative masking and targets, one optimizer step, then the EMA update."""
    att_t, feat_t = teacher(ds, batch)
    att_s, feat_s = momentum_forward(batch.patches, momentum, vit, cfg.attention_reduction)
    att_c = aggregate_attention(att_s, att_t, cfg.alpha)
    visible, masked = batch_masks(att_c, cfg.mask_ratio, cfg.selection_mode, rng, cfg.mask_polarity)
    enc = encode(student, batch.patches, vit, visible)
    dec = decode(decoder, enc, masked, vit, heads=("teacher", "student"))
    s_term, t_term = collaborative_terms(
        masked_rows(dec.pred_student, masked),
        masked_rows(dec.pred_teacher, masked),
        masked_rows(feat_s, masked),
        masked_rows(feat_t, masked),
    )
    loss = combine(s_term, t_term, cfg.alpha)
    _finish_step(loss, opt, lr, cfg.grad_clip, f"stage-2 step {step}")
    ema_update(momentum, student)
    return StepMetrics(step, 2, loss.item(), s_term.item(), t_term.item(), lr)


def pixel_step(
    batch: Batch,
    student: Params,
    decoder: Params,
    opt: AdamW,
    cfg: TrainConfig,
    vit: ViTConfig,
    lr: float,
    rng: np.random.Generator,
    step: int = 0,
) -> StepMetrics:
    """Random masking with normalised-pixel reconstruction."""
    b, n, _ = batch.patches.shape
    visible, masked = batch_masks(np.ones((b, n)), cfg.mask_ratio, "random", rng)
    enc = encode(student, batch.patches, vit, visible)
    dec = decode(decoder, enc, masked, vit, heads=("pixel",))
    target = pixel_targets(np.take_along_axis(batch.patches, masked[..., None], axis=1))
    loss = mae_pixel_loss(masked_rows(dec.pred_pixel, masked), target)
    _finish_step(loss, opt, lr, cfg.grad_clip, f"pixel step {step}")
    value = loss.item()
    return StepMetrics(step, 0, value, 0.0, value, lr)


# -- driver ---------------------------------------------------------------------------
def _ns(prefix: str, params: Params) -> Params:
    return {f"{prefix}/{k}": v for k, v in params.items()}


class Trainer:
    """Owns all mutable training state; ``run`` advances it step by step."""

    def __init__(
        self,
        cfg: TrainConfig,
        vit: ViTConfig,
        dataset: ImageDataset,
        teacher: Optional[FrozenTeacher] = None,
        metrics_path=None,
    ):
        if dataset.shape != (vit.in_chans, vit.image_size, vit.image_size):
            raise ConfigError(f"dataset images {dataset.shape} do not match model config")
        if cfg.mode == "cmt":
            if teacher is None:
                raise ConfigError("cmt mode needs a teacher checkpoint")
            if teacher.cfg.num_patches != vit.num_patches or teacher.cfg.patch_size != vit.patch_size:
                raise ConfigError("teacher and student must share the patch grid")
            teacher.reduction = cfg.attention_reduction
        self.cfg, self.vit, self.ds, self.teacher = cfg, vit, dataset, teacher
        self.steps_per_epoch = dataset.count // cfg.batch_size
        if self.steps_per_epoch < 1:
            raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {dataset.count}")
        self.total_steps = cfg.total_epochs * self.steps_per_epoch
        if cfg.mode == "cmt":
            boundary = int(round(cfg.stage1_fraction * cfg.total_epochs))
            boundary = min(max(boundary, 1), cfg.total_epochs - 1) if cfg.total_epochs > 1 else 1
            self.stage1_steps = boundary * self.steps_per_epoch if cfg.total_epochs > 1 else self.total_steps // 2
        else:
            self.stage1_steps = self.total_steps

        init_rng = np.random.default_rng([cfg.seed, 1])
        self.student = init_encoder(vit, init_rng)
        heads = {"teacher": teacher.dim} if cfg.mode == "cmt" else {"pixel": vit.patch_dim}
        self.decoder = init_decoder(vit, init_rng, heads)
        self.opt = AdamW(
            {**_ns("student", self.student), **_ns("decoder", self.decoder)},
            betas=cfg.betas,
            weight_decay=cfg.weight_decay,
        )
        self.momentum: Optional[MomentumState] = None
        self.rng = np.random.default_rng([cfg.seed, 3])
        self.step = 0
        self.history: List[StepMetrics] = []
        self.metrics_path = Path(metrics_path) if metrics_path else None

    # -- bookkeeping ------------------------------------------------------------
    @property
    def config_hash(self) -> str:
        return config_hash({"train": self.cfg.to_dict(), "vit": self.vit.to_dict(),
                            "dataset_count": self.ds.count})

    def stage_of(self, step: int) -> int:
        if self.cfg.mode == "pixel":
            return 0
        return 1 if step < self.stage1_steps else 2

    def lr_at(self, step: int) -> float:
        """Warmup + cosine restarted at each stage boundary."""
        if self.stage_of(step) == 2:
            start, length = self.stage1_steps, self.total_steps - self.stage1_steps
        else:
            start, length = 0, self.stage1_steps
        warm = min(self.cfg.warmup_steps, max(length - 1, 0))
        return lr_schedule(step - start, warm, length, self.cfg.lr)

    def trainable_names(self) -> List[str]:
        return list(self.opt.names())

    def _enter_stage2(self) -> None:
        self.momentum = MomentumState.from_online(self.student, self.cfg.ema_m, self.cfg.literal_ema)
        if "head_student.weight" not in self.decoder:
            head_rng = np.random.default_rng([self.cfg.seed, 2])
            head = init_head(head_rng, self.vit.decoder_dim, self.vit.embed_dim, "student")
            self.decoder.update(head)
            self.opt.add(_ns("decoder", head))

    def next_batch(self) -> Batch:
        epoch, pos = divmod(self.step, self.steps_per_epoch)
        b = self.cfg.batch_size
        idx = epoch_order(self.cfg.seed, epoch, self.ds.count)[pos * b:(pos + 1) * b]
        flips = sample_flips(self.rng, b) if self.cfg.augment else np.zeros(b, dtype=bool)
        images = make_batch(self.ds, idx, flips=flips)
        return Batch(idx, flips, patchify(images, self.vit.patch_size))

    def train_step(self) -> StepMetrics:
        if self.step >= self.total_steps:
            raise ContractError("training already finished")
        stage = self.stage_of(self.step)
        if stage == 2 and self.momentum is None:
            self._enter_stage2()
        batch = self.next_batch()
        lr = self.lr_at(self.step)
        t0 = time.perf_counter()
        if stage == 0:
            m = pixel_step(batch, self.student, self.decoder, self.opt, self.cfg, self.vit, lr, self.rng, self.step)
        elif stage == 1:
            m = stage1_step(batch, self.ds, self.teacher, self.student, self.decoder, self.opt,
                            self.cfg, self.vit, lr, self.rng, self.step)
        else:
            m = stage2_step(batch, self.ds, self.teacher, self.student, self.momentum, self.decoder,
                            self.opt, self.cfg, self.vit, lr, self.rng, self.step)
        m.wallclock = time.perf_counter() - t0
        self.history.append(m)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as f:
                f.write(m.to_json() + "\n")
                f.flush()
        self.step += 1
        return m

    def run(self, until: Optional[int] = None, log_every: int = 50) -> List[StepMetrics]:
        until = self.total_steps if until is None else min(until, self.total_steps)
        out = []
        while self.step < until:
            m = self.train_step()
            out.append(m)
            if log_every and m.step % log_every == 0:
                log.info("step %d stage %d loss %.4f lr %.3g", m.step, m.stage, m.loss_total, m.lr)
        return out

    # -- persistence --------------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for k, v in self.student.items():
            tensors[f"student/{k}"] = v.data
        for k, v in self.decoder.items():
            tensors[f"decoder/{k}"] = v.data
        if self.teacher is not None:
            for k, v in self.teacher.params.items():
                tensors[f"teacher/{k}"] = v.data
        if self.momentum is not None:
            for k, v in self.momentum.shadow.items():
                tensors[f"momentum/{k}"] = v.data
        for k in self.opt.names():
            tensors[f"opt.m/{k}"] = self.opt.exp_avg[k]
            tensors[f"opt.v/{k}"] = self.opt.exp_avg_sq[k]
        meta = {
            "kind": self.cfg.mode,
            "step": self.step,
            "opt_step": self.opt.step_count,
            "train": self.cfg.to_dict(),
            "vit": self.vit.to_dict(),
            "teacher_vit": self.teacher.cfg.to_dict() if self.teacher is not None else None,
            "config_hash": self.config_hash,
            "rng_state": self.rng.bit_generator.state,
            "momentum_updates": self.momentum.updates if self.momentum is not None else 0,
        }
        return Checkpoint(tensors=tensors, meta=meta)

    def save(self, path) -> Path:
        return save_checkpoint(path, self.to_checkpoint())

    @classmethod
    def resume(cls, path, cfg: TrainConfig, vit: ViTConfig, dataset: ImageDataset, metrics_path=None) -> "Trainer":
        """Rebuild a trainer from a checkpoint; the config hash must match."""
        ckpt = load_checkpoint(path)
        teacher = None
        if ckpt.has_namespace("teacher"):
            tcfg = ViTConfig.from_dict(ckpt.meta["teacher_vit"])
            teacher = FrozenTeacher({k: Tensor(v) for k, v in ckpt.namespace("teacher").items()},
                                    tcfg, cfg.attention_reduction)
        tr = cls(cfg, vit, dataset, teacher, metrics_path)
        if ckpt.meta.get("config_hash") != tr.config_hash:
            raise CompatibilityError(
                f"config hash mismatch: checkpoint {ckpt.meta.get('config_hash')} vs run {tr.config_hash}"
            )
        tr.step = int(ckpt.meta["step"])
        if ckpt.has_namespace("momentum"):
            tr._enter_stage2()
        check_names(ckpt, "student", {k: v.shape for k, v in tr.student.items()})
        check_names(ckpt, "decoder", {k: v.shape for k, v in tr.decoder.items()})
        for k, v in ckpt.namespace("student").items():
            tr.student[k].data[...] = v
        for k, v in ckpt.namespace("decoder").items():
            tr.decoder[k].data[...] = v
        if tr.momentum is not None:
            check_names(ckpt, "momentum", {k: v.shape for k, v in tr.student.items()})
            for k, v in ckpt.namespace("momentum").items():
                tr.momentum.shadow[k].data[...] = v
            tr.momentum.updates = int(ckpt.meta.get("momentum_updates", 0))
        m, v = ckpt.namespace("opt.m"), ckpt.namespace("opt.v")
        for k in tr.opt.names():
            if k not in m or k not in v:
                raise CompatibilityError(f"checkpoint is missing optimizer state for {k}")
            tr.opt.exp_avg[k][...] = m[k]
            tr.opt.exp_avg_sq[k][...] = v[k]
        tr.opt.step_count = int(ckpt.meta["opt_step"])
        tr.rng.bit_generator.state = ckpt.meta["rng_state"]
        return tr


def load_encoder(path, namespace: str = "student") -> Tuple[Params, ViTConfig, Checkpoint]:
    """Encoder params (frozen tensors) and config from a checkpoint."""
    ckpt = load_checkpoint(path)
    if "vit" not in ckpt.meta:
        raise CompatibilityError(f"{path}: checkpoint carries no model config")
    cfg = ViTConfig.from_dict(ckpt.meta["vit"] if namespace != "teacher" else ckpt.meta["teacher_vit"])
    expected = {k: v.shape for k, v in init_encoder(cfg, np.random.default_rng(0)).items()}
    check_names(ckpt, namespace, expected)
    return {k: Tensor(v) for k, v in ckpt.namespace(namespace).items()}, cfg, ckpt
