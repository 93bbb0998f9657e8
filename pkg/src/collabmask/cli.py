"""Command-line entry point.

Subcommands: make-dataset, pretrain, probe, visualize, inspect.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .data import (
    load_checkpoint,
    load_dataset,
    pack_image_dir,
    params_digest,
    write_dataset,
)
from .errors import CollabMaskError, ConfigError
from .probe import probe
from .synthetic import GENERATORS
from .trainer import TrainConfig, Trainer, load_encoder, teacher_from_checkpoint
from .vit import ViTConfig, count_parameters, init_encoder
from .visualize import visualize

log = logging.getLogger("collabmask")

TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
VIT_FIELDS = {f.name: f for f in fields(ViTConfig)}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def read_config_file(path) -> Dict[str, object]:
    """Flat ``key = value`` file; '#' starts a comment. Keys are TrainConfig or ViTConfig fields."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    train_defaults, vit_defaults = TrainConfig(), ViTConfig()
    out: Dict[str, object] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in TRAIN_FIELDS:
            out[key] = _parse_value(key, value, getattr(train_defaults, key))
        elif key in VIT_FIELDS:
            out[key] = _parse_value(key, value, getattr(vit_defaults, key))
        else:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
    return out


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    train_defaults, vit_defaults = TrainConfig(), ViTConfig()
    g = p.add_argument_group("training (overrides the config file)")
    for name in TRAIN_FIELDS:
        default = getattr(train_defaults, name)
        if isinstance(default, bool):
            g.add_argument(_flag(name), dest=name, action=argparse.BooleanOptionalAction, default=None,
                           help=f"default {default}")
        elif isinstance(default, tuple):
            g.add_argument(_flag(name), dest=name, type=float, nargs=len(default), default=None,
                           help=f"default {' '.join(map(str, default))}")
        else:
            g.add_argument(_flag(name), dest=name, type=type(default), default=None, help=f"default {default}")
    g = p.add_argument_group("model (overrides the config file)")
    for name in VIT_FIELDS:
        default = getattr(vit_defaults, name)
        g.add_argument(_flag(name), dest=name, type=type(default), default=None,
                       help=f"default {default}; image size and channels default to the dataset's")


def build_configs(args: argparse.Namespace, dataset_shape=None):
    values = read_config_file(args.config) if args.config else {}
    for name in list(TRAIN_FIELDS) + list(VIT_FIELDS):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = tuple(v) if isinstance(v, list) else v
    train = {k: v for k, v in values.items() if k in TRAIN_FIELDS}
    vit = {k: v for k, v in values.items() if k in VIT_FIELDS}
    if dataset_shape is not None:
        c, h, _ = dataset_shape
        vit.setdefault("in_chans", c)
        vit.setdefault("image_size", h)
    return TrainConfig(**train), ViTConfig(**vit)


# -- subcommands ----------------------------------------------------------------------
def cmd_make_dataset(args) -> int:
    if args.source == "synthetic":
        if args.count < 1:
            raise ConfigError("--count must be positive")
        if args.channels != 3:
            raise ConfigError("synthetic datasets are RGB; --channels must be 3")
        px, labels = GENERATORS[args.kind](args.count, args.image_size, args.seed)
        write_dataset(args.out, px, labels)
        print(f"wrote {args.count} synthetic {args.kind} images to {args.out}")
    else:
        if not args.src:
            raise ConfigError("--src is required for 'images'")
        ds = pack_image_dir(args.src, args.out, args.image_size, args.channels)
        print(f"packed {ds.count} images to {args.out}" + (" with labels" if ds.labels is not None else ""))
    return 0


def cmd_pretrain(args) -> int:
    patch = args.patch_size or (read_config_file(args.config).get("patch_size") if args.config else None)
    # an image size the patch does not divide is a data error, reported before the model config is built
    ds = load_dataset(args.data, patch or ViTConfig().patch_size)
    cfg, vit = build_configs(args, ds.shape)
    if args.resume:
        trainer = Trainer.resume(args.resume, cfg, vit, ds, args.metrics)
    else:
        teacher = None
        if cfg.mode == "cmt":
            if not args.teacher:
                raise ConfigError("cmt pre-training needs --teacher (bootstrap one with --mode pixel)")
            teacher = teacher_from_checkpoint(args.teacher, cfg.attention_reduction)
        if args.metrics:
            Path(args.metrics).write_text("")
        trainer = Trainer(cfg, vit, ds, teacher, args.metrics)
    until = trainer.total_steps if args.steps is None else min(trainer.step + args.steps, trainer.total_steps)
    log.info("training steps %d..%d of %d (stage-1 steps: %d)", trainer.step, until, trainer.total_steps,
             trainer.stage1_steps)
    while trainer.step < until:
        trainer.run(until=min(until, trainer.step + args.save_every) if args.save_every else until,
                    log_every=args.log_every)
        trainer.save(args.out)
    trainer.save(args.out)
    last = trainer.history[-1] if trainer.history else None
    print(json.dumps({"checkpoint": str(args.out), "step": trainer.step,
                      "loss": last.loss_total if last else None}, sort_keys=True))
    return 0


def cmd_probe(args) -> int:
    ds = load_dataset(args.data)
    if args.checkpoint:
        params, cfg, _ = load_encoder(args.checkpoint, args.namespace)
    else:
        cfg = ViTConfig(image_size=ds.shape[1], in_chans=ds.shape[0])
        params = init_encoder(cfg, np.random.default_rng([args.seed, 1]))
    before = params_digest((k, p.data) for k, p in params.items())
    result = probe(params, cfg, ds, epochs=args.epochs, lr=args.lr, holdout=args.holdout, seed=args.seed)
    if params_digest((k, p.data) for k, p in params.items()) != before:
        raise CollabMaskError("encoder parameters changed during probing")
    print(json.dumps({"accuracy": result.accuracy, "train_accuracy": result.train_accuracy,
                      "n_train": result.n_train, "n_test": result.n_test, "encoder_digest": before},
                     sort_keys=True))
    return 0


def cmd_visualize(args) -> int:
    ds = load_dataset(args.data)
    if not 0 <= args.index < ds.count:
        raise ConfigError(f"--index {args.index} outside dataset of {ds.count} images")
    if not 0.0 <= args.alpha <= 1.0:
        raise ConfigError(f"--alpha must lie in [0, 1], got {args.alpha}")
    paths = visualize(args.checkpoint, ds, args.index, args.alpha, args.out_dir, args.mask_ratio, args.mask_polarity)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def inspect_report(path) -> List[str]:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    lines = [f"checkpoint: {path}"]
    for key in ("kind", "step", "config_hash"):
        lines.append(f"{key}: {meta.get(key)}")
    if "vit" in meta:
        cfg = ViTConfig.from_dict(meta["vit"])
        lines.append("model: " + json.dumps(cfg.to_dict(), sort_keys=True))
    if ckpt.has_namespace("student"):
        enc = {k: v for k, v in ckpt.namespace("student").items()}
        lines.append(f"encoder parameters: {sum(int(v.size) for v in enc.values())}")
    total = 0
    lines.append("tensors:")
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name]
        total += int(t.size)
        lines.append(f"  {name} {list(t.shape)}")
    lines.append(f"total values: {total}")
    return lines


def cmd_inspect(args) -> int:
    print("\n".join(inspect_report(args.checkpoint)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabmask", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write a packed dataset (synthetic shapes or an image folder)")
    p.add_argument("source", choices=("synthetic", "images"))
    p.add_argument("--out", required=True)
    p.add_argument("--src", help="image folder; subfolders become classes")
    p.add_argument("--kind", choices=sorted(GENERATORS), default="gratings", help="synthetic generator")
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("pretrain", help="two-stage pre-training, or pixel bootstrap with --mode pixel")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (rewritten atomically)")
    p.add_argument("--teacher", help="checkpoint whose encoder is the frozen teacher")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--metrics", help="append per-step JSON lines here")
    p.add_argument("--steps", type=int, help="stop after this many more steps")
    p.add_argument("--save-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen mean-pooled encoder features")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="omit to probe a random-init encoder")
    p.add_argument("--namespace", default="student", choices=("student", "momentum", "teacher"))
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("visualize", help="attention and mask overlays for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--mask-polarity", default="most", choices=("most", "least"))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("inspect", help="list a checkpoint's tensors and metadata")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CollabMaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
