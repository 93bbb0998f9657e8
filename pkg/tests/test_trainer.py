import copy
import json

import numpy as np
import pytest

from collabmask.data import load_checkpoint, load_dataset, write_dataset
from collabmask.errors import CompatibilityError, ConfigError, NonFiniteError
from collabmask.momentum import MomentumState
from collabmask.optim import AdamW
from collabmask.tensor import Tensor
from collabmask.trainer import (
    FrozenTeacher,
    StepMetrics,
    TrainConfig,
    Trainer,
    stage1_step,
    stage2_step,
    teacher_from_checkpoint,
)
from collabmask.vit import ViTConfig, init_encoder, init_head

VIT = ViTConfig(image_size=8, patch_size=2, in_chans=3, embed_dim=16, depth=2, heads=2,
                decoder_dim=8, decoder_depth=1, decoder_heads=2, mlp_ratio=2.0)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    px = np.random.default_rng(0).integers(0, 256, size=(32, 3, 8, 8), dtype=np.uint8)
    return load_dataset(write_dataset(tmp_path_factory.mktemp("d") / "tiny.cmtd", px, np.arange(32) % 2))


def make_teacher(seed=11):
    return FrozenTeacher(init_encoder(VIT, np.random.default_rng(seed)), VIT)


def config(**kw):
    base = dict(batch_size=4, total_epochs=4, warmup_steps=2, lr=1e-3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def run(dataset, cfg, until=None, metrics_path=None):
    tr = Trainer(cfg, VIT, dataset, make_teacher(), metrics_path)
    tr.run(until, log_every=0)
    return tr


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(mask_ratio=1.0), dict(alpha=1.5), dict(stage1_fraction=0.0),
                                    dict(mask_polarity="middle"), dict(selection_mode="grid"), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_default_hyperparameters(self):
        cfg = TrainConfig()
        assert (cfg.mask_ratio, cfg.alpha, cfg.lr, cfg.weight_decay, cfg.betas) == (0.75, 0.3, 1.5e-4, 0.05, (0.9, 0.95))
        assert cfg.ema_m == 0.999 and cfg.stage1_fraction == 0.5

    def test_dict_round_trip(self):
        cfg = config(alpha=0.1, betas=(0.8, 0.9))
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_cmt_needs_teacher(self, dataset):
        with pytest.raises(ConfigError):
            Trainer(config(), VIT, dataset)


class TestSchedule:
    def test_stage_split_and_restart(self, dataset):
        tr = Trainer(config(), VIT, dataset, make_teacher())
        assert tr.steps_per_epoch == 8 and tr.stage1_steps == 16 and tr.total_steps == 32
        assert tr.stage_of(15) == 1 and tr.stage_of(16) == 2
        assert tr.lr_at(0) == 0.0 and tr.lr_at(16) == 0.0
        assert tr.lr_at(2) == tr.lr_at(18) == 1e-3


class TestDeterminism:
    def test_dual_runs_bit_identical(self, dataset, tmp_path):
        a = run(dataset, config())
        b = run(dataset, config())
        assert [m.deterministic() for m in a.history] == [m.deterministic() for m in b.history]
        a.save(tmp_path / "a.ckpt")
        b.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_seed_changes_stream(self, dataset):
        a = run(dataset, config(), until=4)
        b = run(dataset, config(seed=6), until=4)
        assert [m.loss_total for m in a.history] != [m.loss_total for m in b.history]

    @pytest.mark.parametrize("stop", [5, 16, 21])
    def test_resume_reproduces_stream(self, dataset, tmp_path, stop):
        cfg = config(selection_mode="stochastic")
        full = run(dataset, cfg)
        part = run(dataset, cfg, until=stop)
        part.save(tmp_path / "mid.ckpt")
        resumed = Trainer.resume(tmp_path / "mid.ckpt", cfg, VIT, dataset)
        resumed.run(log_every=0)
        stream = [m.deterministic() for m in part.history + resumed.history]
        assert stream == [m.deterministic() for m in full.history]
        full.save(tmp_path / "full.ckpt")
        resumed.save(tmp_path / "resumed.ckpt")
        assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()

    def test_resume_rejects_other_config(self, dataset, tmp_path):
        run(dataset, config(), until=3).save(tmp_path / "c.ckpt")
        with pytest.raises(CompatibilityError, match="config hash"):
            Trainer.resume(tmp_path / "c.ckpt", config(alpha=0.5), VIT, dataset)


class TestContracts:
    def test_teacher_frozen(self, dataset):
        tr = Trainer(config(), VIT, dataset, make_teacher())
        before = {k: v.data.copy() for k, v in tr.teacher.params.items()}
        tr.run(log_every=0)
        for k, v in tr.teacher.params.items():
            assert v.grad is None or not np.any(v.grad)
            assert np.array_equal(v.data, before[k])

    def test_parameter_registry(self, dataset):
        tr = run(dataset, config(), until=20)
        names = set(tr.trainable_names())
        expected = {f"student/{k}" for k in tr.student} | {f"decoder/{k}" for k in tr.decoder}
        assert names == expected
        assert "decoder/head_student.weight" in names
        teacher_ids = {id(p) for p in tr.teacher.params.values()}
        shadow_ids = {id(p) for p in tr.momentum.shadow.values()}
        assert not teacher_ids & {id(p) for p in tr.opt.params.values()}
        assert not shadow_ids & {id(p) for p in tr.opt.params.values()}

    def test_shadow_never_has_gradients(self, dataset):
        tr = run(dataset, config(), until=24)
        assert all(p.grad is None for p in tr.momentum.shadow.values())
        assert tr.momentum.updates == 8

    def test_stage2_decomposition_identity(self, dataset):
        tr = run(dataset, config())
        stage2 = [m for m in tr.history if m.stage == 2]
        assert stage2
        for m in stage2:
            assert abs(m.loss_total - (0.3 * m.loss_student_term + 0.7 * m.loss_teacher_term)) < 1e-9

    def test_metrics_file(self, dataset, tmp_path):
        path = tmp_path / "m.jsonl"
        tr = run(dataset, config(), until=6, metrics_path=path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(rows) == 6
        assert set(rows[0]) == {"step", "stage", "loss_total", "loss_student_term", "loss_teacher_term", "lr", "wallclock"}
        assert rows[-1]["loss_total"] == tr.history[-1].loss_total

    def test_non_finite_loss_aborts(self, dataset):
        tr = Trainer(config(), VIT, dataset, make_teacher())
        tr.decoder["head_teacher.bias"].data[0] = np.nan
        with pytest.raises(NonFiniteError, match="stage-1 step 0"):
            tr.train_step()

    def test_pixel_mode_bootstraps_a_teacher(self, dataset, tmp_path):
        tr = Trainer(config(mode="pixel", total_epochs=1), VIT, dataset)
        hist = tr.run(log_every=0)
        assert all(m.stage == 0 for m in hist)
        tr.save(tmp_path / "t.ckpt")
        teacher = teacher_from_checkpoint(tmp_path / "t.ckpt")
        cmt = Trainer(config(), VIT, dataset, teacher)
        cmt.run(until=2, log_every=0)
        assert load_checkpoint(tmp_path / "t.ckpt").meta["kind"] == "pixel"


class TestStageTwoReduction:
    """alpha=0 and m=1: a stage-2 step is a stage-1 step, bit for bit."""

    def test_identical_batches_identical_dynamics(self, dataset):
        cfg = config(alpha=0.0, ema_m=1.0)
        base = run(dataset, cfg, until=3)
        teacher = base.teacher

        def clone():
            student = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in base.student.items()}
            decoder = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in base.decoder.items()}
            opt = AdamW({**{f"student/{k}": v for k, v in student.items()},
                         **{f"decoder/{k}": v for k, v in decoder.items()}}, betas=cfg.betas,
                        weight_decay=cfg.weight_decay)
            for k in opt.names():
                opt.exp_avg[k][...] = base.opt.exp_avg[k]
                opt.exp_avg_sq[k][...] = base.opt.exp_avg_sq[k]
            opt.step_count = base.opt.step_count
            return student, decoder, opt

        s1, d1, o1 = clone()
        s2, d2, o2 = clone()
        head = init_head(np.random.default_rng(0), VIT.decoder_dim, VIT.embed_dim, "student")
        d2.update(head)
        o2.add({f"decoder/{k}": v for k, v in head.items()})
        momentum = MomentumState.from_online(s2, m=1.0)
        rng1, rng2 = np.random.default_rng(1), np.random.default_rng(1)
        for step in range(6):
            batch = copy.deepcopy(base.next_batch())
            base.step += 1
            m1 = stage1_step(batch, dataset, teacher, s1, d1, o1, cfg, VIT, 1e-3, rng1, step)
            m2 = stage2_step(batch, dataset, teacher, s2, momentum, d2, o2, cfg, VIT, 1e-3, rng2, step)
            assert m1.loss_total == m2.loss_total == m2.loss_teacher_term
            for k in s1:
                assert s1[k].data.tobytes() == s2[k].data.tobytes()
            for k in d1:
                assert d1[k].data.tobytes() == d2[k].data.tobytes()


def test_step_metrics_json_round_trip():
    m = StepMetrics(3, 2, 1.5, 2.0, 1.25, 1e-4, 0.01)
    assert StepMetrics(**json.loads(m.to_json())) == m
