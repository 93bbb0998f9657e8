import numpy as np
import pytest

from collabmask import tensor as T
from collabmask.errors import ConfigError, DimensionError
from collabmask.masking import MaskSet
from collabmask.objectives import (
    collaborative_loss,
    collaborative_terms,
    combine,
    mae_pixel_loss,
    normalize_rows,
    pixel_targets,
    teacher_feature_loss,
)
from collabmask.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def random_inputs(rng, b=3, k=5, ds=8, dt=6):
    return (
        Tensor(rng.standard_normal((b, k, ds)), requires_grad=True),
        Tensor(rng.standard_normal((b, k, dt)), requires_grad=True),
        normalize_rows(rng.standard_normal((b, k, ds))),
        normalize_rows(rng.standard_normal((b, k, dt))),
    )


class TestPixelLoss:
    def test_identical_is_zero(self, rng):
        t = pixel_targets(rng.standard_normal((4, 12)))
        assert mae_pixel_loss(t, t).item() == 0.0

    def test_three_four_five(self):
        assert mae_pixel_loss(Tensor([[3.0, 4.0]]), Tensor([[0.0, 0.0]])).item() == 25.0

    def test_duplicated_rows_leave_mean_unchanged(self, rng):
        p, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        a = mae_pixel_loss(Tensor(p), Tensor(t)).item()
        b = mae_pixel_loss(Tensor(np.concatenate([p, p])), Tensor(np.concatenate([t, t]))).item()
        assert a == pytest.approx(b, rel=1e-15)

    def test_empty_mask(self):
        assert mae_pixel_loss(Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4)))).item() == 0.0

    def test_row_count_mismatch(self):
        with pytest.raises(DimensionError):
            mae_pixel_loss(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))))
        with pytest.raises(DimensionError):
            mae_pixel_loss(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))), MaskSet(np.array([0, 1, 2]), 8))

    def test_targets_normalised(self, rng):
        t = pixel_targets(rng.uniform(0, 255, (20, 48))).data
        assert np.abs(t.mean(axis=-1)).max() < 1e-9
        assert np.abs(t.var(axis=-1) - 1.0).max() < 1e-6


class TestTeacherLoss:
    def test_hand_case(self):
        pred = Tensor([[1.0, 0.0], [1.0, 1.0]])
        target = Tensor([[0.0, 0.0], [0.0, -0.41421356237309515]])
        # squared errors 1 and 1 + (1 + 0.414...)^2 = 3
        assert teacher_feature_loss(pred, target).item() == pytest.approx(2.0, abs=1e-12)

    def test_identical_is_zero(self, rng):
        t = normalize_rows(rng.standard_normal((2, 3, 5)))
        assert teacher_feature_loss(t, t).item() == 0.0

    def test_alpha_zero_endpoint_exact(self, rng):
        ps, pt, ts, tt = random_inputs(rng)
        assert collaborative_loss(ps, pt, ts, tt, 0.0).item() == teacher_feature_loss(pt, tt).item()


class TestCollaborativeLoss:
    def test_hand_case(self):
        ps, ts = Tensor([[2.0, 0.0]]), Tensor([[0.0, 0.0]])
        pt, tt = Tensor([[1.0, 1.0]]), Tensor([[0.0, 0.0]])
        assert collaborative_loss(ps, pt, ts, tt, 0.3).item() == pytest.approx(2.6, abs=1e-12)

    def test_alpha_one_endpoint_exact(self, rng):
        ps, pt, ts, tt = random_inputs(rng)
        s, _ = collaborative_terms(ps, pt, ts, tt)
        assert collaborative_loss(ps, pt, ts, tt, 1.0).item() == s.item()

    def test_affine_in_alpha(self, rng):
        for _ in range(200):
            ps, pt, ts, tt = random_inputs(rng, k=int(rng.integers(1, 8)))
            l0 = collaborative_loss(ps, pt, ts, tt, 0.0).item()
            l1 = collaborative_loss(ps, pt, ts, tt, 1.0).item()
            a = rng.random()
            assert abs(collaborative_loss(ps, pt, ts, tt, a).item() - (a * l1 + (1 - a) * l0)) < 1e-12

    def test_non_negative_and_zero_iff_equal(self, rng):
        ps, pt, ts, tt = random_inputs(rng)
        assert collaborative_loss(ps, pt, ts, tt, 0.3).item() > 0
        assert collaborative_loss(ts, tt, ts, tt, 0.3).item() == 0.0

    def test_alpha_out_of_range(self):
        with pytest.raises(ConfigError):
            combine(Tensor(1.0), Tensor(1.0), -0.1)

    def test_head_widths_may_differ_but_rows_must_match(self, rng):
        ps, pt, ts, tt = random_inputs(rng, dt=3)
        collaborative_loss(ps, pt, ts, tt, 0.5)
        with pytest.raises(DimensionError):
            collaborative_loss(ps, pt[:, :2], ts, tt, 0.5)

    def test_gradients_match_finite_differences(self, rng):
        ps, pt, ts, tt = random_inputs(rng)
        assert T.gradcheck(lambda a, b: collaborative_loss(a, b, ts, tt, 0.3), [ps, pt]) < 1e-4
        assert T.gradcheck(lambda a: mae_pixel_loss(a, ts), [ps]) < 1e-4

    def test_targets_receive_no_gradient(self, rng):
        raw_s = Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True)
        raw_t = Tensor(rng.standard_normal((2, 4, 6)), requires_grad=True)
        ps, pt, _, _ = random_inputs(rng, b=2, k=4)
        T.backward(collaborative_loss(ps, pt, normalize_rows(raw_s), normalize_rows(raw_t), 0.3))
        assert raw_s.grad is None and raw_t.grad is None
        assert ps.grad is not None and pt.grad is not None
