import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from collabmask.errors import ConfigError, DimensionError
from collabmask.masking import (
    MaskSet,
    aggregate_attention,
    batch_masks,
    num_masked,
    select_mask_random,
    select_mask_stochastic,
    select_mask_topk,
)


def brute_force_topk(scores, ratio, most=True):
    k = math.ceil(ratio * len(scores))
    key = (lambda i: (-scores[i], i)) if most else (lambda i: (scores[i], i))
    return sorted(sorted(range(len(scores)), key=key)[:k])


def simplex(rng, n):
    x = rng.random(n)
    return x / x.sum()


class TestAggregate:
    def test_endpoints_exact(self):
        rng = np.random.default_rng(0)
        a_s, a_t = simplex(rng, 10), simplex(rng, 10)
        assert np.array_equal(aggregate_attention(a_s, a_t, 0.0), a_t)
        assert np.array_equal(aggregate_attention(a_s, a_t, 1.0), a_s)

    def test_hand_case(self):
        out = aggregate_attention([0.2, 0.8], [0.6, 0.4], 0.3)
        np.testing.assert_allclose(out, [0.48, 0.52], atol=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            aggregate_attention([0.5, 0.5], [1.0], 0.3)

    def test_alpha_range(self):
        with pytest.raises(ConfigError):
            aggregate_attention([0.5, 0.5], [0.5, 0.5], 1.5)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 64), st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_convexity_and_sum(self, n, alpha, seed):
        rng = np.random.default_rng(seed)
        a_s, a_t = simplex(rng, n), simplex(rng, n)
        c = aggregate_attention(a_s, a_t, alpha)
        assert abs(c.sum() - 1.0) < 1e-9
        lo, hi = np.minimum(a_s, a_t), np.maximum(a_s, a_t)
        assert np.all(c >= lo - 1e-15) and np.all(c <= hi + 1e-15)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            n = int(rng.integers(4, 64))
            a_s, a_t, alpha = simplex(rng, n), simplex(rng, n), rng.random()
            perm = rng.permutation(n)
            c = aggregate_attention(a_s, a_t, alpha)
            cp = aggregate_attention(a_s[perm], a_t[perm], alpha)
            assert np.array_equal(cp, c[perm])
            m = select_mask_topk(c, 0.75).indices
            mp = select_mask_topk(cp, 0.75).indices
            assert sorted(perm[mp].tolist()) == m.tolist()

    def test_alpha_sweep_moves_from_teacher_set_to_student_set(self):
        rng = np.random.default_rng(11)
        n = 16
        a_s, a_t = simplex(rng, n), simplex(rng, n)
        teacher_set = set(select_mask_topk(a_t, 0.5).indices.tolist())
        student_set = set(select_mask_topk(a_s, 0.5).indices.tolist())
        assert teacher_set != student_set
        sets = [set(select_mask_topk(aggregate_attention(a_s, a_t, al), 0.5).indices.tolist())
                for al in np.linspace(0, 1, 201)]
        assert sets[0] == teacher_set and sets[-1] == student_set
        # each transition swaps a small number of patches; overlap with the student set never shrinks
        overlap = [len(s & student_set) for s in sets]
        assert all(b >= a for a, b in zip(overlap, overlap[1:]))


class TestTopK:
    def test_hand_case(self):
        assert select_mask_topk([0.1, 0.4, 0.3, 0.2], 0.5).indices.tolist() == [1, 2]

    def test_tie_break_by_index(self):
        assert select_mask_topk([0.25] * 4, 0.5).indices.tolist() == [0, 1]

    def test_196_patches_mask_147(self):
        rng = np.random.default_rng(0)
        assert len(select_mask_topk(simplex(rng, 196), 0.75)) == 147

    def test_least_polarity(self):
        assert select_mask_topk([0.1, 0.4, 0.3, 0.2], 0.5, "least").indices.tolist() == [0, 3]

    @pytest.mark.parametrize("ratio", [0.0, 1.0, 0.9])
    def test_degenerate_ratio(self, ratio):
        with pytest.raises(ConfigError):
            select_mask_topk(np.full(4, 0.25), ratio)

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            n = int(rng.integers(2, 65))
            scores = rng.integers(0, 4, size=n) / 4.0  # heavy ties
            ratio = float(rng.choice([0.5, 0.75]))
            if math.ceil(ratio * n) in (0, n):
                continue
            assert select_mask_topk(scores, ratio).indices.tolist() == brute_force_topk(scores, ratio)
            assert select_mask_topk(scores, ratio, "least").indices.tolist() == brute_force_topk(scores, ratio, False)


class TestRandom:
    def test_determinism(self):
        a = select_mask_random(64, 0.75, np.random.default_rng(9))
        b = select_mask_random(64, 0.75, np.random.default_rng(9))
        assert np.array_equal(a.indices, b.indices)

    def test_size(self):
        assert len(select_mask_random(8, 0.75, np.random.default_rng(0))) == 6

    def test_uniform_marginals(self):
        rng = np.random.default_rng(2024)
        counts = np.zeros(8)
        draws = 100_000
        for _ in range(draws):
            counts[select_mask_random(8, 0.5, rng).indices] += 1
        np.testing.assert_allclose(counts / draws, 0.5, atol=0.01)


class TestStochastic:
    def test_point_mass_always_first(self):
        rng = np.random.default_rng(0)
        scores = np.zeros(10)
        scores[7] = 1.0
        for _ in range(200):
            assert 7 in select_mask_stochastic(scores, 0.1, rng)

    def test_determinism(self):
        s = simplex(np.random.default_rng(1), 20)
        a = select_mask_stochastic(s, 0.5, np.random.default_rng(4))
        b = select_mask_stochastic(s, 0.5, np.random.default_rng(4))
        assert np.array_equal(a.indices, b.indices)

    def test_uniform_scores_match_random_masking(self):
        n, draws = 6, 100_000
        rng = np.random.default_rng(77)
        uniform = np.full(n, 1.0 / n)
        a = [tuple(select_mask_stochastic(uniform, 0.5, rng).indices) for _ in range(draws)]
        b = [tuple(select_mask_random(n, 0.5, rng).indices) for _ in range(draws)]
        keys = sorted(set(a) | set(b))
        ca, cb = Counter(a), Counter(b)
        table = np.array([[ca[k] for k in keys], [cb[k] for k in keys]])
        assert len(keys) == math.comb(n, 3)
        assert chi2_contingency(table).pvalue > 0.01

    def test_sequential_sampling_law(self):
        # first pick ~ scores; checked on a 3-patch map with one pick
        rng = np.random.default_rng(8)
        scores = np.array([0.5, 0.3, 0.2])
        draws = 60_000
        counts = np.zeros(3)
        for _ in range(draws):
            counts[select_mask_stochastic(scores, 0.3, rng).indices] += 1
        np.testing.assert_allclose(counts / draws, scores, atol=0.01)


class TestMaskSet:
    def test_partition(self):
        m = MaskSet(np.array([1, 4, 5]), 8)
        assert sorted(m.indices.tolist() + m.visible.tolist()) == list(range(8))
        assert 4 in m and 2 not in m

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            MaskSet(np.array([3, 1]), 8)

    def test_num_masked_rounding(self):
        assert num_masked(196, 0.75) == 147
        assert num_masked(10, 0.7) == 7
        assert num_masked(10, 0.71) == 8

    def test_batch_masks_shapes(self):
        rng = np.random.default_rng(0)
        scores = np.stack([simplex(rng, 64) for _ in range(3)])
        visible, masked = batch_masks(scores, 0.75, "topk", rng)
        assert visible.shape == (3, 16) and masked.shape == (3, 48)
