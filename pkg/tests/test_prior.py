import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import spearmanr

from fedlt import _accel
from fedlt.dataset import longtail_counts
from fedlt.prior import (
    PriorError,
    PriorEstimate,
    RunningPrior,
    aggregate_global_prior,
    batch_effective_count,
    effective_prior,
    ema_update,
    fuse,
    pearson_matrix,
)

from helpers import isotropic_prior_estimate


class TestPearson:
    def test_single_degenerate_sample(self):
        np.testing.assert_array_equal(pearson_matrix([[1.0, 2.0]], [1.0, 2.0]), [[1.0]])

    def test_orthogonal(self):
        np.testing.assert_allclose(pearson_matrix([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]), np.eye(2), atol=1e-15)

    def test_parallel(self):
        np.testing.assert_allclose(pearson_matrix([[1.0, 0.0], [2.0, 0.0]], [0.0, 0.0]), np.ones((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(PriorError):
            pearson_matrix(np.ones((2, 3)), np.zeros(2))

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (6, 4), elements=st.floats(-10, 10)))
    def test_structure(self, h):
        r = pearson_matrix(h, h.mean(axis=0))
        np.testing.assert_allclose(r, r.T, atol=1e-12)
        np.testing.assert_array_equal(np.diag(r), 1.0)
        assert np.all(np.abs(r) <= 1 + 1e-12)


class TestEffectiveCount:
    def test_one(self):
        assert batch_effective_count([[1.0]]) == 1.0

    def test_identity_pair(self):
        assert batch_effective_count(np.eye(2)) == pytest.approx(2.0, abs=1e-9)

    def test_redundant_pair(self):
        assert batch_effective_count(np.ones((2, 2))) == pytest.approx(1.0, abs=1e-9)

    def test_anticorrelated_pair_is_capped(self):
        assert batch_effective_count([[1.0, -1.0], [-1.0, 1.0]]) == 2.0

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)))
    def test_bounded_by_batch_size(self, h):
        n = batch_effective_count(pearson_matrix(h, np.zeros(3)))
        assert 1.0 - 1e-12 <= n <= 5.0 + 1e-12


class TestEffectivePrior:
    def test_one_class_two_orthogonal(self):
        est = effective_prior([(np.eye(2), np.array([0, 0]))], np.zeros((1, 2)), 1)
        np.testing.assert_allclose(est.raw, [2.0])

    def test_grows_linearly_with_batches(self):
        protos = np.zeros((2, 2))
        batch = (np.eye(2), np.array([0, 1]))
        for b in (1, 3, 5):
            np.testing.assert_allclose(effective_prior([batch] * b, protos, 2).raw, [b, b])

    def test_absent_class(self):
        est = effective_prior([(np.eye(2), np.array([0, 0]))], np.zeros((3, 2)), 3)
        assert est.raw[1] == 0 and est.normalized[1] == 0
        assert est.seen.tolist() == [True, False, False]

    def test_empty_estimate_normalises_to_zero(self):
        assert not PriorEstimate(np.zeros(3)).normalized.any()

    def test_running_centre_excludes_current_batch(self):
        running = RunningPrior(np.zeros((1, 2)), 1)
        running.update(np.array([[1.0, 0.0]]), [0])
        np.testing.assert_array_equal(running.centres[0], [1.0, 0.0])
        # second batch is measured against the first sample as centre
        running.update(np.array([[2.0, 0.0], [1.0, 1.0]]), [0, 0])
        np.testing.assert_allclose(running.estimate().raw, [1.0 + 2.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_tracks_true_counts(self, seed):
        counts = longtail_counts(10, 300, 30)
        est = isotropic_prior_estimate(seed, counts)
        assert spearmanr(est.raw, counts).statistic > 0.9


class TestKernels:
    @pytest.mark.parametrize("seed", range(4))
    def test_kernel_matches_matrix_route(self, seed):
        rng = np.random.default_rng(seed)
        c, d = 4, 5
        labels = rng.integers(0, c, 20)
        feats = rng.normal(size=(20, d))
        feats[3] = 0.0
        protos = rng.normal(size=(c, d))
        labels[3] = 1
        protos[1] = 0.0
        counts, present = _accel.batch_effective_counts(feats, labels, protos, c)
        for k in range(c):
            rows = labels == k
            assert present[k] == rows.any()
            expected = batch_effective_count(pearson_matrix(feats[rows], protos[k])) if rows.any() else 0.0
            assert counts[k] == pytest.approx(expected, rel=1e-12)

    def test_numpy_and_compiled_agree(self):
        if not _accel.HAS_NUMBA:
            pytest.skip("numba unavailable")
        rng = np.random.default_rng(9)
        labels = rng.integers(0, 6, 64)
        feats = rng.normal(size=(64, 8))
        protos = rng.normal(size=(6, 8))
        a = _accel.numpy_kernels["batch_effective_counts"](feats, labels, protos, 6)
        b = _accel.batch_effective_counts(feats, labels, protos, 6)
        np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
        np.testing.assert_array_equal(a[1], b[1])


class TestCombination:
    def test_ema_extremes(self):
        old, new = np.array([0.3, 0.7]), np.array([0.6, 0.4])
        np.testing.assert_allclose(ema_update(old, new, 0.0), new)
        np.testing.assert_allclose(ema_update(old, new, 1.0), old)

    def test_ema_example(self):
        np.testing.assert_allclose(ema_update([1.0, 0.0], [0.0, 1.0], 0.9), [0.9, 0.1], rtol=1e-14)

    def test_ema_bad_momentum(self):
        with pytest.raises(PriorError):
            ema_update([1.0], [1.0], 1.5)

    def test_aggregate_single(self):
        np.testing.assert_allclose(aggregate_global_prior([PriorEstimate(np.array([3.0, 1.0]))], [7]), [0.75, 0.25])

    def test_aggregate_two_equal_clients(self):
        out = aggregate_global_prior([np.array([1.0, 0.0]), np.array([0.0, 1.0])], [5, 5])
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_aggregate_identical(self):
        d = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(aggregate_global_prior([d, d, d], [1, 4, 9]), d, rtol=1e-14)

    def test_aggregate_empty(self):
        with pytest.raises(PriorError):
            aggregate_global_prior([], [])

    def test_fuse_extremes(self):
        g, k = np.array([0.8, 0.2]), np.array([0.3, 0.7])
        np.testing.assert_allclose(fuse(g, k, 0.0), g, rtol=1e-12)
        np.testing.assert_allclose(fuse(g, k, 1.0), k, rtol=1e-12)

    def test_fuse_example(self):
        np.testing.assert_allclose(fuse([0.8, 0.2], [0.2, 0.8], 0.5), [0.5, 0.5], rtol=1e-14)

    def test_fuse_bad_gamma(self):
        with pytest.raises(PriorError):
            fuse([0.5, 0.5], [0.5, 0.5], -0.1)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(0, 5)), arrays(np.float64, 4, elements=st.floats(0, 5)),
           st.floats(0, 1))
    def test_simplex_preserved(self, a, b, t):
        for out in (fuse(a + 1e-3, b + 1e-3, t), ema_update(a + 1e-3, b + 1e-3, t)):
            assert abs(out.sum() - 1.0) < 1e-12 and np.all(out >= 0)
