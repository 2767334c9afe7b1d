import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sffc import goodness as G
from sffc import tensor as T


def ed_eigen_oracle(m: np.ndarray) -> float:
    """(sum lambda)^2 / sum lambda^2 via an explicit eigendecomposition."""
    lam = np.linalg.eigvalsh(0.5 * (m + m.T))
    return float(lam.sum() ** 2 / (lam ** 2).sum())


class TestSecondMoment:
    def test_basis_rows(self):
        ms = G.second_moment(np.eye(2, dtype=np.float64))
        np.testing.assert_allclose(ms.matrix.data, np.diag([0.5, 0.5]))

    def test_single_sample(self, rng):
        x = rng.normal(size=(1, 4))
        ms = G.second_moment(x)
        np.testing.assert_allclose(ms.matrix.data, x.T @ x, rtol=1e-12)
        np.testing.assert_allclose(ms.trace.data, (x ** 2).sum(), rtol=1e-12)

    def test_monte_carlo_gaussian(self):
        gen = np.random.default_rng(99)
        n = 1000
        x = gen.normal(size=(n, 2)) + np.array([1.0, 1.0])
        ms = G.second_moment(x)
        expected = np.array([[2.0, 1.0], [1.0, 2.0]])
        # per-entry standard error of the empirical mean of x_i * x_j
        prods = x[:, :, None] * x[:, None, :]
        se = prods.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(ms.matrix.data - expected) < 3 * se)

    def test_psd_and_empty(self, rng):
        x = rng.normal(size=(6, 4))
        ms = G.second_moment(x)
        assert np.linalg.eigvalsh(ms.matrix.data).min() > -1e-9
        with pytest.raises(ValueError):
            G.second_moment(np.empty((0, 3)))


class TestEffectiveDim:
    def test_identity(self):
        for d in (2, 5, 9):
            ms = G.second_moment(np.eye(d) * np.sqrt(d))
            assert abs(G.effective_dim(ms).item() - d) < 1e-6

    def test_rank_one(self, rng):
        x = rng.normal(size=(1, 6))
        assert abs(G.effective_dim(G.second_moment(x)).item() - 1.0) < 1e-9

    def test_2x2_closed_form(self):
        # eigenvalues {3, 1}: (3+1)^2 / (9+1) = 1.6
        x = np.array([[1.0, 1.0], [1.0, -1.0], [np.sqrt(2), 0.0]])
        m = x.T @ x / 3
        np.testing.assert_allclose(m, [[4 / 3, 0], [0, 2 / 3]])
        ms = G.MomentSummary(T.Tensor(np.array([[2.0, 1.0], [1.0, 2.0]])),
                             T.Tensor(np.array(4.0)), T.Tensor(np.array(10.0)))
        ed = G.effective_dim(ms).item()
        assert abs(ed - 1.6) < 1e-9
        assert abs(ed - ed_eigen_oracle(np.array([[2.0, 1.0], [1.0, 2.0]]))) < 1e-9

    def test_matches_eigen_oracle_on_random_psd(self, rng):
        for _ in range(20):
            d = int(rng.integers(2, 8))
            a = rng.normal(size=(d + 3, d))
            ms = G.second_moment(a)
            assert abs(G.effective_dim(ms, eps=0.0).item() - ed_eigen_oracle(ms.matrix.data)) < 1e-9

    def test_zero_input_guard(self):
        ms = G.second_moment(np.zeros((3, 4)))
        assert G.effective_dim(ms).item() == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000))
    def test_bounds(self, seed):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(1, 10))
        d = int(gen.integers(1, 10))
        x = gen.normal(size=(n, d))
        if np.allclose(x, 0):
            return
        ed = G.effective_dim(G.second_moment(x), eps=0.0).item()
        assert 1.0 - 1e-9 <= ed <= min(d, n) + 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0.25, 4.0))
    def test_scale_invariance(self, seed, c):
        gen = np.random.default_rng(seed)
        x = gen.normal(size=(5, 4))
        a = G.effective_dim(G.second_moment(x)).item()
        b = G.effective_dim(G.second_moment(c * x)).item()
        assert abs(a - b) < 1e-9 * max(1.0, abs(a))

    def test_orthogonal_invariance(self, rng):
        for seed in range(10):
            x = rng.normal(size=(7, 5))
            q = G.haar_basis(5, 5, seed).matrix
            a = G.effective_dim(G.second_moment(x)).item()
            b = G.effective_dim(G.second_moment(x @ q.T)).item()
            assert abs(a - b) < 1e-8

    def test_trace_equals_sum_square_goodness(self, rng):
        x = rng.normal(size=(9, 6))
        ms = G.second_moment(x)
        np.testing.assert_allclose(ms.trace.item(), np.mean(np.sum(x ** 2, axis=1)),
                                   rtol=1e-10)


class TestChannelsAsSamples:
    def test_shapes(self, rng):
        acts = T.Tensor(rng.normal(size=(1, 2, 3, 1, 1)).astype(np.float32))
        per_input, pooled = G.channels_as_samples(acts)
        assert per_input.data.shape == (1, 2, 3)
        assert pooled.data.shape == (1, 3)

    def test_spatial_permutation_invariance(self, rng):
        acts = rng.normal(size=(2, 3, 4, 2, 2)).astype(np.float64)
        per_input, _ = G.channels_as_samples(T.Tensor(acts))
        ed0 = G.ed_consistency(per_input).item()
        perm = acts[:, :, :, ::-1, :].copy()
        per_input2, _ = G.channels_as_samples(T.Tensor(perm))
        ed1 = G.ed_consistency(per_input2).item()
        assert abs(ed0 - ed1) < 1e-10

    def test_vector_case(self, rng):
        # H = W = 1 reduces to plain vector activations
        acts = rng.normal(size=(3, 5, 4, 1, 1))
        per_input, pooled = G.channels_as_samples(T.Tensor(acts))
        np.testing.assert_allclose(per_input.data, acts[:, :, :, 0, 0], rtol=1e-6)
        np.testing.assert_allclose(pooled.data, acts.mean(axis=1)[:, :, 0, 0], rtol=1e-6)

    def test_rank_mismatch(self):
        with pytest.raises(ValueError):
            G.channels_as_samples(T.Tensor(np.ones((2, 3, 4, 5))))


class TestHaarBasis:
    def test_orthonormal_rows(self):
        for seed, (k, d) in enumerate([(3, 8), (5, 5), (1, 4), (10, 32)]):
            p = G.haar_basis(k, d, seed)
            np.testing.assert_allclose(p.matrix @ p.matrix.T, np.eye(k), atol=1e-10)

    def test_full_rank_determinant(self):
        for seed in range(5):
            p = G.haar_basis(6, 6, seed)
            assert abs(abs(np.linalg.det(p.matrix)) - 1.0) < 1e-8

    def test_isotropy_over_seeds(self):
        k, d = 3, 6
        acc = np.zeros((d, d))
        for seed in range(500):
            p = G.haar_basis(k, d, seed).matrix
            acc += p.T @ p
        np.testing.assert_allclose(acc / 500, (k / d) * np.eye(d), atol=5e-2)

    def test_deterministic_and_bounds(self):
        a = G.haar_basis(3, 7, 42).matrix
        b = G.haar_basis(3, 7, 42).matrix
        assert np.array_equal(a, b)
        with pytest.raises(ValueError):
            G.haar_basis(8, 7, 0)


class TestProject:
    def test_full_dim_preserves_ed(self, rng):
        x = rng.normal(size=(9, 5))
        p = G.haar_basis(5, 5, 3)
        a = G.effective_dim(G.second_moment(x)).item()
        b = G.effective_dim(G.second_moment(G.project(T.Tensor(x), p).data)).item()
        assert abs(a - b) < 1e-8

    def test_coordinate_selection(self, rng):
        x = rng.normal(size=(4, 6)).astype(np.float64)
        p = G.ProjectionBasis(matrix=np.eye(6)[:2], seed=0, block_index=0)
        np.testing.assert_allclose(G.project(T.Tensor(x), p).data, x[:, :2], rtol=1e-12)

    def test_expected_norm_shrinkage(self, rng):
        k, d = 3, 7
        v = rng.normal(size=d)
        ratios = []
        for seed in range(500):
            p = G.haar_basis(k, d, seed).matrix
            ratios.append(np.sum((p @ v) ** 2) / np.sum(v ** 2))
        assert abs(np.mean(ratios) - k / d) < 5e-2

    def test_dim_mismatch(self, rng):
        with pytest.raises(ValueError):
            G.project(T.Tensor(rng.normal(size=(3, 5))), G.haar_basis(2, 4, 0))


class TestEdConsistency:
    def test_identical_copies(self, rng):
        v = rng.normal(size=(1, 1, 4)) + 2.0
        x = np.repeat(v, 5, axis=1)
        assert abs(G.ed_consistency(T.Tensor(x)).item() - 1.0) < 1e-6

    def test_orthogonal_pair(self):
        x = np.eye(2).reshape(1, 2, 2)
        assert abs(G.ed_consistency(T.Tensor(x)).item() - 2.0) < 1e-9

    def test_matches_eigen_oracle(self, rng):
        x = rng.normal(size=(4, 8, 3))
        got = G.ed_consistency(T.Tensor(x), eps=0.0).item()
        want = np.mean([ed_eigen_oracle(xi.T @ xi / 8) for xi in x])
        assert abs(got - want) < 1e-10

    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError):
            G.ed_consistency(T.Tensor(rng.normal(size=(2, 1, 3))))

    def test_class_grouping(self, rng):
        x = rng.normal(size=(6, 4, 3))
        labels = np.array([0, 0, 1, 1, 1, 2])
        got = G.ed_consistency(T.Tensor(x), labels=labels, supervision="sup_sampling",
                               eps=0.0).item()
        groups = [x[labels == c].reshape(-1, 3) for c in (0, 1, 2)]
        want = np.mean([ed_eigen_oracle(g.T @ g / len(g)) for g in groups])
        assert abs(got - want) < 1e-9

    def test_singleton_group_skipped_with_warning(self, rng):
        # one row per instance (n = 1): a lone instance of class 1 is skipped
        x = rng.normal(size=(3, 1, 3))
        labels = np.array([0, 0, 1])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            got = G.ed_consistency(T.Tensor(x), labels=labels, supervision="sup", eps=0.0).item()
        assert any("singleton" in str(w.message) for w in caught)
        g0 = x[:2].reshape(-1, 3)
        assert abs(got - ed_eigen_oracle(g0.T @ g0 / 2)) < 1e-9


class TestEdDiversity:
    def test_equal_means(self, rng):
        v = rng.normal(size=(1, 5)) + 1.0
        x = np.repeat(v, 6, axis=0)
        assert abs(G.ed_diversity(T.Tensor(x)).item() - 1.0) < 1e-6

    def test_scaled_basis(self):
        x = 3.0 * np.eye(4)
        assert abs(G.ed_diversity(T.Tensor(x)).item() - 4.0) < 1e-9

    def test_matches_eigen_oracle(self, rng):
        x = rng.normal(size=(10, 4))
        got = G.ed_diversity(T.Tensor(x), eps=0.0).item()
        assert abs(got - ed_eigen_oracle(x.T @ x / 10)) < 1e-10

    def test_empty(self):
        with pytest.raises(ValueError):
            G.ed_diversity(T.Tensor(np.empty((0, 3))))


class TestDcLoss:
    def test_half_alpha(self):
        loss = G.dc_loss(T.Tensor(np.array(1.0)), T.Tensor(np.array(10.0)), 0.5)
        assert abs(loss.item() - (-4.5)) < 1e-9

    def test_endpoints(self, rng):
        edc = T.Tensor(np.array(float(rng.normal() ** 2 + 1)))
        edd = T.Tensor(np.array(float(rng.normal() ** 2 + 1)))
        assert G.dc_loss(edc, edd, 1.0).item() == pytest.approx(edc.item())
        assert G.dc_loss(edc, edd, 0.0).item() == pytest.approx(-edd.item())
        with pytest.raises(ValueError):
            G.dc_loss(edc, edd, 1.5)

    def test_gradient_through_toy_block(self, rng):
        # dc loss through dropout copies -> conv -> relu -> pool -> projection
        with T.use_dtype(np.float64):
            x = T.Tensor(rng.normal(size=(3, 1, 6, 6)))
            w = T.Parameter("w", rng.normal(size=(4, 1, 3, 3)) * 0.5)
            basis = G.haar_basis(3, 4, 7)
            mask = np.random.default_rng(0).random((3, 4, 1, 6, 6)) >= 0.2
            cfg = G.GoodnessConfig(alpha=0.5, n_copies=4, eps=1e-12)

            def f():
                h = T.dropout_copies(x, 0.2, 4, mask=mask)
                h = h.reshape(12, 1, 6, 6)
                h = T.relu(T.conv2d(h, w.tensor, 1, 1))
                h = T.pool2d(h, "max", 2, 2, 0)
                acts = h.reshape(3, 4, 4, 3, 3)
                loss, _, _ = G.block_goodness(acts, basis, cfg)
                return loss

            err = T.finite_diff_check(f, w)
            assert err < 1e-4


class TestCosScore:
    def test_orthogonal_is_one(self):
        kernels = np.eye(4, 8) * 2.0
        assert G.cos_score(kernels) == pytest.approx(1.0, abs=1e-12)

    def test_identical_is_one_over_d(self):
        for d in (2, 5, 8):
            kernels = np.tile(np.array([2.0, 0.0, 4.0, 0.0]), (d, 1))
            assert G.cos_score(kernels) == pytest.approx(1.0 / d, abs=1e-12)

    def test_antiparallel_pair(self):
        kernels = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert G.cos_score(kernels) == pytest.approx(1.5, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000), st.integers(2, 12))
    def test_bounds(self, seed, d):
        gen = np.random.default_rng(seed)
        kernels = gen.normal(size=(d, 9))
        score = G.cos_score(kernels)
        assert 1.0 / d - 1e-9 <= score <= (2 * d - 1) / d + 1e-9

    def test_zero_kernel_reports_channel(self):
        kernels = np.ones((3, 4))
        kernels[1] = 0.0
        with pytest.raises(ValueError, match="channel 1"):
            G.cos_score(kernels)
        with pytest.raises(ValueError):
            G.cos_score(np.ones((1, 4)))


class TestProjectionDims:
    def test_graded_defaults(self):
        cfg = G.GoodnessConfig()
        assert G.resolve_projection_dims(cfg, "mnist", 10, (96, 384, 1536), 0) == (30, 20, 10)
        assert G.resolve_projection_dims(cfg, "cifar100", 100, (96, 384, 1536), 0) == (90, 150, 100)

    def test_fixed_respects_channel_limits(self):
        cfg = G.GoodnessConfig(projection_strategy="fixed")
        assert G.resolve_projection_dims(cfg, "cifar10", 10, (96, 384, 1536), 0) == (10, 10, 10)
        # 100 classes exceed the 96 channels of block 1; the graded value steps in
        assert G.resolve_projection_dims(cfg, "cifar100", 100, (96, 384, 1536), 0) == (90, 100, 100)

    def test_random_within_ranges(self):
        cfg = G.GoodnessConfig(projection_strategy="random")
        dims = G.resolve_projection_dims(cfg, "mnist", 10, (96, 384, 1536), 3)
        assert all(10 <= d <= 60 for d in dims)
        dims100 = G.resolve_projection_dims(cfg, "cifar100", 100, (96, 384, 1536), 3)
        assert dims100[0] == 90 and all(100 <= d <= 300 for d in dims100[1:])

    def test_none_and_explicit(self):
        assert G.resolve_projection_dims(
            G.GoodnessConfig(projection_strategy="none"), "mnist", 10, (96, 384, 1536), 0) is None
        cfg = G.GoodnessConfig(projection_dims=(16, 16, 16))
        assert G.resolve_projection_dims(cfg, "mnist", 10, (32, 128, 512), 0) == (16, 16, 16)
        with pytest.raises(ValueError):
            G.resolve_projection_dims(G.GoodnessConfig(projection_dims=(64, 16, 16)),
                                      "mnist", 10, (32, 128, 512), 0)

    def test_scaled_channels_capped(self):
        cfg = G.GoodnessConfig()
        assert G.resolve_projection_dims(cfg, "mnist", 10, (16, 64, 256), 0) == (16, 20, 10)
