import numpy as np
import pytest

from addgp.errors import InvalidSpec
from addgp.kernels import (
    BlockMask, Linear, Periodic, Product, RationalQuadratic, SquaredExponential, WarpedSE,
    WhiteNoise, gram, kernel_from_dict, kernel_matrix, kernel_to_dict, warp_skewed_gaussian,
)
from addgp.model import build_model, compose_design_covariance


class TestFormulas:
    def test_periodic_diagonal(self):
        k = Periodic(4.0, 30.0, 25.0)
        assert kernel_matrix(k, np.array([7.0]))[0, 0] == pytest.approx(4.0)

    def test_se_one_lengthscale(self):
        K = kernel_matrix(SquaredExponential(1.0, 30.0), np.array([0.0]), np.array([30.0]))
        assert K[0, 0] == pytest.approx(np.exp(-0.5))
        assert K[0, 0] == pytest.approx(0.6065, abs=1e-4)

    def test_rq_threshold(self):
        k = RationalQuadratic(1.0, 1.0, 2.0, threshold=11.0)
        K = kernel_matrix(k, np.array([5.0]), np.array([15.0]))
        assert K[0, 0] == 0.0
        K = kernel_matrix(k, np.array([12.0]), np.array([15.0]))
        assert K[0, 0] == pytest.approx((1 + 9 / 4) ** -2)

    def test_periodicity(self):
        t = np.arange(0.0, 60.0)
        k = Periodic(4.0, 30.0, 25.0)
        np.testing.assert_allclose(kernel_matrix(k, t + 25, t), kernel_matrix(k, t, t), atol=1e-12)

    def test_periodic_formula(self):
        k = Periodic(2.0, 0.7, 5.0)
        K = kernel_matrix(k, np.array([0.0]), np.array([1.3]))
        assert K[0, 0] == pytest.approx(2.0 * np.exp(-2 * np.sin(np.pi * 1.3 / 5) ** 2 / 0.49))

    def test_linear(self):
        K = kernel_matrix(Linear(400.0, 10.0), np.array([12.0]), np.array([7.0]))
        assert K[0, 0] == pytest.approx(400.0 - 6.0)

    def test_block_mask_and_white_noise(self):
        z = np.array(["a", "b", "a"], dtype=object)
        np.testing.assert_array_equal(kernel_matrix(BlockMask(), z),
                                      [[1, 0, 1], [0, 1, 0], [1, 0, 1]])
        t = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(kernel_matrix(WhiteNoise(0.1), t),
                                      0.1 * np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]]))

    def test_invalid_parameter(self):
        with pytest.raises(InvalidSpec):
            kernel_matrix(SquaredExponential(-1.0, 1.0), np.zeros(2))


class TestWarp:
    @pytest.mark.parametrize("literal", [False, True])
    def test_center(self, literal):
        assert warp_skewed_gaussian(np.array([3.0]), 3.0, 2.0, 5.0, literal)[0] == pytest.approx(0.5)

    def test_symmetric_without_skew(self):
        z = np.linspace(-3, 3, 13)
        w = warp_skewed_gaussian(z, 0.0, 1.0, 0.0)
        np.testing.assert_allclose(w, np.exp(-0.5 * z**2) / 2)
        np.testing.assert_allclose(w, w[::-1])

    def test_literal_plug_in(self):
        w = warp_skewed_gaussian(np.array([1.0]), 0.0, 1.0, 0.0, literal=True)[0]
        assert w == pytest.approx(np.exp(0.5) / 2)
        assert w == pytest.approx(0.8244, abs=1e-4)

    def test_finite_range(self):
        z = np.linspace(-35, 35, 71)
        for literal in (False, True):
            assert np.all(np.isfinite(warp_skewed_gaussian(z, 0.0, 1.0, 2.0, literal)))

    def test_warped_se_uses_warp(self):
        t = np.linspace(-2, 2, 5)
        k = WarpedSE(2.0, 3.0, 0.0, 0.5, 2.0)
        w = warp_skewed_gaussian(t, 0.0, 0.5, 2.0)
        np.testing.assert_allclose(kernel_matrix(k, t), kernel_matrix(SquaredExponential(2.0, 3.0), w))


class TestGramProperties:
    def test_symmetric_and_factorizable(self, rng):
        t = rng.uniform(0, 50, 40)
        for k in (SquaredExponential(1.0, 3.0), Periodic(4.0, 30.0, 25.0),
                  RationalQuadratic(1.0, 2.0, threshold=20.0), Linear(1.0, 25.0)):
            G = gram(k, t)
            np.testing.assert_allclose(G.values, G.values.T, atol=1e-12)
            np.linalg.cholesky(G.values)

    def test_periodic_singular_needs_jitter(self):
        G = gram(Periodic(4.0, 30.0, 25.0), np.arange(100.0))
        assert G.jitter_applied > 0

    @pytest.mark.parametrize("k", [SquaredExponential(1.5, 2.0), Periodic(1.0, 1.0, 7.0),
                                   RationalQuadratic(1.0, 2.0)])
    def test_shift_invariance(self, rng, k):
        t = rng.uniform(0, 20, 15)
        np.testing.assert_allclose(kernel_matrix(k, t + 3.7), kernel_matrix(k, t), atol=1e-12)

    def test_schur_product_psd(self, rng):
        for _ in range(20):
            t = rng.uniform(0, 10, 25)
            k = Product((SquaredExponential(1.0, rng.uniform(0.5, 3)),
                         Periodic(1.0, 1.0, rng.uniform(2, 8))))
            assert np.linalg.eigvalsh(kernel_matrix(k, t)).min() >= -1e-8

    def test_block_mask_zero_cross_block(self, rng):
        z = np.empty((12, 2), dtype=object)
        z[:, 0] = rng.uniform(0, 5, 12)
        z[:, 1] = rng.choice(["u", "v", "w"], 12)
        k = Product((SquaredExponential(2.0, 1.0, column=0), BlockMask(column=1)))
        K = kernel_matrix(k, z)
        cross = z[:, 1][:, None] != z[:, 1][None, :]
        assert np.all(K[cross] == 0.0)

    def test_dict_round_trip(self):
        k = Product((RationalQuadratic(1.0, "rho_d", 2.0, threshold=0.5), BlockMask(column=1)))
        assert kernel_from_dict(kernel_to_dict(k)) == k

    def test_unknown_type(self):
        with pytest.raises(InvalidSpec):
            kernel_from_dict({"type": "matern"})


class TestDesignCovariance:
    def test_linear_only(self):
        cfg = {"linear": {"intercept": True, "covariates": ["a", "b"], "prior_cov": 1.0}}
        N = 3
        cov = {"a": np.array([0.0, 1.0, 2.0]), "b": np.array([1.0, -1.0, 0.5])}
        m = build_model(cfg, 3, cov, N)
        A, M = compose_design_covariance(m)
        np.testing.assert_allclose(A, m.X.T @ m.X + np.eye(N), atol=1e-14)
        np.testing.assert_allclose(M, np.zeros((2, N)))

    def test_identity_design(self):
        # X = I_Q with Gamma0 = I gives A = 2 I
        cfg = {"linear": {"intercept": False, "covariates": ["e0", "e1", "e2"], "prior_cov": 1.0}}
        I = np.eye(3)
        m = build_model(cfg, 2, {f"e{i}": I[i] for i in range(3)}, 3)
        A, _ = compose_design_covariance(m)
        np.testing.assert_allclose(A, 2 * np.eye(3), atol=1e-14)

    def test_component_mean_zero(self, rng):
        cfg = {"linear": {"intercept": True, "prior_mean": [2.7]},
               "components": [{"name": "s", "covariates": ["t"], "kernel": {"type": "se"}}]}
        m = build_model(cfg, 3, {"t": rng.uniform(size=5)}, 5)
        _, M = compose_design_covariance(m)
        np.testing.assert_allclose(M, m.theta0 @ m.X)

    def test_sim1_term_by_term(self, sim_small):
        t = np.arange(1.0, 11.0)
        batch = (t > 5).astype(float)
        m = build_model(sim_small.model_config, 3, {"time": t, "batch": batch}, 10)
        A, _ = compose_design_covariance(m)
        hv = m.hyper_values()
        G0 = m.gamma0
        per = kernel_matrix(Periodic(hv["sigma_period"], hv["rho_period"], hv["period"]), t)
        tr = kernel_matrix(m.kernel(1), t)
        expected = m.X.T @ G0 @ m.X + per + tr + np.eye(10)
        np.testing.assert_allclose(A, expected, atol=1e-12)
