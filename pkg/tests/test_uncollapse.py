from dataclasses import dataclass

import numpy as np
import pytest

from addgp.errors import DegenerateResidualCovariance
from addgp.matvar import MatrixNormalParams, conjugate_mn_posterior
from addgp.model import EvaluationGrid, build_grid, build_model
from addgp.simulate import coverage, simulate_sim1
from addgp.uncollapse import (
    UncollapsePlan, back_sample, center_sum_to_zero, run_cu_sampler, run_naddgp_baseline,
    sample_sigma_f,
)

from conftest import small_model


def se(x):
    return x.std(0, ddof=1) / np.sqrt(x.shape[0])


def tiny_model(K=2, N=5, kernels=None, prior_cov=1.0, intercept=True, D=2):
    t = np.linspace(0.0, 2.0, N)
    kernels = kernels or [{"type": "se", "sigma2": 0.5, "rho": 1.0},
                          {"type": "se", "sigma2": 0.3, "rho": 0.4}]
    comps = [{"name": f"c{k}", "covariates": ["t"], "kernel": kernels[k]} for k in range(K)]
    cfg = {"linear": {"intercept": intercept, "covariates": ["x"], "prior_cov": prior_cov,
                      "prior_mean": 0.3},
           "components": comps, "sigma_prior": {"xi": 1.0, "zeta": 6.0}}
    return build_model(cfg, D, {"t": t, "x": np.cos(3 * t)}, N)


class TestSampleSigmaF:
    def test_empty_grid(self, rng):
        m = small_model(D=3, N=6)
        Sig, F = sample_sigma_f(rng.normal(size=(2, 6)), m, None, rng)
        assert F.shape == (2, 6) and Sig.shape == (2, 2)

    def test_diffuse_prior_recovers_h(self, rng):
        t = np.arange(6.0)
        cfg = {"linear": {"intercept": True, "prior_cov": 1e4},
               "components": [{"name": "s", "covariates": ["t"],
                               "kernel": {"type": "se", "sigma2": 1e4, "rho": 0.3}}]}
        m = build_model(cfg, 3, {"t": t}, 6)
        H = rng.normal(size=(2, 6))
        plan = UncollapsePlan(m)
        S = 20_000
        _, F, _ = plan.sample_sigma_f(np.broadcast_to(H, (S, 2, 6)), rng)
        assert np.all(np.abs(F.mean(0) - H) < 4 * se(F) + 2e-3)

    def test_textbook_conjugate_posterior(self, rng):
        # F ~ MN(Theta, Sigma, G), H | F ~ MN(F, Sigma, I), Sigma ~ IW(Xi, zeta)
        m = small_model(D=3, N=5, K=1, xi=[[1.0, 0.2], [0.2, 0.5]], zeta=6.0)
        X = m.X
        G = X.T @ m.gamma0 @ X + m.component_cov(0, m.components[0].z)
        Theta = m.theta0 @ X
        A = G + np.eye(5)
        H = Theta + rng.normal(size=(2, 5))
        E = H - Theta
        scale = m.xi + E @ np.linalg.inv(A) @ E.T
        dof = m.zeta + 5
        S = 40_000
        plan = UncollapsePlan(m)
        Sig, F, _ = plan.sample_sigma_f(np.broadcast_to(H, (S, 2, 5)), rng)
        assert np.all(np.abs(Sig.mean(0) - scale / (dof - 2 - 1)) < 4 * se(Sig))
        Fmean = Theta + E @ np.linalg.solve(A, G)
        assert np.all(np.abs(F.mean(0) - Fmean) < 4 * se(F))
        Cf = G - G @ np.linalg.solve(A, G)
        var_expected = np.outer(np.diag(scale) / (dof - 3), np.diag(Cf))
        v = F.var(0, ddof=1)
        v_se = np.sqrt(np.var((F - F.mean(0)) ** 2, axis=0, ddof=1) / S)
        assert np.all(np.abs(v - var_expected) < 4 * v_se)

    def test_conditional_mean_formula(self, rng):
        m = tiny_model(K=1, intercept=False)
        m = build_model({"linear": {"intercept": False},
                         "components": [{"name": "s", "covariates": ["t"],
                                         "kernel": {"type": "se", "sigma2": 1.0, "rho": 0.7}}]},
                        3, {"t": np.linspace(0, 3, 6)}, 6)
        grid = build_grid(m, {"t": np.array([0.25, 1.1, 3.5])})
        plan = UncollapsePlan(m, grid)
        F_obs = rng.normal(size=(2, 6))
        mean, _ = plan.conditional_unobserved(F_obs)
        G = m.component_cov(0, plan.z_eval[0])
        gls = F_obs @ np.linalg.solve(G[:6, :6], G[:6, 6:])
        np.testing.assert_allclose(mean, gls, atol=1e-10)

    def test_joint_form_matches_chain_form(self, rng):
        m = small_model(D=3, N=6, K=1)
        grid = build_grid(m, {"t": np.array([1.5, 7.0]), "x": np.array([0.3, -1.0])})
        plan = UncollapsePlan(m, grid)
        H = rng.normal(size=(2, 6))
        E = H - plan.M
        joint_mean = plan.theta_star + E @ np.linalg.solve(plan.A, plan.gamma_os)
        chain_mean, _ = plan.conditional_unobserved(joint_mean[:, :6])
        np.testing.assert_allclose(joint_mean[:, 6:], chain_mean, atol=1e-9)


class TestBackSample:
    def test_k1_remainder(self, rng):
        m = tiny_model(K=1)
        plan = UncollapsePlan(m)
        F = rng.normal(size=(1, 5))
        B, fs = back_sample(F, np.array([[0.8]]), m, None, rng, plan=plan)
        np.testing.assert_array_equal(fs[0], F - B @ plan.x_eval)

    def test_k1_matches_closed_form(self, rng):
        m = tiny_model(K=1)
        plan = UncollapsePlan(m)
        F = rng.normal(size=(1, 5))
        Sig = np.array([[0.8]])
        S = 40_000
        L = np.broadcast_to(np.sqrt(Sig), (S, 1, 1))
        B, _ = plan.back_sample(np.broadcast_to(F, (S, 1, 5)), L, rng)
        post = conjugate_mn_posterior(F, m.X, MatrixNormalParams(m.theta0, Sig, m.gamma0),
                                      plan.gamma_k[0], Sig, form="precision")
        assert np.all(np.abs(B.mean(0) - post.mean) < 4 * se(B))
        v_se = np.sqrt(np.var((B - B.mean(0)) ** 2, axis=0, ddof=1) / S)
        assert np.all(np.abs(B.var(0, ddof=1) - Sig[0, 0] * np.diag(post.col_cov)) < 4 * v_se)

    def test_reconstruction_bitwise(self, sim_small):
        d = run_cu_sampler(sim_small.Y, sim_small.model(), None, 50, np.random.default_rng(0),
                           center=False)
        assert np.all(d.reconstruction_residual() == 0.0)

    def test_gibbs_oracle(self, rng):
        B_bs, B_gibbs = gibbs_vs_backsample(rng)
        for Bx in (B_bs, B_gibbs):
            assert Bx.shape[0] > 1000
        diff = B_bs.mean(0) - B_gibbs.mean(0)
        assert np.all(np.abs(diff) < 4 * np.sqrt(se(B_bs) ** 2 + se(B_gibbs) ** 2))
        v1, v2 = B_bs.var(0, ddof=1), B_gibbs.var(0, ddof=1)
        v_se = lambda B: np.sqrt(np.var((B - B.mean(0)) ** 2, axis=0, ddof=1) / B.shape[0])
        assert np.all(np.abs(v1 - v2) < 4 * np.sqrt(v_se(B_bs) ** 2 + v_se(B_gibbs) ** 2))

    def test_exchangeable_ordering(self, rng):
        k = {"type": "se", "sigma2": 0.4, "rho": 0.8}
        m = tiny_model(K=2, kernels=[k, k])
        plan = UncollapsePlan(m)
        S = 40_000
        F = np.broadcast_to(rng.normal(size=(1, 5)), (S, 1, 5))
        L = np.full((S, 1, 1), 0.9)
        B, (f_first, f_last) = plan.back_sample(F, L, rng)
        # sampled component and remainder share a law under equal kernels
        assert np.all(np.abs(f_first.mean(0) - f_last.mean(0))
                      < 4 * np.sqrt(se(f_first) ** 2 + se(f_last) ** 2))
        rel = np.abs(f_first.var(0) / f_last.var(0) - 1)
        assert np.all(rel < 0.05)

    def test_zero_remaining_kernel(self, rng):
        # the last kernel vanishes on every input (t < threshold), so f_1 is
        # fully determined and its posterior covariance is zero
        k = {"type": "rq", "sigma2": 1.0, "rho": 1.0, "threshold": 10.0}
        m = tiny_model(K=2, kernels=[{"type": "se", "sigma2": 1.0, "rho": 1.0}, k])
        plan = UncollapsePlan(m)
        assert np.all(np.isfinite(plan.L_f[0]))
        B, fs = back_sample(rng.normal(size=(1, 5)), np.eye(1), m, None, rng, plan=plan)
        assert np.max(np.abs(fs[1])) < 1e-6

    def test_degenerate_residual(self):
        # an indefinite user kernel leaves no valid residual covariance
        from dataclasses import replace

        from addgp.kernels import Kernel

        @dataclass(frozen=True)
        class Indefinite(Kernel):
            def __call__(self, z, z2):
                return -np.eye(len(z), len(z2))

        m = tiny_model(K=2)
        comps = (m.components[0], replace(m.components[1], kernel=Indefinite()))
        with pytest.raises(DegenerateResidualCovariance):
            UncollapsePlan(replace(m, components=comps))


def gibbs_vs_backsample(rng, n_chains=4000, n_iter=200):
    """Marginal draws of B from back-sampling and from a parallel Gibbs sampler."""
    m = tiny_model(K=2)
    plan = UncollapsePlan(m)
    X = plan.x_eval
    Sig = 0.7
    F = rng.normal(size=(1, 5))
    L = np.full((n_chains, 1, 1), np.sqrt(Sig))
    B_bs, _ = plan.back_sample(np.broadcast_to(F, (n_chains, 1, 5)), L, rng)

    G1, G2 = plan.gamma_k
    prior_B = MatrixNormalParams(m.theta0, np.array([[Sig]]), m.gamma0)
    f1 = np.zeros((n_chains, 1, 5))
    for _ in range(n_iter):
        # B | f1: F - f1 = B X + f2, f2 ~ MN(0, Sig, G2)
        pb = conjugate_mn_posterior(F - f1[0], X, prior_B, G2, np.array([[Sig]]), form="precision")
        # same column covariance for all chains; means differ with f1
        Gi = np.linalg.inv(G2)
        Zi = np.linalg.inv(m.gamma0)
        Cb = np.linalg.inv(X @ Gi @ X.T + Zi)
        mb = ((F - f1) @ Gi @ X.T + m.theta0 @ Zi) @ Cb
        B = mb + np.sqrt(Sig) * rng.standard_normal(mb.shape) @ np.linalg.cholesky(Cb).T
        # f1 | B: F - B X = f1 + f2
        R = F - B @ X
        C1 = G1 - G1 @ np.linalg.solve(G1 + G2, G1)
        m1 = R @ np.linalg.solve(G1 + G2, G1)
        L1 = np.linalg.cholesky(C1 + 1e-12 * np.eye(5))
        f1 = m1 + np.sqrt(Sig) * rng.standard_normal(m1.shape) @ L1.T
    return B_bs, B


class TestCentering:
    def test_constant_moves_to_intercept(self):
        f = np.full((2, 1, 4), 3.0)
        B = np.zeros((2, 1, 2))
        c, B2, off = center_sum_to_zero({"a": f}, B, intercept_row=0)
        np.testing.assert_array_equal(c["a"], 0.0)
        np.testing.assert_array_equal(B2[..., 0], 3.0)
        assert off is None

    def test_idempotent(self, rng):
        f = rng.normal(size=(3, 2, 6))
        c, _, _ = center_sum_to_zero({"a": f}, np.zeros((3, 2, 1)), 0)
        c2, _, _ = center_sum_to_zero(c, np.zeros((3, 2, 1)), 0)
        np.testing.assert_allclose(c2["a"], c["a"], atol=1e-15)

    def test_offset_without_intercept(self, rng):
        f = rng.normal(size=(3, 2, 6))
        c, B, off = center_sum_to_zero({"a": f}, None, None)
        np.testing.assert_allclose(off, f.mean(-1))

    def test_reconstruction_invariant(self, sim_small):
        m = sim_small.model()
        a = run_cu_sampler(sim_small.Y, m, None, 30, np.random.default_rng(5), center=True)
        b = run_cu_sampler(sim_small.Y, m, None, 30, np.random.default_rng(5), center=False)
        np.testing.assert_array_equal(a.F, b.F)
        assert np.max(np.abs(a.reconstruction_residual())) < 1e-12
        for f in a.components.values():
            np.testing.assert_allclose(f.mean(-1), 0.0, atol=1e-12)


class TestPipelines:
    def test_smoke(self):
        tr = simulate_sim1(D=3, N=10, seed=1)
        d = run_cu_sampler(tr.Y, tr.model(), None, 1, np.random.default_rng(0))
        assert d.S == 1 and d.F.shape == (1, 2, 10)
        assert np.max(np.abs(d.reconstruction_residual())) < 1e-12
        assert np.linalg.eigvalsh(d.Sigma[0]).min() > 0

    def test_sigma_spd_every_draw(self, sim_small):
        d = run_cu_sampler(sim_small.Y, sim_small.model(), None, 300, np.random.default_rng(2))
        assert np.all(np.linalg.eigvalsh(d.Sigma).min(axis=1) > 0)
        assert d.diagnostics["map_converged"]

    def test_deterministic(self, sim_small):
        m = sim_small.model()
        a = run_cu_sampler(sim_small.Y, m, None, 20, np.random.default_rng(9))
        b = run_cu_sampler(sim_small.Y, m, None, 20, np.random.default_rng(9))
        for x, y in ((a.H, b.H), (a.F, b.F), (a.B, b.B), (a.Sigma, b.Sigma)):
            np.testing.assert_array_equal(x, y)

    def test_prediction_grid(self, sim_small):
        m = sim_small.model()
        grid = build_grid(m, {"time": np.array([31.0, 32.0]), "batch": np.array([1.0, 1.0])})
        d = run_cu_sampler(sim_small.Y, m, grid, 10, np.random.default_rng(0))
        assert d.F.shape == (10, 2, 32)
        assert np.max(np.abs(d.reconstruction_residual())) < 1e-12

    def test_naddgp_fixed_h(self, sim_small):
        d = run_naddgp_baseline(sim_small.Y, sim_small.model(), None, 15, np.random.default_rng(0))
        assert np.all(d.H == d.H[0])
        assert d.method == "naddgp"

    def test_deep_data_agreement(self):
        # balanced composition so every taxon is deeply sequenced
        tr = simulate_sim1(D=3, N=40, seed=3, depth=1_000_000, fit_prior="matched",
                           intercept=0.0, batch_effect=0.0)
        m = tr.model()
        S = 1000
        a = run_cu_sampler(tr.Y, m, None, S, np.random.default_rng(1))
        b = run_naddgp_baseline(tr.Y, m, None, S, np.random.default_rng(2))
        for x, y in [(a.F, b.F)] + [(a.components[k], b.components[k]) for k in a.components]:
            assert np.all(np.abs(x.mean(0) - y.mean(0)) < 5 * np.sqrt(se(x) ** 2 + se(y) ** 2))

    def test_shallow_data_baseline_overconfident(self):
        for seed in range(3):
            tr = simulate_sim1(D=3, N=60, seed=seed, depth=50, fit_prior="matched")
            m = tr.model()
            width, cov = {}, {}
            for name, fn in (("multi", run_cu_sampler), ("naddgp", run_naddgp_baseline)):
                d = fn(tr.Y, m, None, 500, np.random.default_rng(seed))
                lo, hi = np.quantile(d.F, [0.025, 0.975], axis=0)
                width[name] = np.mean(hi - lo)
                cov[name] = coverage(d.F, tr.F_true, 0.95)
            assert width["naddgp"] < width["multi"]
            assert cov["naddgp"] < cov["multi"]
