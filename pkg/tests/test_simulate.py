import numpy as np
import pytest

from addgp.errors import InsufficientDraws, InvalidDimensions
from addgp.kernels import Periodic, kernel_matrix, warp_skewed_gaussian
from addgp.simulate import (
    SimTruth, coverage, coverage_ratio, run_sweep, simulate_sim1, simulate_sim2,
    summarize_sweep,
)
from addgp.transforms import alr_inv


class TestSim1:
    def test_default_shapes(self):
        tr = simulate_sim1(seed=0)
        assert tr.Y.shape == (4, 600)
        assert tr.F_true.shape == tr.H_true.shape == (3, 600)
        assert tr.model().Q0 == 2 and tr.model().K == 2

    def test_kernel_values(self):
        tr = simulate_sim1(D=3, N=30, seed=0)
        t = tr.covariates["time"]
        K = kernel_matrix(Periodic(4.0, 30.0, 25.0), t)
        np.testing.assert_allclose(np.diag(K), 4.0)
        m = tr.model()
        np.testing.assert_allclose(m.component_cov(0, m.components[0].z), K)

    def test_component_sum_exact(self):
        for variant in ("nonlinear_trend", "linear_trend"):
            tr = simulate_sim1(D=5, N=40, seed=2, variant=variant)
            total = tr.components["linear"] + tr.components["periodic"] + tr.components["trend"]
            np.testing.assert_array_equal(total, tr.F_true)
            np.testing.assert_array_equal(tr.H_true, tr.F_true)

    def test_sigma(self):
        S = simulate_sim1(D=4, N=20, seed=0).Sigma
        np.testing.assert_array_equal(np.diag(S), 1.5)
        np.testing.assert_array_equal(S[~np.eye(3, dtype=bool)], 0.9)

    def test_depth_exact(self):
        tr = simulate_sim1(D=4, N=50, seed=1, depth=777)
        np.testing.assert_array_equal(tr.Y.sum(0), 777)

    def test_simplex(self):
        pi = alr_inv(simulate_sim1(D=4, N=50, seed=1).H_true)
        np.testing.assert_allclose(pi.sum(0), 1.0, atol=1e-12)
        assert np.all(pi > 0)

    def test_batch_halves(self):
        b = simulate_sim1(D=3, N=20, seed=0).covariates["batch"]
        np.testing.assert_array_equal(b, [0] * 10 + [1] * 10)

    def test_noisy_variant(self):
        tr = simulate_sim1(D=3, N=20, seed=0, noisy=True)
        assert not np.array_equal(tr.H_true, tr.F_true)

    def test_deterministic_and_round_trip(self):
        a = simulate_sim1(D=3, N=25, seed=11)
        b = simulate_sim1(D=3, N=25, seed=11)
        assert a.to_json() == b.to_json()
        c = SimTruth.from_json(a.to_json())
        for name in ("Y", "H_true", "F_true", "B", "Sigma"):
            np.testing.assert_array_equal(getattr(c, name), getattr(a, name))
        for k in a.components:
            np.testing.assert_array_equal(c.components[k], a.components[k])
        assert c.to_json() == a.to_json()

    def test_invalid_dimensions(self):
        with pytest.raises(InvalidDimensions):
            simulate_sim1(D=2, N=20)
        with pytest.raises(InvalidDimensions):
            simulate_sim1(D=3, N=5)

    def test_centered_truth(self):
        tr = simulate_sim1(D=3, N=30, seed=4)
        c = tr.centered_components()
        np.testing.assert_allclose(c["periodic"].mean(1), 0.0, atol=1e-12)
        np.testing.assert_allclose(c["linear"] + c["periodic"] + c["trend"], tr.F_true, atol=1e-12)


class TestSim2:
    def test_shapes(self):
        tr = simulate_sim2(seed=0)
        assert tr.Y.shape == (3, 50)
        np.testing.assert_array_equal(np.diag(tr.Sigma), 1.0)
        assert tr.Sigma[0, 1] == 0.5

    def test_warp_wiring(self):
        tr = simulate_sim2(seed=1, m=0.2, s=0.7, alpha=3.0)
        t = tr.covariates["time"]
        np.testing.assert_array_equal(tr.covariates["w"], warp_skewed_gaussian(t, 0.2, 0.7, 3.0))
        assert abs(t.mean()) < 1e-12 and t.std() == pytest.approx(1.0)

    def test_component_sum_exact(self):
        tr = simulate_sim2(seed=3)
        total = tr.components["linear"] + tr.components["nonstationary"] + tr.components["trend"]
        np.testing.assert_array_equal(total, tr.F_true)

    def test_model_builds(self):
        assert simulate_sim2(seed=0).model().K == 2


class TestCoverage:
    def test_exact_draws(self, rng):
        truth = rng.normal(size=(2, 5))
        assert coverage(np.broadcast_to(truth, (10, 2, 5)), truth) == 1.0

    def test_far_truth(self, rng):
        draws = rng.normal(size=(100, 2, 5))
        assert coverage(draws, np.full((2, 5), 50.0)) == 0.0

    def test_calibrated_normal(self, rng):
        n_points, S = 4000, 400
        truth = rng.normal(size=n_points)
        draws = truth + rng.normal(size=n_points) + rng.normal(size=(S, n_points))
        c = coverage(draws, truth, 0.9)
        # nominal 0.9, binomial half-width ~ 4 sd; finite-S quantiles add a little noise
        assert abs(c - 0.9) < 4 * np.sqrt(0.09 / n_points) + 0.01

    def test_insufficient_draws(self, rng):
        with pytest.raises(InsufficientDraws):
            coverage(rng.normal(size=(1, 3)), np.zeros(3))

    def test_shape_mismatch(self, rng):
        with pytest.raises(InvalidDimensions):
            coverage(rng.normal(size=(5, 3)), np.zeros(4))


class TestCoverageRatio:
    def test_equal(self):
        assert coverage_ratio(0.7, 0.7) == 0.0

    def test_double(self):
        assert coverage_ratio(0.9, 0.45) == pytest.approx(1.0)

    def test_sentinels(self):
        assert coverage_ratio(0.5, 0.0) == np.inf
        assert coverage_ratio(0.0, 0.0) == 0.0
        assert coverage_ratio(0.0, 0.5) == -np.inf


class TestSweep:
    def test_small_sweep(self):
        rows = run_sweep(Ds=(3,), Ns=(20,), n_seeds=2, S=30, master_seed=5)
        comps = {r["component"] for r in rows}
        assert comps == {"linear", "periodic", "trend", "F"}
        assert len(rows) == 8
        summary = summarize_sweep(rows)
        assert len(summary) == 4 and all(s["replicates"] == 2 for s in summary)
        again = run_sweep(Ds=(3,), Ns=(20,), n_seeds=2, S=30, master_seed=5)
        strip = lambda rs: [{k: v for k, v in r.items() if k != "seconds"} for r in rs]
        assert strip(rows) == strip(again)
