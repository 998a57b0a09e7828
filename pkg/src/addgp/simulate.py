"""Synthetic data generators, coverage metrics and the coverage sweep driver.

Simulation 1 draws ``F = 2.7 + 3 x_batch + f_periodic(t) + f_trend(t)`` with
``f_k ~ MN(0, Sigma, Gamma_k)`` on ``t = 1..N`` and sets ``H = F``; counts are
multinomial with constant depth. Simulation 2 uses a warped non-stationary
component in place of the periodic one. Sweep cells derive their seeds from a
master seed with ``numpy.random.SeedSequence(master).spawn``.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDraws, InvalidDimensions
from .kernels import Linear, Periodic, SquaredExponential, kernel_matrix, warp_skewed_gaussian
from .matvar import cholesky_jittered, sample_matrix_normal_factored
from .model import build_model
from .transforms import alr_inv


def _equicorrelated(P, diag, off):
    return np.full((P, P), float(off)) + (diag - off) * np.eye(P)


@dataclass
class SimTruth:
    """A simulated data set with its generating quantities.

    ``components`` maps ``"linear"`` (``B X``) and each nonlinear component
    name to its ``(D-1) x N`` values; ``model_config`` is a fit configuration
    that uses the generating kernel hyperparameters.
    """

    Y: np.ndarray
    H_true: np.ndarray
    F_true: np.ndarray
    components: dict
    covariates: dict
    B: np.ndarray
    Sigma: np.ndarray
    generator_params: dict
    model_config: dict = field(default_factory=dict)

    @property
    def D(self):
        return self.Y.shape[0]

    @property
    def N(self):
        return self.Y.shape[1]

    def model(self, config=None):
        return build_model(config or self.model_config, self.D, self.covariates, self.N)

    def centered_components(self):
        """Truth under sum-to-zero identification (shifts moved to ``linear``)."""
        out, shift = {}, 0.0
        for name, f in self.components.items():
            if name == "linear":
                continue
            m = f.mean(axis=1, keepdims=True)
            out[name] = f - m
            shift = shift + m
        out = {"linear": self.components["linear"] + shift, **out}
        return out

    def to_dict(self):
        arr = lambda a: np.asarray(a).tolist()
        return {
            "Y": arr(self.Y), "H_true": arr(self.H_true), "F_true": arr(self.F_true),
            "components": {k: arr(v) for k, v in self.components.items()},
            "covariates": {k: arr(v) for k, v in self.covariates.items()},
            "B": arr(self.B), "Sigma": arr(self.Sigma),
            "generator_params": self.generator_params, "model_config": self.model_config,
        }

    @classmethod
    def from_dict(cls, d):
        a = np.asarray
        return cls(
            Y=a(d["Y"], dtype=np.int64), H_true=a(d["H_true"], dtype=float),
            F_true=a(d["F_true"], dtype=float),
            components={k: a(v, dtype=float) for k, v in d["components"].items()},
            covariates={k: a(v) for k, v in d["covariates"].items()},
            B=a(d["B"], dtype=float), Sigma=a(d["Sigma"], dtype=float),
            generator_params=d["generator_params"], model_config=d.get("model_config", {}),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def _counts(H, depth, rng):
    Pi = alr_inv(H)
    depth = np.broadcast_to(np.asarray(depth, dtype=np.int64), (H.shape[1],))
    return rng.multinomial(depth, Pi.T).T


def _mn_draw(Gamma, Sigma, rng):
    L_S = cholesky_jittered(Sigma)
    L_G = cholesky_jittered(Gamma)
    return sample_matrix_normal_factored(np.zeros((Sigma.shape[0], Gamma.shape[0])), L_S, L_G, rng)


def _hyper(value, bounds=(1e-2, 1e2)):
    return {"value": float(value), "free": False, "bounds": list(bounds)}


def simulate_sim1(D=4, N=600, seed=0, depth=5000, variant="nonlinear_trend", noisy=False,
                  batch_effect=3.0, intercept=2.7, fit_prior="default"):
    """Simulation 1 generator.

    Parameters
    ----------
    D, N : int
        Taxa and samples; ``t = 1..N``.
    seed : int
    depth : int or array
        Sequencing depth per sample.
    variant : {"nonlinear_trend", "linear_trend"}
        The linear variant replaces the squared-exponential trend kernel with
        ``20^2 + (t - c)(t' - c)``, ``c`` the midpoint of the time grid.
    noisy : bool
        Draw ``H ~ MN(F, Sigma, I)`` instead of ``H = F``.
    fit_prior : {"default", "matched"}
        Priors in ``model_config``. ``"default"`` uses ``B`` prior mean
        ``(2.7, 1)`` and ``Xi = I``; ``"matched"`` centres ``B`` on its
        generating value and sets ``Xi`` so the prior mean of ``Sigma`` equals
        the generating ``Sigma``.

    Returns
    -------
    SimTruth
    """
    if D < 3 or N < 10:
        raise InvalidDimensions(f"simulation 1 needs D >= 3 and N >= 10, got D={D}, N={N}")
    if variant not in ("nonlinear_trend", "linear_trend"):
        raise ValueError(f"unknown variant {variant!r}")
    if fit_prior not in ("default", "matched"):
        raise ValueError(f"unknown fit_prior {fit_prior!r}")
    rng = np.random.default_rng(seed)
    P = D - 1
    t = np.arange(1, N + 1, dtype=float)
    batch = (np.arange(N) >= N // 2).astype(float)
    Sigma = _equicorrelated(P, 1.5, 0.9)

    per = Periodic(4.0, 30.0, 25.0)
    if variant == "nonlinear_trend":
        trend = SquaredExponential(1.0, 30.0)
    else:
        trend = Linear(20.0**2, float(0.5 * (t[0] + t[-1])))
    f_per = _mn_draw(kernel_matrix(per, t), Sigma, rng)
    f_trend = _mn_draw(kernel_matrix(trend, t), Sigma, rng)
    X = np.vstack([np.ones(N), batch])
    B = np.tile([intercept, batch_effect], (P, 1))
    lin = B @ X
    F = lin + f_per + f_trend
    H = F + _mn_draw(np.eye(N), Sigma, rng) if noisy else F.copy()
    Y = _counts(H, depth, rng)

    if variant == "nonlinear_trend":
        trend_cfg = {"type": "se", "sigma2": "sigma_trend", "rho": "rho_trend"}
        trend_hyper = {"sigma_trend": _hyper(1.0), "rho_trend": _hyper(30.0, (1.0, 1e3))}
    else:
        trend_cfg = {"type": "linear", "c": "c_trend", "offset": trend.offset}
        trend_hyper = {"c_trend": _hyper(400.0, (1.0, 1e4))}
    zeta = D + 5
    if fit_prior == "default":
        prior_mean, xi = [intercept, 1.0], 1.0
    else:
        prior_mean, xi = [intercept, batch_effect], ((zeta - P - 1) * Sigma).tolist()
    config = {
        "linear": {"intercept": True, "covariates": ["batch"],
                   "prior_mean": prior_mean, "prior_cov": 1.0},
        "components": [
            {"name": "periodic", "covariates": ["time"],
             "kernel": {"type": "periodic", "sigma": "sigma_period", "rho": "rho_period",
                        "period": "period"}},
            {"name": "trend", "covariates": ["time"], "kernel": trend_cfg},
        ],
        "hyperparameters": {
            "sigma_period": _hyper(4.0), "rho_period": _hyper(30.0, (1.0, 1e3)),
            "period": _hyper(25.0, (2.0, 1e3)), **trend_hyper,
        },
        "sigma_prior": {"xi": xi, "zeta": zeta},
        "identification": "center",
    }
    params = {
        "simulation": "sim1", "fit_prior": fit_prior, "D": D, "N": N, "seed": seed, "depth": depth,
        "variant": variant, "noisy": noisy, "intercept": intercept, "batch_effect": batch_effect,
        "sigma": {"diag": 1.5, "offdiag": 0.9},
        "periodic": {"sigma": 4.0, "rho": 30.0, "period": 25.0},
        "trend": ({"sigma2": 1.0, "rho": 30.0} if variant == "nonlinear_trend"
                  else {"c": 400.0, "offset": trend.offset}),
    }
    return SimTruth(Y=Y, H_true=H, F_true=F,
                    components={"linear": lin, "periodic": f_per, "trend": f_trend},
                    covariates={"time": t, "batch": batch}, B=B, Sigma=Sigma,
                    generator_params=params, model_config=config)


def simulate_sim2(seed=0, depth=5000, m=0.0, s=0.5, alpha=2.0, literal_warp=False):
    """Simulation 2 generator (``D = 3``, ``N = 50``).

    ``t`` is ``1..50`` standardized to mean 0 and unit SD; the non-stationary
    component is a function of ``w = warp_skewed_gaussian(t, m, s, alpha)``.
    """
    rng = np.random.default_rng(seed)
    D, N = 3, 50
    P = D - 1
    t_raw = np.arange(1, N + 1, dtype=float)
    t = (t_raw - t_raw.mean()) / t_raw.std()
    w = warp_skewed_gaussian(t, m, s, alpha, literal_warp)
    batch = (np.arange(N) >= N // 2).astype(float)
    Sigma = _equicorrelated(P, 1.0, 0.5)
    f_ns = _mn_draw(kernel_matrix(SquaredExponential(2.0, 3.0), w), Sigma, rng)
    f_trend = _mn_draw(kernel_matrix(SquaredExponential(1.0, 0.5), t), Sigma, rng)
    X = np.vstack([np.ones(N), batch])
    B = np.tile([0.4, 1.0], (P, 1))
    lin = B @ X
    F = lin + f_ns + f_trend
    H = F.copy()
    Y = _counts(H, depth, rng)
    config = {
        "linear": {"intercept": True, "covariates": ["batch"], "prior_mean": [0.4, 1.0],
                   "prior_cov": 1.0},
        "components": [
            {"name": "nonstationary", "covariates": ["time"],
             "kernel": {"type": "warped_se", "sigma2": 2.0, "rho": 3.0, "m": m, "s": s,
                        "alpha": alpha, "literal": literal_warp}},
            {"name": "trend", "covariates": ["time"],
             "kernel": {"type": "se", "sigma2": 1.0, "rho": 0.5}},
        ],
        "sigma_prior": {"xi": 1.0, "zeta": D + 5},
        "identification": "center",
    }
    params = {
        "simulation": "sim2", "D": D, "N": N, "seed": seed, "depth": depth,
        "warp": {"m": m, "s": s, "alpha": alpha, "literal": literal_warp},
        "sigma": {"diag": 1.0, "offdiag": 0.5},
        "time": "standardized 1..50",
    }
    return SimTruth(Y=Y, H_true=H, F_true=F,
                    components={"linear": lin, "nonstationary": f_ns, "trend": f_trend},
                    covariates={"time": t, "batch": batch, "w": w}, B=B, Sigma=Sigma,
                    generator_params=params, model_config=config)


# -- coverage -----------------------------------------------------------------

def credible_interval(draws, level):
    """Equal-tailed interval over the leading (draw) axis."""
    draws = np.asarray(draws, dtype=float)
    a = 0.5 * (1.0 - level)
    lo, hi = np.quantile(draws, [a, 1.0 - a], axis=0)
    return lo, hi


def coverage(draws, truth, level=0.95):
    """Fraction of points whose equal-tailed interval contains the truth.

    Parameters
    ----------
    draws : (S, ...) array
    truth : array with shape ``draws.shape[1:]``
    """
    draws = np.asarray(draws, dtype=float)
    if draws.shape[0] < 2:
        raise InsufficientDraws(f"coverage needs at least 2 draws, got {draws.shape[0]}")
    truth = np.asarray(truth, dtype=float)
    if truth.shape != draws.shape[1:]:
        raise InvalidDimensions(f"truth shape {truth.shape} does not match draws {draws.shape[1:]}")
    lo, hi = credible_interval(draws, level)
    return float(np.mean((truth >= lo) & (truth <= hi)))


def coverage_ratio(multi, naddgp):
    """``log2(multi / naddgp)``; +inf when only the baseline is zero, 0 when both are."""
    if naddgp <= 0:
        return 0.0 if multi <= 0 else float("inf")
    if multi <= 0:
        return float("-inf")
    return float(np.log2(multi / naddgp))


def component_coverages(draws, truth, level=0.95):
    """Coverage of each centered component and of ``F`` at the observed points."""
    N = truth.N
    centered = truth.centered_components()
    out = {}
    if draws.centered:
        est = {"linear": draws.linear, **draws.components}
        for name, tv in centered.items():
            out[name] = coverage(est[name][:, :, :N], tv, level)
    else:
        out["linear"] = coverage(draws.linear[:, :, :N], truth.components["linear"], level)
        for name, f in draws.components.items():
            out[name] = coverage(f[:, :, :N], truth.components[name], level)
    out["F"] = coverage(draws.F[:, :, :N], truth.F_true, level)
    return out


def run_coverage_cell(D, N, seed, S=500, depth=5000, variant="linear_trend", level=0.95,
                      fit_prior="matched", noisy=False):
    """Fit both pipelines to one simulated data set and compare coverage.

    Both pipelines receive the same counts, model and evaluation points;
    only the handling of ``H`` differs.
    """
    from .uncollapse import run_cu_sampler, run_naddgp_baseline

    t0 = time.perf_counter()
    truth = simulate_sim1(D=D, N=N, seed=seed, depth=depth, variant=variant,
                          fit_prior=fit_prior, noisy=noisy)
    model = truth.model()
    ss = np.random.SeedSequence(seed)
    rng_multi, rng_base = (np.random.default_rng(s) for s in ss.spawn(2))
    multi = run_cu_sampler(truth.Y, model, None, S, rng_multi)
    base = run_naddgp_baseline(truth.Y, model, None, S, rng_base)
    cm = component_coverages(multi, truth, level)
    cb = component_coverages(base, truth, level)
    rows = []
    for name in cm:
        rows.append({
            "D": D, "N": N, "seed": seed, "component": name,
            "coverage_multi": cm[name], "coverage_naddgp": cb[name],
            "log2_ratio": coverage_ratio(cm[name], cb[name]),
        })
    elapsed = time.perf_counter() - t0
    for r in rows:
        r["seconds"] = elapsed
    return rows


def run_sweep(Ds=(3, 10), Ns=(50, 200), n_seeds=3, master_seed=2024, S=500, depth=5000,
              variant="linear_trend", level=0.95, fit_prior="matched", noisy=False):
    """Coverage sweep over a ``D x N`` grid with ``n_seeds`` replicates.

    Cell seeds come from ``SeedSequence(master_seed).spawn(len(Ds) * len(Ns) * n_seeds)``
    in row-major (D, N, replicate) order; each child's first state word is the
    simulation seed.
    """
    cells = [(D, N, r) for D in Ds for N in Ns for r in range(n_seeds)]
    children = np.random.SeedSequence(master_seed).spawn(len(cells))
    rows = []
    for (D, N, r), child in zip(cells, children):
        seed = int(child.generate_state(1)[0])
        for row in run_coverage_cell(D, N, seed, S, depth, variant, level, fit_prior, noisy):
            row["replicate"] = r
            rows.append(row)
    return rows


def summarize_sweep(rows):
    """Per ``(D, N, component)``: mean coverage over replicates and their log2 ratio."""
    groups = {}
    for r in rows:
        groups.setdefault((r["D"], r["N"], r["component"]), []).append(r)
    out = []
    for (D, N, comp), rs in groups.items():
        cm = float(np.mean([r["coverage_multi"] for r in rs]))
        cb = float(np.mean([r["coverage_naddgp"] for r in rs]))
        out.append({"D": D, "N": N, "component": comp, "replicates": len(rs),
                    "coverage_multi": cm, "coverage_naddgp": cb,
                    "log2_ratio": coverage_ratio(cm, cb)})
    return out
