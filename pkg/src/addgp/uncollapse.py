"""Uncollapse step: ``(Sigma, F) | H`` and back-sampling of ``(B, f_1..f_K) | F, Sigma``.

All column covariances in the conditional chain depend only on the model and
the evaluation grid, never on the draw, so :class:`UncollapsePlan` factors
them once and every draw costs a few matrix products. Draws are processed as
stacks with a leading draw axis.

Conditionals used (``E = H - M``, ``A`` the collapsed column scale):

* ``Sigma | H ~ IW(Xi + E A^{-1} E^T, zeta + N)``
* ``F* | H, Sigma ~ MN(Theta* + E A^{-1} Gamma_{o*}, Sigma, Gamma_** - Gamma_{*o} A^{-1} Gamma_{o*})``
  over the evaluation points (observed samples first, then the grid).
* ``B | F, Sigma`` and ``f_k | F, B, f_{<k}, Sigma`` from the conjugate
  matrix-normal update in covariance (Woodbury) form; ``f_K`` is the
  remainder, so ``F = B X* + sum_k f_k`` holds by construction.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import linalg

from .collapsed import CollapsedPosterior, collapse, laplace_sample, map_estimate
from .errors import DegenerateResidualCovariance, NotFactorizable
from .matvar import chol_solve, cholesky_jittered, sample_inverse_wishart_factored
from .model import EvaluationGrid, compose_design_covariance
from .transforms import naddgp_transform

log = logging.getLogger(__name__)


@dataclass
class JointDraw:
    H: np.ndarray
    Sigma: np.ndarray
    F: np.ndarray
    B: np.ndarray
    f: list


@dataclass
class PosteriorDraws:
    """Stacked joint draws; leading axis indexes draws.

    ``components`` maps component name to an ``(S, P, N*)`` array over the
    evaluation points. ``offset`` holds centering shifts that could not be
    absorbed by an intercept column (``(S, P)``), else None.
    """

    H: np.ndarray
    Sigma: np.ndarray
    F: np.ndarray
    B: np.ndarray
    components: Dict[str, np.ndarray]
    x_eval: np.ndarray
    n_observed: int
    method: str = "cu"
    centered: bool = False
    offset: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def S(self):
        return self.H.shape[0]

    @property
    def linear(self):
        """``B X*`` per draw, shape ``(S, P, N*)``."""
        return self.B @ self.x_eval

    def draw(self, s):
        return JointDraw(self.H[s], self.Sigma[s], self.F[s], self.B[s],
                         [c[s] for c in self.components.values()])

    def reconstruction_residual(self):
        """``F - B X* - sum_k f_k - offset`` per draw, in the back-sampling order."""
        R = self.F - self.linear
        for c in self.components.values():
            R = R - c
        if self.offset is not None:
            R = R - self.offset[:, :, None]
        return R


def _chol_psd(C, what, ref_scale=None):
    """Square factor ``L`` with ``L L^T = C`` for a PSD covariance.

    Falls back to a clipped eigen-factor when ``C`` is (numerically) rank
    deficient, e.g. a component fully determined by the others.
    """
    C = 0.5 * (C + C.T)
    try:
        return cholesky_jittered(C)
    except NotFactorizable as exc:
        w, V = np.linalg.eigh(C)
        ref = ref_scale if ref_scale is not None else max(np.max(np.abs(w)), 1e-300)
        if w.min() < -1e-8 * ref:
            raise DegenerateResidualCovariance(f"{what}: {exc}") from exc
        return V * np.sqrt(np.clip(w, 0.0, None))


def _mn_noise(L_sigma, Z, L_col):
    """``L_sigma Z L_col^T`` for stacks ``L_sigma (S,P,P)`` and ``Z (S,P,n)``."""
    if L_col.shape[0] == 0:
        return np.zeros(Z.shape)
    return (L_sigma @ Z) @ L_col.T


class UncollapsePlan:
    """Precomputed gains and factors for the uncollapse chain.

    Parameters
    ----------
    model : ModelSpec
    grid : EvaluationGrid, optional
        Extra evaluation points appended after the observed samples.
    """

    def __init__(self, model, grid=None):
        self.model = model
        if grid is None:
            grid = EvaluationGrid.empty(model)
        self.grid = grid
        N, P, K = model.N, model.P, model.K
        Xs, Zs = model.eval_points(grid)
        self.x_eval, self.z_eval = Xs, Zs
        Ns = Xs.shape[1]
        self.N, self.N_eval, self.P, self.K = N, Ns, P, K

        # prior pieces over the evaluation set
        self.gamma_lin = model.linear_cov(Xs, Xs)
        self.gamma_k = [model.component_cov(k, Zs[k]) for k in range(K)]
        G = self.gamma_lin + sum(self.gamma_k, np.zeros((Ns, Ns)))
        self.theta_star = model.prior_mean(Xs, Zs)
        self.theta_k = [model.component_mean(k) for k in range(K)]

        # collapsed pieces at observed points (identical to compose_design_covariance)
        A, M = compose_design_covariance(model)
        self.A, self.M = A, M
        self.L_A = cholesky_jittered(A)
        self.L_xi = cholesky_jittered(model.xi)
        G_os = G[:N]  # (N, N*)
        self.gamma_os = G_os
        cov_F = G - G_os.T @ chol_solve(self.L_A, G_os)
        self.L_F = _chol_psd(cov_F, "conditional covariance of F", np.max(np.abs(np.diag(G))))

        # B step: F - sum theta_k = B X* + noise, noise col cov sum_k Gamma_k
        Q0 = model.Q0
        self.Q0 = Q0
        if Q0 > 0:
            resid = sum(self.gamma_k, np.zeros((Ns, Ns)))
            ZX = model.gamma0 @ Xs  # (Q0, N*)
            try:
                L = cholesky_jittered(Xs.T @ ZX + resid)
            except NotFactorizable as exc:
                raise DegenerateResidualCovariance(f"B step: {exc}") from exc
            self.gain_B = chol_solve(L, ZX.T)  # (N*, Q0)
            self.L_B = _chol_psd(model.gamma0 - ZX @ self.gain_B, "B posterior covariance",
                                 np.max(np.abs(np.diag(model.gamma0))))
        else:
            self.gain_B = np.zeros((Ns, 0))
            self.L_B = np.zeros((0, 0))

        # f_k steps, k < K: prior Gamma_k, residual Gamma*_k = sum_{j>k} Gamma_j
        self.gain_f, self.L_f = [], []
        for k in range(K - 1):
            rest = sum(self.gamma_k[k + 1:], np.zeros((Ns, Ns)))
            try:
                L = cholesky_jittered(self.gamma_k[k] + rest)
            except NotFactorizable as exc:
                raise DegenerateResidualCovariance(
                    f"residual covariance after component {model.components[k].name!r}: {exc}"
                ) from exc
            gain = chol_solve(L, self.gamma_k[k])  # (Gamma_k + Gamma*)^{-1} Gamma_k
            self.gain_f.append(gain)
            self.L_f.append(_chol_psd(
                self.gamma_k[k] - self.gamma_k[k] @ gain,
                f"posterior covariance of {model.components[k].name!r}",
                ref_scale=np.max(np.abs(np.diag(self.gamma_k[k]))),
            ))

    # -- conditional chain --------------------------------------------------
    def sample_sigma_f(self, H, rng):
        """Draw ``(Sigma, F*)`` for each ``H`` in a ``(S, P, N)`` stack."""
        H = np.asarray(H, dtype=float)
        S, P, N = H.shape
        E = H - self.M
        EAi = chol_solve(self.L_A, E.reshape(S * P, N).T).T.reshape(S, P, N)
        scale = self.model.xi + EAi @ E.transpose(0, 2, 1)
        dof = self.model.zeta + N
        Sigma = np.empty((S, P, P))
        for s in range(S):
            L = cholesky_jittered(0.5 * (scale[s] + scale[s].T))
            Sigma[s] = sample_inverse_wishart_factored(L, dof, rng)
        L_sigma = np.linalg.cholesky(Sigma)
        mean = self.theta_star + EAi @ self.gamma_os
        F = mean + _mn_noise(L_sigma, rng.standard_normal((S, P, self.N_eval)), self.L_F)
        return Sigma, F, L_sigma

    def conditional_unobserved(self, F_obs):
        """Mean and column covariance of ``F^u | F^o`` (cross-covariance form).

        ``Theta^u + (F^o - Theta^o) Gamma_oo^{-1} Gamma_ou`` and
        ``Gamma_uu - Gamma_uo Gamma_oo^{-1} Gamma_ou``, with a jittered
        ``Gamma_oo``. Used for checking; sampling uses the joint form.
        """
        N = self.N
        G = self.gamma_lin + sum(self.gamma_k, np.zeros((self.N_eval, self.N_eval)))
        L = cholesky_jittered(G[:N, :N])
        W = chol_solve(L, G[:N, N:])
        mean = self.theta_star[:, N:] + (F_obs - self.theta_star[:, :N]) @ W
        return mean, G[N:, N:] - G[N:, :N] @ W

    def back_sample(self, F, L_sigma, rng):
        """Draw ``B`` and ``f_1..f_K`` for stacks ``F (S, P, N*)``.

        ``L_sigma`` holds lower Cholesky factors of the ``Sigma`` draws.
        Returns ``(B, [f_1, ..., f_K])``.
        """
        S, P, Ns = F.shape
        Xs = self.x_eval
        theta_sum = sum(self.theta_k, np.zeros(P))[:, None]
        if self.Q0 > 0:
            T0 = self.model.theta0
            R = F - theta_sum - T0 @ Xs
            B = T0 + R @ self.gain_B
            B = B + _mn_noise(L_sigma, rng.standard_normal((S, P, self.Q0)), self.L_B)
            resid = F - B @ Xs
        else:
            B = np.zeros((S, P, 0))
            resid = F - B @ Xs
        fs = []
        for k in range(self.K - 1):
            rest = sum(self.theta_k[k + 1:], np.zeros(P))[:, None]
            th = self.theta_k[k][:, None]
            mean = th + (resid - rest - th) @ self.gain_f[k]
            fk = mean + _mn_noise(L_sigma, rng.standard_normal((S, P, Ns)), self.L_f[k])
            fs.append(fk)
            resid = resid - fk
        if self.K > 0:
            fs.append(resid)
        return B, fs


def sample_sigma_f(H, model, grid, rng, plan=None):
    """One conditional draw of ``(Sigma, F*)`` given a single ``H``."""
    plan = plan or UncollapsePlan(model, grid)
    Sigma, F, _ = plan.sample_sigma_f(np.asarray(H)[None], rng)
    return Sigma[0], F[0]


def back_sample(F, Sigma, model, grid, rng, plan=None):
    """One back-sampling draw of ``(B, [f_1..f_K])`` given ``(F*, Sigma)``."""
    plan = plan or UncollapsePlan(model, grid)
    L = np.linalg.cholesky(np.asarray(Sigma))[None]
    B, fs = plan.back_sample(np.asarray(F)[None], L, rng)
    return B[0], [f[0] for f in fs]


def center_sum_to_zero(components, B=None, intercept_row=None):
    """Subtract each component's mean over evaluation points.

    Parameters
    ----------
    components : dict of name -> (S, P, N*) arrays
    B : (S, P, Q0) array, optional
    intercept_row : int, optional
        Row of the design that is all ones; the removed means are added to
        that column of ``B``.

    Returns
    -------
    centered : dict
    B : array or None
        Copy of ``B`` with the shift absorbed (when an intercept exists).
    offset : (S, P) array or None
        Total removed shift when there is no intercept to absorb it.
    """
    centered, total = {}, None
    for name, f in components.items():
        m = f.mean(axis=-1, keepdims=True)
        centered[name] = f - m
        total = m[..., 0] if total is None else total + m[..., 0]
    if total is None:
        return centered, B, None
    if B is not None and intercept_row is not None:
        B = B.copy()
        B[..., intercept_row] += total
        return centered, B, None
    return centered, B, total


def _uncollapse(H, model, grid, rng, center, method, diagnostics, timings):
    t0 = time.perf_counter()
    plan = UncollapsePlan(model, grid)
    timings["plan"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    Sigma, F, L_sigma = plan.sample_sigma_f(H, rng)
    timings["sigma_f"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    B, fs = plan.back_sample(F, L_sigma, rng)
    comps = {c.name: f for c, f in zip(model.components, fs)}
    offset = None
    if center and model.identification == "center" and comps:
        ir = model.intercept_row
        if ir is not None and grid is not None and grid.n_unobserved and not np.all(grid.x[ir] == 1.0):
            ir = None
        comps, B, offset = center_sum_to_zero(comps, B, ir)
    timings["back_sample"] = time.perf_counter() - t0
    return PosteriorDraws(
        H=H, Sigma=Sigma, F=F, B=B, components=comps, x_eval=plan.x_eval,
        n_observed=model.N, method=method, centered=bool(center and model.identification == "center"),
        offset=offset, diagnostics=diagnostics, timings=timings,
    )


def run_cu_sampler(Y, model, grid=None, S=1000, rng=None, center=True, map_opts=None, init=None):
    """Collapse-uncollapse sampler.

    Collapse, find the MAP once, draw ``S`` Laplace samples of ``H``, then
    draw ``(Sigma, F)`` and back-sample the components for each.

    Returns
    -------
    PosteriorDraws
        ``diagnostics`` records MAP iterations, gradient norm and jitter.
    """
    rng = rng if rng is not None else np.random.default_rng()
    timings = {}
    t0 = time.perf_counter()
    ltp = collapse(model)
    post = CollapsedPosterior(Y, ltp, model.reference)
    mres = map_estimate(Y, ltp, init=init, posterior=post, **(map_opts or {}))
    timings["map"] = time.perf_counter() - t0
    log.info("MAP: %d iterations, |grad|=%.3g, converged=%s",
             mres.iterations, mres.grad_norm, mres.converged)
    t0 = time.perf_counter()
    H = laplace_sample(mres, S, rng)
    timings["laplace"] = time.perf_counter() - t0
    diagnostics = {
        "map_iterations": mres.iterations,
        "map_newton_steps": mres.newton_steps,
        "map_grad_norm": mres.grad_norm,
        "map_converged": mres.converged,
        "map_neg_log_post": mres.neg_log_post,
        "hessian_jitter": mres.hessian_jitter,
    }
    return _uncollapse(H, model, grid, rng, center, "cu", diagnostics, timings)


def run_naddgp_baseline(Y, model, grid=None, S=1000, rng=None, center=True):
    """Baseline that fixes ``H`` at the pseudocounted ALR of ``Y`` for every draw."""
    rng = rng if rng is not None else np.random.default_rng()
    H0 = naddgp_transform(Y, model.reference)
    H = np.broadcast_to(H0, (S,) + H0.shape).copy()
    return _uncollapse(H, model, grid, rng, center, "naddgp", {}, {})
