"""Collapsed-form inference over the latent log-ratios ``H``.

After integrating out the linear and nonlinear terms and ``Sigma`` the model
is a latent matrix-t process:

    Y_n ~ Multinomial(alr_inv(H_n)),   H ~ T(nu, M, V, A)

with ``nu = zeta``, ``V = Xi``, ``M = Theta0 X + sum_k theta_k`` and
``A = X^T Gamma0 X + sum_k K_k + I``. This module evaluates the negative log
posterior of ``H`` with its closed-form gradient and Hessian, finds the MAP,
draws from the Laplace approximation and evaluates the Laplace estimate of
the log marginal likelihood.

``vec`` is column-major throughout: element ``H[p, n]`` sits at ``p + P n``.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, optimize
from scipy.special import gammaln, logsumexp, multigammaln

from .errors import DimensionMismatch, HessianNotPD, MapFailed, MaxIterationsExceeded
from .matvar import chol_logdet, chol_solve, cholesky_jittered
from .model import compose_design_covariance
from .transforms import augment, naddgp_transform, _ref_index

#: dense Hessians beyond this many latent coordinates are refused
MAX_DENSE = 6000


@dataclass(frozen=True)
class LtpParams:
    nu: float
    mean: np.ndarray
    row_scale: np.ndarray
    col_scale: np.ndarray


@dataclass
class MapResult:
    h_hat: np.ndarray
    neg_log_post: float
    grad_norm: float
    iterations: int
    hessian_factor: Optional[np.ndarray]
    converged: bool
    hessian_jitter: float = 0.0
    newton_steps: int = 0
    trace: list = field(default_factory=list, repr=False)


def collapse(model):
    """Matrix-t parameters of the collapsed model at the observed samples."""
    A, M = compose_design_covariance(model)
    if model.xi.shape != (model.P, model.P):
        raise DimensionMismatch(f"Xi must be {model.P}x{model.P}")
    return LtpParams(nu=model.zeta, mean=M, row_scale=model.xi, col_scale=A)


def multinomial_log_coef(Y):
    """``sum_n log(lambda_n! / prod_d y_dn!)``, dropped from the objective."""
    Y = np.asarray(Y, dtype=float)
    return float(np.sum(gammaln(Y.sum(axis=0) + 1)) - np.sum(gammaln(Y + 1)))


class CollapsedPosterior:
    """Negative log posterior of ``H`` given counts, with derivatives.

    Factorizations of ``A`` and ``V`` are computed once; every method takes
    ``H`` either as a ``(P, N)`` matrix or as its column-major vec.

    Parameters
    ----------
    Y : (D, N) array of counts
    ltp : LtpParams
    ref : int, optional
        ALR reference taxon (zero-based, default last).
    """

    def __init__(self, Y, ltp, ref=None):
        Y = np.asarray(Y, dtype=float)
        self.Y = Y
        self.ltp = ltp
        D, N = Y.shape
        P = D - 1
        if ltp.mean.shape != (P, N) or ltp.col_scale.shape != (N, N) or ltp.row_scale.shape != (P, P):
            raise DimensionMismatch(
                f"counts are {D}x{N} but LTP mean is {ltp.mean.shape}, "
                f"A {ltp.col_scale.shape}, V {ltp.row_scale.shape}"
            )
        if np.any(Y < 0):
            raise ValueError("counts must be nonnegative")
        self.P, self.N, self.D = P, N, D
        self.ref = _ref_index(ref, D)
        self.keep = np.delete(np.arange(D), self.ref)
        self.Yk = Y[self.keep]
        self.totals = Y.sum(axis=0)
        self.L_A = cholesky_jittered(ltp.col_scale)
        self.L_V = cholesky_jittered(ltp.row_scale)
        self.delta = 0.5 * (ltp.nu + N)
        self._prior_const = (
            multigammaln(self.delta, P)
            - multigammaln(0.5 * ltp.nu, P)
            - 0.5 * P * N * np.log(np.pi)
            - 0.5 * P * chol_logdet(self.L_A)
            + 0.5 * ltp.nu * chol_logdet(self.L_V)
        )
        self._A_inv = None

    # -- helpers ------------------------------------------------------------
    def as_matrix(self, h):
        h = np.asarray(h, dtype=float)
        if h.ndim == 1:
            return h.reshape(self.N, self.P).T
        return h

    @staticmethod
    def vec(H):
        return np.asarray(H).T.reshape(-1)

    def _probs(self, H):
        eta = augment(H, self.ref)
        lse = logsumexp(eta, axis=0)
        return eta, lse

    def _prior_parts(self, H):
        E = H - self.ltp.mean
        C = chol_solve(self.L_A, E.T)  # A^{-1} E^T, (N, P)
        Q = self.ltp.row_scale + E @ C
        Q = 0.5 * (Q + Q.T)
        L_Q = linalg.cholesky(Q, lower=True, check_finite=False)
        return E, C, L_Q

    # -- objective pieces ---------------------------------------------------
    def neg_log_lik(self, h):
        """Multinomial negative log likelihood without the multinomial coefficient."""
        H = self.as_matrix(h)
        eta, lse = self._probs(H)
        return float(-(np.sum(self.Y * eta) - np.sum(self.totals * lse)))

    def neg_log_prior(self, h):
        """Matrix-t negative log density (normalizing constant included)."""
        H = self.as_matrix(h)
        _, _, L_Q = self._prior_parts(H)
        return float(self.delta * chol_logdet(L_Q) - self._prior_const)

    def value(self, h):
        return self.neg_log_lik(h) + self.neg_log_prior(h)

    def value_and_grad(self, h):
        H = self.as_matrix(h)
        eta, lse = self._probs(H)
        nll = -(np.sum(self.Y * eta) - np.sum(self.totals * lse))
        pi = np.exp(eta - lse)
        g_lik = -(self.Yk - self.totals * pi[self.keep])
        E, C, L_Q = self._prior_parts(H)
        R = chol_solve(L_Q, np.eye(self.P))
        g_prior = 2.0 * self.delta * (R @ C.T)
        f = nll + self.delta * chol_logdet(L_Q) - self._prior_const
        return float(f), self.vec(g_lik + g_prior)

    def gradient(self, h):
        return self.value_and_grad(h)[1]

    def grad_lik(self, h):
        """Likelihood gradient via the ``y - lambda * pi`` form."""
        H = self.as_matrix(h)
        eta, lse = self._probs(H)
        pi = np.exp(eta - lse)
        return self.vec(-(self.Yk - self.totals * pi[self.keep]))

    def grad_lik_ratio_form(self, h):
        """Likelihood gradient as ``vec(Y) - vec(1 1^T Y) * J``.

        ``J = exp(H) / (1 + sum exp(H))`` columnwise, i.e. the non-reference
        softmax probabilities; used to cross-check :meth:`grad_lik`.
        """
        H = self.as_matrix(h)
        m = np.maximum(H.max(axis=0), 0.0)
        e = np.exp(H - m)
        J = e / (np.exp(-m) + e.sum(axis=0))
        totals = np.ones((1, self.D)) @ self.Y
        return -(self.vec(self.Yk) - self.vec(np.repeat(totals, self.P, axis=0)) * self.vec(J))

    def grad_prior(self, h):
        H = self.as_matrix(h)
        _, C, L_Q = self._prior_parts(H)
        R = chol_solve(L_Q, np.eye(self.P))
        return self.vec(2.0 * self.delta * (R @ C.T))

    def hessian_lik(self, h):
        """Block-diagonal likelihood Hessian, one ``P x P`` block per sample."""
        H = self.as_matrix(h)
        P, N = self.P, self.N
        eta, lse = self._probs(H)
        pi = np.exp(eta - lse)[self.keep]  # (P, N)
        blocks = self.totals[:, None, None] * (
            pi.T[:, :, None] * np.eye(P)[None] - pi.T[:, :, None] * pi.T[:, None, :]
        )
        Hm = np.zeros((N * P, N * P))
        for n in range(N):
            s = slice(n * P, (n + 1) * P)
            Hm[s, s] = blocks[n]
        return Hm

    def hessian_prior(self, h):
        """Hessian of the matrix-t negative log density.

        ``2 delta [A^{-1} (x) R - (C R C^T) (x) R - (C R (x) R C^T) T]`` with
        ``R = (V + E A^{-1} E^T)^{-1}``, ``C = A^{-1} E^T``, ``delta =
        (nu + N) / 2`` and ``T`` the commutation permutation
        (``T vec(E) = vec(E^T)``), applied by index reordering.
        """
        H = self.as_matrix(h)
        P, N = self.P, self.N
        _, C, L_Q = self._prior_parts(H)
        R = chol_solve(L_Q, np.eye(P))
        if self._A_inv is None:
            self._A_inv = chol_solve(self.L_A, np.eye(N))
        CR = C @ R  # (N, P)
        CRC = CR @ C.T  # (N, N)
        # 4-d layout [n, p, m, q] reshapes to rows p + P n, columns q + P m
        t1 = (self._A_inv - CRC)[:, None, :, None] * R[None, :, None, :]
        t3 = CR.T[None, :, :, None] * CR[:, None, None, :]  # (RC^T)[p, m] (CR)[n, q]
        Hm = 2.0 * self.delta * (t1 - t3).reshape(N * P, N * P)
        return 0.5 * (Hm + Hm.T)

    def hessian(self, h):
        if self.N * self.P > MAX_DENSE:
            raise MemoryError(
                f"dense Hessian of size {self.N * self.P} exceeds the limit {MAX_DENSE}"
            )
        return self.hessian_lik(h) + self.hessian_prior(h)


def neg_log_posterior(H, Y, ltp, ref=None):
    return CollapsedPosterior(Y, ltp, ref).value(H)


def gradient(H, Y, ltp, ref=None):
    return CollapsedPosterior(Y, ltp, ref).gradient(H)


def hessian(H, Y, ltp, ref=None):
    return CollapsedPosterior(Y, ltp, ref).hessian(H)


def _newton_polish(post, h, f, g, tol, max_steps=50):
    """Damped Newton steps with the analytic Hessian until ``|g|_inf < tol``."""
    steps = 0
    while np.max(np.abs(g)) >= tol and steps < max_steps:
        L = cholesky_jittered(post.hessian(h))
        step = chol_solve(L, g)
        t = 1.0
        improved = False
        while t > 1e-10:
            h_new = h - t * step
            f_new, g_new = post.value_and_grad(h_new)
            if np.isfinite(f_new) and (f_new <= f or np.max(np.abs(g_new)) < np.max(np.abs(g))):
                improved = True
                break
            t *= 0.5
        steps += 1
        if not improved:
            break
        h, f, g = h_new, f_new, g_new
    return h, f, g, steps


def map_estimate(Y, ltp, init=None, tol=1e-6, maxiter=10_000, maxcor=10, ref=None,
                 posterior=None, polish=True):
    """MAP of ``H`` by L-BFGS, followed by Newton polishing.

    Parameters
    ----------
    Y : (D, N) counts
    ltp : LtpParams
    init : (D-1, N) array, optional
        Starting point; defaults to the pseudocounted ALR of ``Y``.
    tol : float
        Target sup-norm of the gradient.
    posterior : CollapsedPosterior, optional
        Reuse precomputed factorizations.

    Returns
    -------
    MapResult
        ``converged`` is False (with a :class:`MaxIterationsExceeded`
        warning) when the tolerance is not met; the best iterate is kept.
    """
    post = posterior if posterior is not None else CollapsedPosterior(Y, ltp, ref)
    if init is None:
        init = naddgp_transform(post.Y, post.ref)
    h0 = post.vec(np.asarray(init, dtype=float))
    trace = []

    def fun(h):
        f, g = post.value_and_grad(h)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(g)
        return f, g

    res = optimize.minimize(
        fun, h0, jac=True, method="L-BFGS-B",
        callback=lambda xk: trace.append(post.value(xk)),
        options={"maxcor": maxcor, "gtol": tol, "ftol": 1e-15, "maxiter": maxiter,
                 "maxfun": 2 * maxiter},
    )
    h = res.x
    f, g = post.value_and_grad(h)
    if not np.isfinite(f):
        raise MapFailed("L-BFGS ended at a non-finite objective")
    steps = 0
    if polish and post.N * post.P <= MAX_DENSE:
        h, f, g, steps = _newton_polish(post, h, f, g, tol)
    grad_norm = float(np.max(np.abs(g)))
    converged = grad_norm < tol
    if not converged:
        warnings.warn(
            f"MAP gradient sup-norm {grad_norm:.3g} above tolerance {tol:.1g} "
            f"after {res.nit} iterations", MaxIterationsExceeded, stacklevel=2,
        )
    factor, jitter = None, 0.0
    if post.N * post.P <= MAX_DENSE:
        try:
            factor, jitter = cholesky_jittered(post.hessian(h), return_jitter=True)
        except Exception:
            factor = None
    return MapResult(
        h_hat=post.as_matrix(h).copy(), neg_log_post=float(f), grad_norm=grad_norm,
        iterations=int(res.nit), hessian_factor=factor, converged=converged,
        hessian_jitter=float(jitter), newton_steps=steps, trace=trace,
    )


def laplace_sample(map_result, S, rng):
    """Draws ``vec(H) = vec(H_hat) + L^{-T} eps`` with ``L L^T`` the Hessian.

    Returns an array of shape ``(S, D-1, N)``.
    """
    L = map_result.hessian_factor
    if L is None:
        raise HessianNotPD("no Hessian factor available at the MAP")
    P, N = map_result.h_hat.shape
    if S == 0:
        return np.zeros((0, P, N))
    eps = rng.standard_normal((P * N, S))
    x = linalg.solve_triangular(L, eps, lower=True, trans="T", check_finite=False)
    x = x.T.reshape(S, N, P).transpose(0, 2, 1)
    return map_result.h_hat[None] + x


def laplace_evidence(post, map_result):
    """Laplace log marginal likelihood from a computed MAP and Hessian factor."""
    if map_result.hessian_factor is None:
        raise HessianNotPD("no Hessian factor available at the MAP")
    dim = post.P * post.N
    log_joint = -map_result.neg_log_post + multinomial_log_coef(post.Y)
    return float(0.5 * dim * np.log(2 * np.pi) + log_joint - 0.5 * chol_logdet(map_result.hessian_factor))


def log_marginal_laplace(Y, model, omega=None, init=None, tol=1e-6, return_map=False):
    """Laplace approximation to ``log p(Y | Omega)``.

    ``(P N / 2) log(2 pi) + log p(H_hat, Y | Omega) - (1/2) log|Hessian|``,
    with the multinomial coefficient included so values are proper
    log-probabilities.
    """
    if omega:
        model = model.with_params(omega)
    ltp = collapse(model)
    post = CollapsedPosterior(Y, ltp, model.reference)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MaxIterationsExceeded)
        mres = map_estimate(Y, ltp, init=init, tol=tol, posterior=post)
    value = laplace_evidence(post, mres)
    return (value, mres) if return_map else value
