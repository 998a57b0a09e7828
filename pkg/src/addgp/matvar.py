"""Matrix-variate distributions: matrix normal, inverse Wishart and matrix-t.

Conventions
-----------
* A matrix normal ``MN(M, U, V)`` over a ``P x N`` matrix has row covariance
  ``U`` (``P x P``) and column covariance ``V`` (``N x N``), so that
  ``cov(vec(X)) = V kron U`` with column-major ``vec``.
* The inverse Wishart ``IW(Xi, zeta)`` has density proportional to
  ``|S|^{-(zeta+P+1)/2} exp(-tr(Xi S^{-1}) / 2)`` and mean
  ``Xi / (zeta - P - 1)``.
* The matrix-t ``T(nu, M, V, A)`` is the marginal of ``X`` when
  ``S ~ IW(V, nu)`` and ``X | S ~ MN(M, S, A)``.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import multigammaln

from .errors import DimensionMismatch, InvalidDof, NotFactorizable, NotSymmetric

#: relative jitter used for the first rung of the ladder
BASE_JITTER = 1e-10
#: number of x10 escalations after the first positive rung
JITTER_STEPS = 6


@dataclass(frozen=True)
class MatrixNormalParams:
    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray

    def __post_init__(self):
        P, N = np.shape(self.mean)
        if np.shape(self.row_cov) != (P, P) or np.shape(self.col_cov) != (N, N):
            raise DimensionMismatch(
                f"mean is {P}x{N} but row_cov is {np.shape(self.row_cov)} "
                f"and col_cov is {np.shape(self.col_cov)}"
            )


@dataclass(frozen=True)
class InverseWishartParams:
    scale: np.ndarray
    dof: float

    def __post_init__(self):
        P = np.shape(self.scale)[0]
        if not self.dof > P - 1:
            raise InvalidDof(f"dof={self.dof} must exceed P - 1 = {P - 1}")


@dataclass(frozen=True)
class MatrixTParams:
    dof: float
    mean: np.ndarray
    row_scale: np.ndarray
    col_scale: np.ndarray

    def __post_init__(self):
        if not self.dof > 0:
            raise InvalidDof(f"dof={self.dof} must be positive")
        P, N = np.shape(self.mean)
        if np.shape(self.row_scale) != (P, P) or np.shape(self.col_scale) != (N, N):
            raise DimensionMismatch(
                f"mean is {P}x{N} but row_scale is {np.shape(self.row_scale)} "
                f"and col_scale is {np.shape(self.col_scale)}"
            )


def cholesky_jittered(S, base_jitter=BASE_JITTER, return_jitter=False):
    """Lower Cholesky factor of ``S``, adding diagonal jitter only if needed.

    The ladder tries ``eps = 0`` first, then ``base_jitter * scale`` and
    escalates by factors of ten for ``JITTER_STEPS`` more rungs, where
    ``scale`` is the mean absolute diagonal of ``S``.

    Parameters
    ----------
    S : (n, n) array_like
        Symmetric matrix.
    base_jitter : float
        First positive jitter level, relative to the diagonal scale.
    return_jitter : bool
        If True also return the absolute jitter that was added.

    Returns
    -------
    L : (n, n) ndarray
        Lower-triangular factor with ``L @ L.T == S + eps * I``.
    eps : float
        Only when ``return_jitter`` is set.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {S.shape}")
    n = S.shape[0]
    if n == 0:
        L = np.zeros((0, 0))
        return (L, 0.0) if return_jitter else L
    if not np.all(np.isfinite(S)):
        raise NotFactorizable("matrix has non-finite entries")
    magnitude = np.max(np.abs(S))
    if np.max(np.abs(S - S.T)) > 1e-10 * max(magnitude, 1e-300):
        raise NotSymmetric("matrix is not symmetric within 1e-10 relative tolerance")
    S = 0.5 * (S + S.T)

    scale = np.mean(np.abs(np.diag(S)))
    if scale == 0.0:
        scale = 1.0
    levels = [0.0] + [base_jitter * scale * 10.0**k for k in range(JITTER_STEPS + 1)]
    for eps in levels:
        try:
            L = linalg.cholesky(S + eps * np.eye(n), lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        return (L, eps) if return_jitter else L
    raise NotFactorizable(
        f"Cholesky failed at every jitter level up to {levels[-1]:.3g}"
    )


def chol_solve(L, B):
    """Solve ``(L L^T) X = B`` given a lower factor ``L``."""
    return linalg.cho_solve((L, True), B, check_finite=False)


def chol_logdet(L):
    return 2.0 * np.sum(np.log(np.diag(L)))


def sample_matrix_normal_factored(mean, L_row, L_col, rng, size=None):
    """Draw ``mean + L_row E L_col^T`` with standard normal ``E``.

    With ``size`` set, returns a stack of ``size`` draws along axis 0.
    """
    P, N = mean.shape
    if size is None:
        E = rng.standard_normal((P, N))
        return mean + L_row @ E @ L_col.T
    E = rng.standard_normal((size, P, N))
    return mean + L_row @ E @ L_col.T


def sample_matrix_normal(params, rng, size=None):
    """Draw from ``MN(mean, row_cov, col_cov)``.

    Parameters
    ----------
    params : MatrixNormalParams
    rng : numpy.random.Generator
    size : int, optional
        Number of draws; returns shape ``(size, P, N)`` when given.
    """
    L_row = cholesky_jittered(params.row_cov)
    L_col = cholesky_jittered(params.col_cov)
    return sample_matrix_normal_factored(np.asarray(params.mean, float), L_row, L_col, rng, size)


def _bartlett_lower(P, dof, rng):
    """Lower-triangular Bartlett factor for a standard Wishart with ``dof``."""
    A = np.zeros((P, P))
    A[np.diag_indices(P)] = np.sqrt(rng.chisquare(dof - np.arange(P)))
    rows, cols = np.tril_indices(P, -1)
    A[rows, cols] = rng.standard_normal(rows.size)
    return A


def sample_inverse_wishart_factored(L_scale, dof, rng):
    """IW draw given the lower Cholesky factor of the scale matrix.

    If ``W ~ Wishart(Xi^{-1}, dof)`` is built as ``U A A^T U^T`` with
    ``U = L^{-T}`` and Bartlett factor ``A``, its inverse is
    ``(L A^{-T})(L A^{-T})^T``, so no explicit inverse of ``Xi`` is needed.
    """
    P = L_scale.shape[0]
    if not dof > P - 1:
        raise InvalidDof(f"dof={dof} must exceed P - 1 = {P - 1}")
    A = _bartlett_lower(P, dof, rng)
    # L @ A^{-T}: solve A^T^T ... via triangular solve on the transpose
    T = linalg.solve_triangular(A, L_scale.T, lower=True, check_finite=False).T
    return T @ T.T


def sample_inverse_wishart(params, rng):
    """Draw ``S ~ IW(scale, dof)`` (see module conventions)."""
    L = cholesky_jittered(params.scale)
    return sample_inverse_wishart_factored(L, params.dof, rng)


def matrix_t_log_density(X, params):
    """Log-density of the matrix-t distribution at ``X``.

    ``log p = log Gamma_P((nu+N)/2) - log Gamma_P(nu/2) - (PN/2) log(pi)
    - (P/2) log|A| - (N/2) log|V| - ((nu+N)/2) log|I + V^{-1} E A^{-1} E^T|``
    with ``E = X - M``. For ``P = N = 1`` this is a Student-t with ``nu``
    degrees of freedom and scale ``sqrt(V A / nu)``.
    """
    X = np.asarray(X, dtype=float)
    M = np.asarray(params.mean, dtype=float)
    if X.shape != M.shape:
        raise DimensionMismatch(f"X is {X.shape} but mean is {M.shape}")
    P, N = M.shape
    nu = params.dof
    L_V = cholesky_jittered(params.row_scale)
    L_A = cholesky_jittered(params.col_scale)
    E = X - M
    # Q = V + E A^{-1} E^T, and |I + V^{-1} E A^{-1} E^T| = |Q| / |V|
    W = linalg.solve_triangular(L_A, E.T, lower=True, check_finite=False)
    Q = params.row_scale + W.T @ W
    L_Q = cholesky_jittered(Q)
    return (
        multigammaln(0.5 * (nu + N), P)
        - multigammaln(0.5 * nu, P)
        - 0.5 * P * N * np.log(np.pi)
        - 0.5 * P * chol_logdet(L_A)
        + 0.5 * nu * chol_logdet(L_V)
        - 0.5 * (nu + N) * chol_logdet(L_Q)
    )


def conjugate_mn_posterior(Y, X, prior, noise_col_cov, Sigma, form="covariance"):
    """Posterior of ``Lambda`` in ``Y | Lambda ~ MN(Lambda X, Sigma, Gamma)``.

    Prior ``Lambda ~ MN(Theta, Sigma, Z)``. The posterior is
    ``MN((Y G^{-1} X^T + Theta Z^{-1}) (X G^{-1} X^T + Z^{-1})^{-1}, Sigma,
    (X G^{-1} X^T + Z^{-1})^{-1})`` with ``G = Gamma``.

    ``form="covariance"`` evaluates the same quantities through the Woodbury
    identity,
    ``mean = Theta + (Y - Theta X) (X^T Z X + Gamma)^{-1} X^T Z`` and
    ``col_cov = Z - Z X (X^T Z X + Gamma)^{-1} X^T Z``,
    which never inverts ``Z`` or ``Gamma`` separately and so tolerates
    (near-)singular kernel Gram matrices. ``form="precision"`` is the
    literal expression.

    Parameters
    ----------
    Y : (P, N) array
    X : (Q, N) array
    prior : MatrixNormalParams
        Prior over ``Lambda`` (``P x Q``); its ``row_cov`` is ignored in
        favour of ``Sigma``.
    noise_col_cov : (N, N) array
    Sigma : (P, P) array

    Returns
    -------
    MatrixNormalParams
    """
    Y = np.asarray(Y, float)
    X = np.asarray(X, float)
    Theta = np.asarray(prior.mean, float)
    Z = np.asarray(prior.col_cov, float)
    G = np.asarray(noise_col_cov, float)
    P, N = Y.shape
    Q = X.shape[0]
    if X.shape[1] != N or Theta.shape != (P, Q) or G.shape != (N, N):
        raise DimensionMismatch(
            f"Y {Y.shape}, X {X.shape}, Theta {Theta.shape}, Gamma {G.shape} are not conformable"
        )
    if form == "covariance":
        ZX = Z @ X
        L = cholesky_jittered(X.T @ ZX + G)
        gain = chol_solve(L, ZX.T)  # (N, Q)
        mean = Theta + (Y - Theta @ X) @ gain
        col_cov = Z - ZX @ gain
    elif form == "precision":
        L_G = cholesky_jittered(G)
        L_Z = cholesky_jittered(Z)
        GiXt = chol_solve(L_G, X.T)
        prec = X @ GiXt + chol_solve(L_Z, np.eye(Q))
        L_P = cholesky_jittered(0.5 * (prec + prec.T))
        col_cov = chol_solve(L_P, np.eye(Q))
        mean = (Y @ GiXt + chol_solve(L_Z, Theta.T).T) @ col_cov
    else:
        raise ValueError(f"unknown form {form!r}")
    col_cov = 0.5 * (col_cov + col_cov.T)
    return MatrixNormalParams(mean=mean, row_cov=np.asarray(Sigma, float), col_cov=col_cov)
