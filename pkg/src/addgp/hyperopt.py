"""Hyperparameter estimation by maximizing the (penalized) Laplace evidence.

The objective is ``log p_Laplace(Y | Omega) + lambda * sum_i log p(omega_i)``
over the free hyperparameters. Optimizers work on ``log(omega)`` inside the
declared bounds. Points that violate an order constraint, or whose MAP
fails, get the ``-inf`` sentinel and are treated as rejected.

Strategies
----------
``"bo"``
    Bayesian optimization: Latin-hypercube initial design, then GP-UCB
    (``kappa = 2``) with a squared-exponential surrogate on the unit cube of
    log-parameters.
``"lhs_nm"``
    Latin-hypercube random search followed by bounded Nelder-Mead restarts
    from the best three points.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import optimize as sopt
from scipy.linalg import cho_solve, cholesky
from scipy.stats import qmc

from .collapsed import CollapsedPosterior, collapse, laplace_evidence, map_estimate
from .errors import AddgpError, BudgetExhausted, InvalidSpec, MaxIterationsExceeded
from .model import constraints_satisfied

log = logging.getLogger(__name__)

MAX_DIM = 10


@dataclass
class HyperState:
    """Free hyperparameters, their search box, and the evaluation trace."""

    names: List[str]
    values: Dict[str, float]
    bounds: Dict[str, Tuple[float, float]]
    priors: Dict[str, object] = field(default_factory=dict)
    penalty_weight: float = 0.0
    constraints: Tuple = ()
    trace: List[Tuple[Dict[str, float], float]] = field(default_factory=list)
    best_objective: float = -np.inf
    budget_exhausted: bool = False

    @classmethod
    def from_model(cls, model):
        names = model.free_params()
        if len(names) > MAX_DIM:
            raise InvalidSpec(f"at most {MAX_DIM} free hyperparameters are supported, got {len(names)}")
        return cls(
            names=names,
            values={n: model.hyper[n].value for n in names},
            bounds={n: tuple(model.hyper[n].bounds) for n in names},
            priors={n: model.hyper[n].prior for n in names if model.hyper[n].prior is not None},
            penalty_weight=model.penalty_weight,
            constraints=model.constraints,
        )

    @property
    def log_lower(self):
        return np.log([self.bounds[n][0] for n in self.names])

    @property
    def log_upper(self):
        return np.log([self.bounds[n][1] for n in self.names])

    def to_values(self, u):
        """Map log-parameters to a name -> value dict, clipped into bounds."""
        u = np.clip(np.asarray(u, dtype=float), self.log_lower, self.log_upper)
        # exp(log(b)) can overshoot b by an ulp
        return {n: float(np.clip(np.exp(v), *self.bounds[n])) for n, v in zip(self.names, u)}

    def to_log(self, values):
        return np.log([values[n] for n in self.names])

    def incumbents(self):
        """Running best objective along the trace (nondecreasing)."""
        return np.maximum.accumulate([f for _, f in self.trace]) if self.trace else np.array([])


class MarginalObjective:
    """Penalized Laplace log evidence as a function of the free hyperparameters.

    The MAP at each evaluation starts from the previous evaluation's ``H_hat``.

    Parameters
    ----------
    Y : (D, N) counts
    model : ModelSpec
    tol : float
        MAP gradient tolerance.
    """

    def __init__(self, Y, model, tol=1e-6):
        self.Y = np.asarray(Y)
        self.model = model
        self.state = HyperState.from_model(model)
        self.tol = tol
        self._warm = None
        self.failures = 0

    def log_penalty(self, values):
        lam = self.state.penalty_weight
        if lam == 0:
            return 0.0
        return lam * sum(p.logpdf(values[n]) for n, p in self.state.priors.items())

    def log_evidence(self, values):
        model = self.model.with_params(values)
        ltp = collapse(model)
        post = CollapsedPosterior(self.Y, ltp, model.reference)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MaxIterationsExceeded)
            mres = map_estimate(self.Y, ltp, init=self._warm, tol=self.tol, posterior=post)
        self._warm = mres.h_hat
        return laplace_evidence(post, mres)

    def __call__(self, values):
        for n, v in values.items():
            lo, hi = self.state.bounds[n]
            if not lo * (1 - 1e-12) <= v <= hi * (1 + 1e-12):
                return -np.inf
        if not constraints_satisfied(self.model, values):
            return -np.inf
        try:
            value = self.log_evidence(values) + self.log_penalty(values)
        except (AddgpError, np.linalg.LinAlgError, ValueError, MemoryError) as exc:
            self.failures += 1
            log.warning("objective failed at %s: %s", values, exc)
            return -np.inf
        return float(value) if np.isfinite(value) else -np.inf


class _Recorder:
    """Wraps an objective over log-parameters and records every evaluation."""

    def __init__(self, objective, state, budget):
        self.objective = objective
        self.state = state
        self.budget = budget
        self.best_u = None

    @property
    def used(self):
        return len(self.state.trace)

    def __call__(self, u):
        if self.used >= self.budget:
            raise _OutOfBudget
        values = self.state.to_values(u)
        f = float(self.objective(values))
        self.state.trace.append((values, f))
        if f > self.state.best_objective:
            self.state.best_objective = f
            self.state.values = dict(values)
            self.best_u = np.asarray(u, dtype=float).copy()
        return f


class _OutOfBudget(Exception):
    pass


def _lhs(state, n, rng):
    d = len(state.names)
    sampler = qmc.LatinHypercube(d=d, seed=rng)
    unit = sampler.random(n)
    return state.log_lower + unit * (state.log_upper - state.log_lower)


def _run_lhs_nm(rec, state, rng, n_init, n_restarts):
    for u in _lhs(state, n_init, rng):
        rec(u)
    finite = [(f, i) for i, (_, f) in enumerate(state.trace) if np.isfinite(f)]
    starts = [state.to_log(state.trace[i][0]) for _, i in sorted(finite, reverse=True)[:n_restarts]]
    bounds = list(zip(state.log_lower, state.log_upper))
    width = state.log_upper - state.log_lower
    for u0 in starts:
        remaining = rec.budget - rec.used
        if remaining <= 0:
            raise _OutOfBudget
        simplex = [u0] + [np.clip(u0 + 0.1 * width[j] * np.eye(len(u0))[j],
                                  state.log_lower, state.log_upper) for j in range(len(u0))]
        res = sopt.minimize(
            lambda u: -rec(u), u0, method="Nelder-Mead", bounds=bounds,
            options={"maxfev": remaining, "xatol": 1e-4, "fatol": 1e-6,
                     "initial_simplex": np.array(simplex)},
        )
        if res.status == 1 and rec.used >= rec.budget:
            raise _OutOfBudget


def _se_gram(A, B, ell):
    d2 = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=-1)
    return np.exp(-0.5 * d2 / ell**2)


class _Surrogate:
    """GP on standardized outputs; lengthscale chosen on a grid by marginal
    likelihood with the signal variance profiled out."""

    LENGTHSCALES = (0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0, 3.0)
    NUGGET = 1e-6

    def __init__(self, X, y):
        self.X = X
        self.mu, self.sd = y.mean(), y.std() if y.std() > 0 else 1.0
        z = (y - self.mu) / self.sd
        n = len(X)
        best = None
        for ell in self.LENGTHSCALES:
            K = _se_gram(X, X, ell) + self.NUGGET * np.eye(n)
            try:
                L = cholesky(K, lower=True)
            except np.linalg.LinAlgError:
                continue
            alpha = cho_solve((L, True), z)
            amp = max(z @ alpha / n, 1e-12)
            lml = -0.5 * n * np.log(amp) - np.sum(np.log(np.diag(L)))
            if best is None or lml > best[0]:
                best = (lml, ell, L, alpha, amp)
        _, self.ell, self.L, self.alpha, self.amp = best

    def predict(self, Xq):
        k = _se_gram(Xq, self.X, self.ell)
        mean = k @ self.alpha
        v = cho_solve((self.L, True), k.T)
        var = self.amp * np.maximum(1.0 - np.sum(k * v.T, axis=1), 1e-12)
        return self.mu + self.sd * mean, self.sd * np.sqrt(var)


def _warp_outputs(y):
    """Monotone log-warp of objective values toward the incumbent.

    Far-off initial points otherwise dominate the standardization and flatten
    the surrogate near the optimum; the warp preserves the ordering.
    """
    gap = y.max() - y
    scale = np.median(gap[gap > 0]) if np.any(gap > 0) else 1.0
    return -np.log1p(gap / scale)


def _run_bo(rec, state, rng, n_init, n_iter, kappa, n_candidates=2000):
    for u in _lhs(state, n_init, rng):
        rec(u)
    lo, hi = state.log_lower, state.log_upper
    d = len(lo)
    for _ in range(n_iter):
        U = np.array([state.to_log(v) for v, _ in state.trace])
        X = (U - lo) / (hi - lo)
        y = np.array([f for _, f in state.trace])
        ok = np.isfinite(y)
        if not ok.any():
            rec(lo + rng.random(d) * (hi - lo))
            continue
        # rejected points are imputed at the worst finite value
        y = np.where(ok, y, y[ok].min())
        gp = _Surrogate(X, _warp_outputs(y))

        def ucb(x):
            m, s = gp.predict(np.atleast_2d(x))
            return m + kappa * s

        cand = rng.random((n_candidates, d))
        scores = ucb(cand)
        starts = cand[np.argsort(scores)[-3:]]
        best_x, best_s = None, -np.inf
        for x0 in starts:
            res = sopt.minimize(lambda x: -ucb(x)[0], x0, method="L-BFGS-B",
                                bounds=[(0.0, 1.0)] * d)
            if -res.fun > best_s:
                best_x, best_s = res.x, -res.fun
        rec(lo + np.clip(best_x, 0.0, 1.0) * (hi - lo))


def optimize(objective, state=None, strategy="bo", budget=None, rng=None, n_init=10, n_iter=20,
             kappa=2.0, n_restarts=3):
    """Maximize ``objective`` over the free hyperparameters.

    Parameters
    ----------
    objective : callable
        Maps a name -> value dict to a float (``-inf`` for rejected points);
        a :class:`MarginalObjective` supplies its own state.
    state : HyperState, optional
    strategy : {"bo", "lhs_nm"}
    budget : int, optional
        Maximum number of objective evaluations. Defaults to
        ``n_init + n_iter`` for "bo" and ``n_init + 100 * dim`` for "lhs_nm".
    rng : numpy.random.Generator

    Returns
    -------
    HyperState
        ``values`` holds the best accepted point; ``trace`` every evaluation.
        When the budget runs out first, ``budget_exhausted`` is set and a
        :class:`BudgetExhausted` warning is issued.
    """
    if state is None:
        state = getattr(objective, "state", None)
        if state is None:
            raise ValueError("a HyperState is required for plain callables")
    if not state.names:
        raise InvalidSpec("no free hyperparameters to optimize")
    if len(state.names) > MAX_DIM:
        raise InvalidSpec(f"at most {MAX_DIM} free hyperparameters are supported")
    rng = rng if rng is not None else np.random.default_rng()
    d = len(state.names)
    if budget is None:
        budget = n_init + n_iter if strategy == "bo" else n_init + 100 * d
    if budget < 1:
        raise ValueError("budget must be at least 1")
    state.trace, state.best_objective, state.budget_exhausted = [], -np.inf, False
    rec = _Recorder(objective, state, budget)
    try:
        if strategy == "bo":
            _run_bo(rec, state, rng, min(n_init, budget), n_iter, kappa)
        elif strategy == "lhs_nm":
            _run_lhs_nm(rec, state, rng, min(n_init, budget), n_restarts)
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
    except _OutOfBudget:
        if strategy != "bo":
            state.budget_exhausted = True
            warnings.warn(f"evaluation budget {budget} exhausted; returning best point so far",
                          BudgetExhausted, stacklevel=2)
    if not np.isfinite(state.best_objective):
        log.warning("no accepted point found; returning initial values")
    return state


def fit_hyperparameters(Y, model, strategy="bo", rng=None, **kwargs):
    """Optimize the free hyperparameters of ``model`` and return ``(model, state)``."""
    obj = MarginalObjective(Y, model)
    state = optimize(obj, strategy=strategy, rng=rng, **kwargs)
    return model.with_params(state.values), state
