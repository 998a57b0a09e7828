"""Model specification for additive multinomial logistic-normal GP models.

A :class:`ModelSpec` binds the linear design ``X`` (``Q0 x N``), the
nonlinear components (each a kernel over its own covariates), and the
priors ``B ~ MN(Theta0, Sigma, Gamma0)``, ``f_k ~ GP(theta_k, Sigma, K_k)``,
``Sigma ~ IW(Xi, zeta)``. Hyperparameters are declared by name and referenced
from kernel fields; :meth:`ModelSpec.with_params` swaps their values.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import stats

from . import kernels as kern
from .errors import DimensionMismatch, InvalidSpec, NotFactorizable
from .matvar import cholesky_jittered


@dataclass(frozen=True)
class Prior:
    """Log-prior for a positive hyperparameter: inverse-gamma or normal."""

    kind: str
    a: float
    b: float

    def __post_init__(self):
        if self.kind not in ("inverse_gamma", "normal"):
            raise InvalidSpec(f"unknown prior kind {self.kind!r}")
        if not (self.a > 0 and self.b > 0):
            raise InvalidSpec(f"prior parameters must be positive, got {self.a}, {self.b}")

    def logpdf(self, x):
        if self.kind == "inverse_gamma":
            return float(stats.invgamma.logpdf(x, self.a, scale=self.b))
        return float(stats.norm.logpdf(x, self.a, self.b))

    def to_dict(self):
        if self.kind == "inverse_gamma":
            return {"type": "inverse_gamma", "alpha": self.a, "beta": self.b}
        return {"type": "normal", "mu": self.a, "sigma": self.b}


@dataclass(frozen=True)
class HyperParam:
    name: str
    value: float
    free: bool = False
    bounds: Tuple[float, float] = (1e-2, 1e2)
    prior: Optional[Prior] = None


@dataclass(frozen=True)
class Component:
    """One additive nonlinear term ``f_k(z)``.

    ``z`` holds the covariates at the observed samples, shape ``(N, q)``.
    ``mean`` is the constant prior mean per response row (scalar or
    length ``D-1``).
    """

    name: str
    kernel: kern.Kernel
    z: np.ndarray
    mean: object = 0.0
    covariates: Tuple[str, ...] = ()


@dataclass(frozen=True)
class EvaluationGrid:
    """Points where functions are inferred beyond the observed samples.

    ``x`` is ``Q0 x N_u`` and ``z`` holds one ``(N_u, q)`` array per
    component. The evaluation set is the observed samples followed by these.
    """

    x: np.ndarray
    z: Tuple[np.ndarray, ...]

    @property
    def n_unobserved(self):
        return self.x.shape[1]

    @classmethod
    def empty(cls, model):
        return cls(np.zeros((model.Q0, 0)), tuple(np.zeros((0,) + c.z.shape[1:]) for c in model.components))


@dataclass(frozen=True)
class ModelSpec:
    D: int
    X: np.ndarray
    theta0: np.ndarray
    gamma0: np.ndarray
    components: Tuple[Component, ...]
    xi: np.ndarray
    zeta: float
    hyper: Dict[str, HyperParam] = field(default_factory=dict)
    penalty_weight: float = 0.0
    constraints: Tuple[Tuple[str, str, str], ...] = ()
    identification: str = "center"
    reference: Optional[int] = None
    x_names: Tuple[str, ...] = ()
    standardization: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    @property
    def P(self):
        return self.D - 1

    @property
    def N(self):
        return self.X.shape[1]

    @property
    def Q0(self):
        return self.X.shape[0]

    @property
    def K(self):
        return len(self.components)

    @property
    def intercept_row(self):
        """Index of an all-ones row of ``X`` or None."""
        for q in range(self.Q0):
            if np.all(self.X[q] == 1.0):
                return q
        return None

    def hyper_values(self):
        return {name: h.value for name, h in self.hyper.items()}

    def free_params(self):
        return [name for name, h in self.hyper.items() if h.free]

    def kernel(self, k):
        return self.components[k].kernel.resolve(self.hyper_values())

    def component_mean(self, k):
        m = np.asarray(self.components[k].mean, dtype=float)
        if m.ndim == 0:
            m = np.full(self.P, float(m))
        return m

    def with_params(self, values):
        """Copy with hyperparameter values replaced (names must be declared)."""
        hyper = dict(self.hyper)
        for name, v in values.items():
            if name not in hyper:
                raise InvalidSpec(f"unknown hyperparameter {name!r}")
            hyper[name] = replace(hyper[name], value=float(v))
        return replace(self, hyper=hyper)

    # -- covariance and mean pieces -------------------------------------
    def linear_cov(self, Xa, Xb):
        return Xa.T @ self.gamma0 @ Xb

    def component_cov(self, k, Za, Zb=None):
        return kern.kernel_matrix(self.kernel(k), Za, Zb)

    def prior_cov(self, Xa, Za, Xb=None, Zb=None):
        """``Xa^T Gamma0 Xb + sum_k K_k(Za_k, Zb_k)`` (no noise term)."""
        same = Xb is None
        Xb = Xa if same else Xb
        C = self.linear_cov(Xa, Xb)
        for k in range(self.K):
            C = C + self.component_cov(k, Za[k], None if same else Zb[k])
        return 0.5 * (C + C.T) if same else C

    def prior_mean(self, Xa, Za):
        """``Theta0 Xa + sum_k theta_k 1^T`` at the given points."""
        n = Xa.shape[1]
        M = self.theta0 @ Xa
        for k in range(self.K):
            M = M + self.component_mean(k)[:, None] * np.ones((1, n))
        return M

    def observed_z(self):
        return tuple(c.z for c in self.components)

    def eval_points(self, grid=None):
        """Design and covariates over observed + unobserved points."""
        if grid is None or grid.n_unobserved == 0:
            return self.X, self.observed_z()
        X = np.hstack([self.X, grid.x])
        Z = tuple(np.concatenate([c.z, zu], axis=0) for c, zu in zip(self.components, grid.z))
        return X, Z


def compose_design_covariance(model, X=None, Z=None):
    """Column covariance ``A`` (with the ``+I`` noise term) and mean ``M``.

    ``A = X^T Gamma0 X + sum_k K_k(Z_k) + I`` and
    ``M = Theta0 X + sum_k theta_k(Z_k)``, at the observed points unless
    ``X``/``Z`` are supplied.
    """
    if X is None:
        X, Z = model.X, model.observed_z()
    n = X.shape[1]
    if X.shape[0] != model.Q0 or len(Z) != model.K:
        raise DimensionMismatch("design or covariate sets do not match the model")
    for k, z in enumerate(Z):
        if np.shape(z)[0] != n:
            raise DimensionMismatch(
                f"component {model.components[k].name!r} has {np.shape(z)[0]} points, expected {n}"
            )
    A = model.prior_cov(X, Z) + np.eye(n)
    return A, model.prior_mean(X, Z)


def _as_2d(z, n):
    z = np.asarray(z)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != n:
        raise DimensionMismatch(f"covariate block has {z.shape[0]} rows, expected {n}")
    return z


def validate(spec):
    """Check every invariant of ``spec`` and return it (idempotent)."""
    D, P = spec.D, spec.D - 1
    if D < 2:
        raise InvalidSpec(f"need at least 2 taxa, got D={D}")
    X = np.asarray(spec.X, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatch("X must be a Q0 x N matrix")
    N = X.shape[1]
    if spec.K == 0 and X.shape[0] == 0:
        raise InvalidSpec("model has neither linear terms nor components")
    if np.shape(spec.theta0) != (P, X.shape[0]):
        raise DimensionMismatch(f"Theta0 must be {P}x{X.shape[0]}, got {np.shape(spec.theta0)}")
    if np.shape(spec.gamma0) != (X.shape[0], X.shape[0]):
        raise DimensionMismatch(f"Gamma0 must be {X.shape[0]}x{X.shape[0]}")
    if np.shape(spec.xi) != (P, P):
        raise DimensionMismatch(f"Xi must be {P}x{P}, got {np.shape(spec.xi)}")
    if not spec.zeta > D - 2:
        raise InvalidSpec(f"zeta={spec.zeta} must exceed D - 2 = {D - 2}")
    for name, mat in (("Gamma0", spec.gamma0), ("Xi", spec.xi)):
        if np.size(mat) == 0:
            continue
        try:
            cholesky_jittered(mat)
        except NotFactorizable as exc:
            raise InvalidSpec(f"{name} is not positive definite: {exc}") from exc
        w = np.linalg.eigvalsh(0.5 * (mat + np.transpose(mat)))
        if w[0] <= 0:
            raise InvalidSpec(f"{name} is not positive definite (smallest eigenvalue {w[0]:.3g})")
    comps = []
    for c in spec.components:
        z = _as_2d(c.z, N)
        m = np.asarray(c.mean, dtype=float)
        if m.ndim not in (0, 1) or (m.ndim == 1 and m.shape != (P,)):
            raise DimensionMismatch(f"mean of component {c.name!r} must be scalar or length {P}")
        comps.append(replace(c, z=z))
    names = [c.name for c in comps]
    if len(set(names)) != len(names):
        raise InvalidSpec(f"duplicate component names {names}")
    if spec.identification not in ("center", "none"):
        raise InvalidSpec(f"identification must be 'center' or 'none', got {spec.identification!r}")
    if spec.penalty_weight < 0:
        raise InvalidSpec("penalty_weight must be nonnegative")

    # hyperparameter bookkeeping
    refs = {}
    for c in comps:
        for n in c.kernel.free_names():
            refs[n] = refs.get(n, 0) + 1
    for n in refs:
        if n not in spec.hyper:
            raise InvalidSpec(f"kernel references undeclared hyperparameter {n!r}")
    for name, h in spec.hyper.items():
        lo, hi = h.bounds
        if not 0 < lo < hi:
            raise InvalidSpec(f"bounds for {name!r} must satisfy 0 < lo < hi, got {h.bounds}")
        if h.free and refs.get(name, 0) != 1:
            raise InvalidSpec(
                f"free hyperparameter {name!r} must resolve to exactly one kernel slot, "
                f"found {refs.get(name, 0)}"
            )
    for a, op, b in spec.constraints:
        if op not in ("<", ">") or a not in spec.hyper or b not in spec.hyper:
            raise InvalidSpec(f"bad order constraint {a} {op} {b}")
    for k, c in enumerate(comps):
        kern.kernel_matrix(c.kernel.resolve(spec.hyper_values()), c.z[:2])
    return replace(spec, X=X, components=tuple(comps),
                   theta0=np.asarray(spec.theta0, float), gamma0=np.asarray(spec.gamma0, float),
                   xi=np.asarray(spec.xi, float), zeta=float(spec.zeta))


def constraints_satisfied(model, values=None):
    vals = model.hyper_values()
    if values:
        vals.update(values)
    for a, op, b in model.constraints:
        if op == "<" and not vals[a] < vals[b]:
            return False
        if op == ">" and not vals[a] > vals[b]:
            return False
    return True


# -- building from configuration ------------------------------------------

def _matrix_or_scalar(value, n, name, default):
    if value is None:
        value = default
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(n)
    if arr.ndim == 1:
        if arr.shape != (n,):
            raise InvalidSpec(f"{name} must have length {n}")
        return np.diag(arr)
    if arr.shape != (n, n):
        raise InvalidSpec(f"{name} must be {n}x{n}, got {arr.shape}")
    return arr


def _prior_from_dict(d, name):
    if d is None:
        return None
    kind = d.get("type")
    if kind == "inverse_gamma":
        return Prior("inverse_gamma", float(d["alpha"]), float(d["beta"]))
    if kind == "normal":
        return Prior("normal", float(d["mu"]), float(d["sigma"]))
    raise InvalidSpec(f"hyperparameters.{name}.prior: unknown type {kind!r}")


def build_model(config, D, covariates, n_samples):
    """Assemble and validate a :class:`ModelSpec` from a parsed JSON config.

    Parameters
    ----------
    config : dict
        Model configuration (see README for the schema).
    D : int
        Number of taxa.
    covariates : dict
        Covariate name -> array of length ``n_samples`` (observed samples).
    n_samples : int

    Returns
    -------
    ModelSpec
    """
    covariates = {k: np.asarray(v) for k, v in covariates.items()}
    P = D - 1
    standardization = {}
    for name in config.get("standardize", []):
        if name not in covariates:
            raise InvalidSpec(f"standardize: unknown covariate {name!r}")
        v = covariates[name].astype(float)
        mu, sd = float(v.mean()), float(v.std())
        if sd == 0:
            raise InvalidSpec(f"standardize: covariate {name!r} is constant")
        covariates[name] = (v - mu) / sd
        standardization[name] = (mu, sd)

    def get(name):
        if name not in covariates:
            raise InvalidSpec(f"unknown covariate {name!r}")
        return covariates[name]

    lin = config.get("linear", {}) or {}
    rows, x_names = [], []
    if lin.get("intercept", False):
        rows.append(np.ones(n_samples))
        x_names.append("intercept")
    for name in lin.get("covariates", []):
        rows.append(np.asarray(get(name), dtype=float))
        x_names.append(name)
    Q0 = len(rows)
    X = np.vstack(rows) if rows else np.zeros((0, n_samples))
    pm = lin.get("prior_mean", 0.0)
    pm = np.asarray(pm, dtype=float)
    if pm.ndim == 0:
        theta0 = np.full((P, Q0), float(pm))
    elif pm.ndim == 1:
        if pm.shape != (Q0,):
            raise InvalidSpec(f"linear.prior_mean must have length {Q0}")
        theta0 = np.tile(pm, (P, 1))
    else:
        theta0 = pm
    gamma0 = _matrix_or_scalar(lin.get("prior_cov"), Q0, "linear.prior_cov", 1.0)

    comps = []
    for i, c in enumerate(config.get("components", [])):
        if "name" not in c or "kernel" not in c:
            raise InvalidSpec(f"components[{i}] needs 'name' and 'kernel'")
        names = c.get("covariates", [])
        if not names:
            raise InvalidSpec(f"components[{i}].covariates must be nonempty")
        cols = [get(n) for n in names]
        if all(col.dtype.kind in "fiub" for col in cols):
            z = np.column_stack(cols).astype(float)
        else:
            # label columns (e.g. vessel ids) stay categorical
            z = np.empty((n_samples, len(cols)), dtype=object)
            for j, col in enumerate(cols):
                z[:, j] = col
        comps.append(Component(c["name"], kern.kernel_from_dict(c["kernel"]), z,
                               c.get("mean", 0.0), tuple(names)))

    sp = config.get("sigma_prior", {}) or {}
    zeta = sp.get("zeta")
    zeta = float(D + 5) if zeta is None else float(zeta)
    xi = _matrix_or_scalar(sp.get("xi"), P, "sigma_prior.xi", 1.0)

    hyper = {}
    for name, h in (config.get("hyperparameters") or {}).items():
        if "value" not in h:
            raise InvalidSpec(f"hyperparameters.{name}: missing 'value'")
        bounds = tuple(float(b) for b in h.get("bounds", (1e-2, 1e2)))
        hyper[name] = HyperParam(name, float(h["value"]), bool(h.get("free", False)),
                                 bounds, _prior_from_dict(h.get("prior"), name))
    constraints = tuple(tuple(c) for c in config.get("constraints", []))
    ref = config.get("reference")
    spec = ModelSpec(
        D=D, X=X, theta0=theta0, gamma0=gamma0, components=tuple(comps), xi=xi, zeta=zeta,
        hyper=hyper, penalty_weight=float(config.get("penalty_weight", 0.0)),
        constraints=constraints, identification=config.get("identification", "center"),
        reference=ref, x_names=tuple(x_names), standardization=standardization,
    )
    return validate(spec)


def build_grid(model, covariates):
    """Evaluation grid from covariate values at unobserved points.

    ``covariates`` maps each covariate used by the model to an array of
    length ``N_u``; standardization recorded on the model is applied.
    """
    if not covariates:
        return EvaluationGrid.empty(model)
    cov = {}
    for name, v in covariates.items():
        v = np.asarray(v)
        if name in model.standardization:
            mu, sd = model.standardization[name]
            v = (v.astype(float) - mu) / sd
        cov[name] = v
    lengths = {len(v) for v in cov.values()}
    if len(lengths) != 1:
        raise DimensionMismatch(f"grid covariates have different lengths {sorted(lengths)}")
    n_u = lengths.pop()

    def get(name):
        if name not in cov:
            raise InvalidSpec(f"grid: missing covariate {name!r}")
        return cov[name]

    rows = [np.ones(n_u) if name == "intercept" else np.asarray(get(name), dtype=float)
            for name in model.x_names]
    x = np.vstack(rows) if rows else np.zeros((0, n_u))
    zs = []
    for c in model.components:
        cols = [get(n) for n in c.covariates]
        if all(np.asarray(col).dtype.kind in "fiub" for col in cols):
            z = np.column_stack(cols).astype(float)
        else:
            z = np.empty((n_u, len(cols)), dtype=object)
            for j, col in enumerate(cols):
                z[:, j] = col
        zs.append(z)
    return EvaluationGrid(x, tuple(zs))
