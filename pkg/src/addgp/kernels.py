"""Covariance functions and Gram matrices.

Every kernel is a frozen dataclass. Scalar parameters are either numbers or
strings; a string names a hyperparameter that must be bound with
:func:`resolve` before the kernel is evaluated. Inputs ``z`` are arrays of
shape ``(n,)`` or ``(n, q)``; each leaf kernel reads one column (``column``).

Formulas (``tau = t - t'``):

==================  ====================================================
SquaredExponential  ``sigma2 * exp(-tau^2 / (2 rho^2))``
Periodic            ``sigma * exp(-(2 / rho^2) sin^2(pi |tau| / period))``
RationalQuadratic   ``sigma2 * (1 + tau^2 / (2 a rho^2))^(-a)``, times
                    ``1[t >= threshold] 1[t' >= threshold]`` when set
Linear              ``c + (t - offset)(t' - offset)``
WarpedSE            squared exponential on ``warp_skewed_gaussian(t)``
BlockMask           ``1[label(t) == label(t')]`` (optionally only for
                    labels in ``active``)
Product             elementwise product of its factors
WhiteNoise          ``eps * 1[t == t']``
==================  ====================================================

``Periodic.sigma`` multiplies the kernel directly (it is not squared).
"""

from dataclasses import dataclass, fields, replace
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import InvalidSpec
from .matvar import cholesky_jittered

Param = Union[float, str]


def _column(z, column):
    z = np.asarray(z)
    if z.ndim == 1:
        if column != 0:
            raise InvalidSpec(f"column {column} requested from 1-d input")
        col = z
    else:
        col = z[:, column]
    if col.dtype == object:
        try:
            col = col.astype(float)
        except (TypeError, ValueError):
            pass
    return col


def _num(value, name):
    if isinstance(value, str):
        raise InvalidSpec(f"parameter {name} is bound to unresolved hyperparameter {value!r}")
    return float(value)


def _positive(value, name):
    v = _num(value, name)
    if not v > 0:
        raise InvalidSpec(f"{name} must be positive, got {v}")
    return v


def warp_skewed_gaussian(t, m, s, alpha, literal=False):
    """Skewed-Gaussian input warp ``w = g(z) * sigmoid(alpha z)``, ``z = (t - m) / s``.

    ``g(z) = exp(-z^2 / 2)`` by default, a bump localised around ``m``.
    ``literal=True`` uses ``exp(+z^2 / 2)`` instead.
    """
    if not s > 0:
        raise InvalidSpec(f"warp width s must be positive, got {s}")
    z = (np.asarray(t, dtype=float) - m) / s
    sign = 1.0 if literal else -1.0
    return np.exp(sign * 0.5 * z**2) * expit(alpha * z)


class Kernel:
    """Mixin with parameter binding helpers shared by all kernel forms."""

    def params(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def free_names(self):
        """Names of hyperparameters referenced anywhere in this kernel."""
        names = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, str) and f.name not in ("form",):
                names.append(value)
        return names

    def resolve(self, values):
        changes = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, str) and value in values:
                changes[f.name] = float(values[value])
        return replace(self, **changes) if changes else self

    def validate(self):
        return self


@dataclass(frozen=True)
class SquaredExponential(Kernel):
    sigma2: Param = 1.0
    rho: Param = 1.0
    column: int = 0

    def __call__(self, z, z2):
        s2 = _positive(self.sigma2, "sigma2")
        rho = _positive(self.rho, "rho")
        t, u = _column(z, self.column), _column(z2, self.column)
        d = t[:, None] - u[None, :]
        return s2 * np.exp(-0.5 * (d / rho) ** 2)


@dataclass(frozen=True)
class Periodic(Kernel):
    sigma: Param = 1.0
    rho: Param = 1.0
    period: Param = 1.0
    column: int = 0

    def __call__(self, z, z2):
        sig = _positive(self.sigma, "sigma")
        rho = _positive(self.rho, "rho")
        p = _positive(self.period, "period")
        t, u = _column(z, self.column), _column(z2, self.column)
        d = np.abs(t[:, None] - u[None, :])
        return sig * np.exp(-2.0 * np.sin(np.pi * d / p) ** 2 / rho**2)


@dataclass(frozen=True)
class RationalQuadratic(Kernel):
    sigma2: Param = 1.0
    rho: Param = 1.0
    a: Param = 2.0
    threshold: Optional[float] = None
    column: int = 0

    def __call__(self, z, z2):
        s2 = _positive(self.sigma2, "sigma2")
        rho = _positive(self.rho, "rho")
        a = _positive(self.a, "a")
        t, u = _column(z, self.column), _column(z2, self.column)
        d = t[:, None] - u[None, :]
        k = s2 * (1.0 + d**2 / (2.0 * a * rho**2)) ** (-a)
        if self.threshold is not None:
            tau = _num(self.threshold, "threshold")
            k = k * np.outer(t >= tau, u >= tau)
        return k


@dataclass(frozen=True)
class Linear(Kernel):
    c: Param = 1.0
    offset: Param = 0.0
    column: int = 0

    def __call__(self, z, z2):
        c = _num(self.c, "c")
        if c < 0:
            raise InvalidSpec(f"linear kernel constant must be nonnegative, got {c}")
        off = _num(self.offset, "offset")
        t, u = _column(z, self.column), _column(z2, self.column)
        return c + np.outer(t - off, u - off)


@dataclass(frozen=True)
class WarpedSE(Kernel):
    sigma2: Param = 1.0
    rho: Param = 1.0
    m: Param = 0.0
    s: Param = 1.0
    alpha: Param = 0.0
    literal: bool = False
    column: int = 0

    def warp(self, t):
        return warp_skewed_gaussian(
            t, _num(self.m, "m"), _positive(self.s, "s"), _num(self.alpha, "alpha"), self.literal
        )

    def __call__(self, z, z2):
        w = self.warp(_column(z, self.column))
        w2 = self.warp(_column(z2, self.column))
        inner = SquaredExponential(self.sigma2, self.rho)
        return inner(w, w2)


@dataclass(frozen=True)
class BlockMask(Kernel):
    column: int = 0
    active: Optional[Tuple] = None

    def __call__(self, z, z2):
        a, b = _column(z, self.column), _column(z2, self.column)
        k = (a[:, None] == b[None, :]).astype(float)
        if self.active is not None:
            k *= np.isin(a, self.active)[:, None]
        return k


@dataclass(frozen=True)
class WhiteNoise(Kernel):
    eps: Param = 1e-6
    column: int = 0

    def __call__(self, z, z2):
        eps = _positive(self.eps, "eps")
        a, b = _column(z, self.column), _column(z2, self.column)
        return eps * (a[:, None] == b[None, :])


@dataclass(frozen=True)
class Product(Kernel):
    factors: Tuple[Kernel, ...] = ()

    def __post_init__(self):
        if len(self.factors) == 0:
            raise InvalidSpec("Product kernel needs at least one factor")
        object.__setattr__(self, "factors", tuple(self.factors))

    def free_names(self):
        return [n for f in self.factors for n in f.free_names()]

    def resolve(self, values):
        return Product(tuple(f.resolve(values) for f in self.factors))

    def params(self):
        return {"factors": [f.params() for f in self.factors]}

    def __call__(self, z, z2):
        k = self.factors[0](z, z2)
        for f in self.factors[1:]:
            k = k * f(z, z2)
        return k


KERNEL_TYPES = {
    "se": SquaredExponential,
    "squared_exponential": SquaredExponential,
    "periodic": Periodic,
    "rq": RationalQuadratic,
    "rational_quadratic": RationalQuadratic,
    "linear": Linear,
    "warped_se": WarpedSE,
    "block_mask": BlockMask,
    "white_noise": WhiteNoise,
    "product": Product,
}

_TYPE_NAMES = {
    SquaredExponential: "se",
    Periodic: "periodic",
    RationalQuadratic: "rq",
    Linear: "linear",
    WarpedSE: "warped_se",
    BlockMask: "block_mask",
    WhiteNoise: "white_noise",
    Product: "product",
}


def kernel_from_dict(d):
    """Build a kernel from its JSON form, e.g. ``{"type": "se", "rho": 30}``."""
    if not isinstance(d, dict) or "type" not in d:
        raise InvalidSpec(f"kernel spec must be an object with a 'type' field, got {d!r}")
    d = dict(d)
    kind = d.pop("type")
    if kind not in KERNEL_TYPES:
        raise InvalidSpec(f"unknown kernel type {kind!r}")
    cls = KERNEL_TYPES[kind]
    if cls is Product:
        return Product(tuple(kernel_from_dict(f) for f in d.pop("factors", [])))
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise InvalidSpec(f"kernel {kind!r} has unknown fields {sorted(unknown)}")
    if "active" in d and d["active"] is not None:
        d["active"] = tuple(d["active"])
    return cls(**d)


def kernel_to_dict(k):
    if isinstance(k, Product):
        return {"type": "product", "factors": [kernel_to_dict(f) for f in k.factors]}
    d = {"type": _TYPE_NAMES[type(k)]}
    for f in fields(k):
        v = getattr(k, f.name)
        d[f.name] = list(v) if isinstance(v, tuple) else v
    return d


def kernel_matrix(spec, z, z2=None):
    """Raw (un-jittered) cross-covariance between ``z`` and ``z2``."""
    symmetric = z2 is None
    K = spec(z, z if symmetric else z2)
    if not np.all(np.isfinite(K)):
        raise InvalidSpec("kernel produced non-finite values")
    if symmetric:
        K = 0.5 * (K + K.T)
    return K


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    jitter_applied: float = 0.0


def gram(spec, z, z2=None):
    """Evaluate ``spec`` over inputs.

    With ``z2`` omitted the square Gram matrix is symmetrised and passed
    through the jitter ladder; ``jitter_applied`` records the diagonal
    jitter needed for a Cholesky factorization and ``values`` includes it.
    """
    K = kernel_matrix(spec, z, z2)
    if z2 is not None:
        return GramMatrix(K, 0.0)
    _, eps = cholesky_jittered(K, return_jitter=True)
    if eps:
        K = K + eps * np.eye(K.shape[0])
    return GramMatrix(K, eps)
