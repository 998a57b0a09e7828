"""Log-ratio transforms between the simplex and real coordinates.

Compositions are ``D x N`` arrays with one composition per column. ALR
coordinates are ``(D-1) x N`` and use a single reference taxon as
denominator (the last taxon unless told otherwise). Reference indices are
zero-based; ``ref=None`` and ``ref=-1`` both mean the last taxon.
"""

import numpy as np

from .errors import InvalidReference


def _ref_index(ref, D):
    if ref is None:
        return D - 1
    ref = int(ref)
    if ref < 0:
        ref += D
    if not 0 <= ref < D:
        raise InvalidReference(f"reference {ref} outside 0..{D - 1}")
    return ref


def alr(pi, ref=None):
    """Additive log-ratio transform, ``log(pi_d / pi_ref)`` with the ref row dropped."""
    pi = np.asarray(pi, dtype=float)
    D = pi.shape[0]
    r = _ref_index(ref, D)
    logp = np.log(pi)
    return np.delete(logp - logp[r], r, axis=0)


def augment(H, ref=None):
    """Insert a zero row at the reference position (``(D-1) x ...`` -> ``D x ...``)."""
    H = np.asarray(H, dtype=float)
    D = H.shape[0] + 1
    r = _ref_index(ref, D)
    return np.insert(H, r, 0.0, axis=0)


def alr_inv(H, ref=None):
    """Inverse ALR (identified softmax) with per-column max subtraction."""
    eta = augment(H, ref)
    eta = eta - eta.max(axis=0, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=0, keepdims=True)


def alr_to_clr(H, ref=None, axis=0):
    """Map ALR draws to centred log-ratio coordinates.

    Linear: augment with a zero at the reference and subtract the mean over
    taxa. ``axis`` is the taxon axis, so stacks of draws such as
    ``(S, D-1, N)`` work with ``axis=1``.
    """
    H = np.moveaxis(np.asarray(H, dtype=float), axis, 0)
    eta = augment(H, ref)
    clr = eta - eta.mean(axis=0, keepdims=True)
    return np.moveaxis(clr, 0, axis)


def clr(pi):
    logp = np.log(np.asarray(pi, dtype=float))
    return logp - logp.mean(axis=0, keepdims=True)


def naddgp_transform(Y, ref=None, pseudocount=0.5):
    """Treat counts as observed log-ratios: ``alr(closure(Y + 0.5))``."""
    Y = np.asarray(Y, dtype=float)
    Yp = Y + pseudocount
    return alr(Yp / Yp.sum(axis=0, keepdims=True), ref)
