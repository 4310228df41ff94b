"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

FD_STEP = 1e-5
FD_RTOL = 1e-3
FD_ATOL = 1e-6


def numerical_gradient(fun, x, h: float = FD_STEP, indices=None) -> np.ndarray:
    """Central differences of a scalar function over the entries of ``x``.

    ``indices`` (into the flattened ``x``) restricts the work to a subset;
    the other entries of the result stay 0.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        fp = fun(x)
        flat[i] = old - h
        fm = fun(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def gradients_match(analytic, numeric, rtol: float = FD_RTOL, atol: float = FD_ATOL) -> bool:
    """Elementwise ``|a - n| <= atol + rtol * |n|``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return a.shape == n.shape and bool(np.all(np.abs(a - n) <= atol + rtol * np.abs(n)))


def check_gradient(fun, grad, x, h: float = FD_STEP, rtol: float = FD_RTOL, atol: float = FD_ATOL,
                   indices=None):
    """Compare ``grad(x)`` with central differences of ``fun``; returns (ok, max_abs_err).

    With ``indices`` only those flattened entries are compared.
    """
    a = np.asarray(grad(np.array(x, dtype=np.float64)), dtype=np.float64)
    n = numerical_gradient(fun, x, h, indices)
    if indices is not None:
        a, n = a.reshape(-1)[indices], n.reshape(-1)[indices]
    err = float(np.max(np.abs(a - n))) if a.size else 0.0
    return gradients_match(a, n, rtol, atol), err
