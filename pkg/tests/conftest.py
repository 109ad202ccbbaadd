"""Shared numeric test helpers."""

import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = g.ravel()
    for i in range(flat_x.size):
        keep = flat_x[i]
        flat_x[i] = keep + h
        fp = f(x)
        flat_x[i] = keep - h
        fm = f(x)
        flat_x[i] = keep
        flat_g[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(got, want):
    """Array-level relative error: inf-norm of the difference over the
    inf-norm of the reference (floored so zero grads compare absolutely)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.max(np.abs(want)), 1e-6)
    return np.max(np.abs(got - want)) / denom
