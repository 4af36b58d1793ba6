"""Central finite-difference gradient checking."""

import numpy as np


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def numeric_gradient(f, x, eps=1e-3, mask=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if mask is None else np.flatnonzero(mask.reshape(-1))
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = float(f())
        flat[i] = old - eps
        fm = float(f())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def finite_difference_check(f, inputs, analytic, eps=1e-3, masks=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` evaluates the scalar objective reading the arrays in ``inputs``
    (which are perturbed in place and restored); ``analytic`` holds the
    matching gradient arrays.  ``masks`` optionally restricts the checked
    coordinates, e.g. away from non-differentiable points.
    """
    worst = 0.0
    masks = masks or [None] * len(inputs)
    for x, g, m in zip(inputs, analytic, masks):
        num = numeric_gradient(f, x, eps, m)
        err = relative_error(g, num)
        if m is not None:
            err = err[m]
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
