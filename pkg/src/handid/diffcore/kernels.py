"""Forward/backward kernel pairs.

Every kernel is dtype preserving, so the same code runs in float32 for
training and in float64 under the finite-difference checker.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from handid.errors import BatchSizeError, ConfigError, DimensionError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def fc_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"fc expects 2-D input/weights and 1-D bias, got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(f"fc shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w + b


def fc_backward(dy, x, w):
    """Returns (dx, dw, db) for ``y = x @ w + b``."""
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def _norm_padding(padding):
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    (pt, pb), (pl, pr) = padding
    return (int(pt), int(pb)), (int(pl), int(pr))


def conv_output_size(size, k, stride, pad_before, pad_after):
    span = size + pad_before + pad_after - k
    if k < 1 or stride < 1:
        raise ConfigError(f"conv kernel and stride must be >= 1 (k={k}, stride={stride})")
    if span < 0 or span % stride:
        raise ConfigError(
            f"non-integral conv output: ({size}+{pad_before}+{pad_after}-{k})/{stride}+1"
        )
    return span // stride + 1


def conv2d_forward(x, k, b=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``k`` (F,C,kh,kw).

    ``padding`` is an int or ``((top, bottom), (left, right))`` zero padding.
    Returns the output and the im2col buffer needed by the backward pass.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape}, {k.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = k.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernels expect {kc}")
    (pt, pb), (pl, pr) = _norm_padding(padding)
    ho = conv_output_size(h, kh, stride, pt, pb)
    wo = conv_output_size(w, kw, stride, pl, pr)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(cols[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ k.reshape(f, -1).T
    if b is not None:
        out += b
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_backward(dy, x_shape, cols, k, stride=1, padding=0, need_input_grad=True):
    """Returns (dx, dk, db); dx is None when ``need_input_grad`` is false."""
    n, c, h, w = x_shape
    f, _, kh, kw = k.shape
    (pt, pb), (pl, pr) = _norm_padding(padding)
    ho, wo = dy.shape[2], dy.shape[3]
    dy2 = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    dk = (dy2.T @ cols).reshape(k.shape)
    db = dy2.sum(axis=0)
    if not need_input_grad:
        return None, dk, db
    dcols = (dy2 @ k.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=dy.dtype)
    hi = stride * (ho - 1) + 1
    wi = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hi:stride, j:j + wi:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pt:pt + h, pl:pl + w]
    return np.ascontiguousarray(dx), dk, db


def batch_norm_forward(x, gamma, beta, running_mean, running_var, train=True,
                       eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-feature batch normalization of ``x`` (N,D).

    In train mode the running statistics arrays are updated in place
    (unbiased variance, PyTorch convention).
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm shape mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if train:
        n = x.shape[0]
        if n < 2:
            raise BatchSizeError(f"batch_norm in train mode needs N >= 2, got {n}")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * n / (n - 1)).astype(running_var.dtype)
    else:
        inv_std = 1.0 / np.sqrt(running_var.astype(x.dtype) + eps)
        xhat = (x - running_mean.astype(x.dtype)) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, train)


def batch_norm_backward(dy, gamma, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = dy.shape[0]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def activation_forward(x, kind):
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0)
    raise ConfigError(f"unknown activation {kind!r}", key="activation")


def activation_backward(dy, y, kind):
    """Gradient from the activation *output* ``y``."""
    if kind == "tanh":
        return dy * (1 - y * y)
    if kind == "relu":
        return dy * (y > 0)
    raise ConfigError(f"unknown activation {kind!r}", key="activation")
