"""Differentiable bilinear grid sampling with zero padding.

Normalized coordinates are corner aligned: -1 and 1 land on the first and
last pixel centers of each axis.  Grids store (x, y) in the last axis.
"""

from dataclasses import dataclass

import numpy as np

from handid.errors import DimensionError


@dataclass
class DeformationGrid:
    region: str
    coords: np.ndarray  # (H_t, W_t, 2) or batched (N, H_t, W_t, 2)

    @property
    def size(self):
        return self.coords.shape[-3:-1]


def identity_grid(h, w, dtype=np.float32):
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1).astype(dtype)


# pixels; absorbs rounding of lattice coordinates.  The window is kept
# far below any finite-difference step for float64 input.
_SNAP = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-9}


def _to_pixels(u, size):
    snap = _SNAP.get(u.dtype, 1e-4)
    p = (u.astype(np.float64) + 1) * ((size - 1) / 2)
    r = np.rint(p)
    return np.where(np.abs(p - r) < snap, r, p)


def _corners(coords, h, w):
    px = _to_pixels(coords[..., 0], w)
    py = _to_pixels(coords[..., 1], h)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    return px, py, x0.astype(np.int64), y0.astype(np.int64), fx, fy


def _neighbors(x0, y0, h, w):
    """The four neighbor (row, col, valid) triples in order 00, 01, 10, 11."""
    out = []
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
            out.append((np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1), valid))
    return out


def _as_batch(image, coords):
    single = image.ndim == 3
    if single:
        image = image[None]
        coords = coords[None]
    if image.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2:
        raise DimensionError(f"grid_sample expects (C,H,W)/(N,C,H,W) images, got {image.shape}, grid {coords.shape}")
    if image.shape[0] != coords.shape[0]:
        raise DimensionError(f"batch mismatch: {image.shape[0]} images, {coords.shape[0]} grids")
    if image.shape[2] < 2 or image.shape[3] < 2:
        raise DimensionError(f"grid_sample needs H,W >= 2, got {image.shape[2:]}")
    return single, image, coords


def grid_sample(image, grid):
    """Sample ``image`` (C,H,W) or (N,C,H,W) at ``grid`` coordinates.

    Returns the (C,H_t,W_t) / (N,C,H_t,W_t) output and a cache for
    :func:`grid_sample_backward`.
    """
    coords = grid.coords if isinstance(grid, DeformationGrid) else grid
    single, img, coords = _as_batch(image, coords)
    n, c, h, w = img.shape
    _, _, x0, y0, fx, fy = _corners(coords, h, w)
    fx = fx.astype(img.dtype)
    fy = fy.astype(img.dtype)
    weights = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
    bidx = np.arange(n).reshape(n, 1, 1)
    flat = img.transpose(0, 2, 3, 1)  # N,H,W,C
    out = np.zeros(coords.shape[:-1] + (c,), dtype=img.dtype)
    vals = []
    for (yy, xx, valid), wt in zip(_neighbors(x0, y0, h, w), weights):
        v = flat[bidx, yy, xx] * valid[..., None]
        vals.append(v)
        out += v * wt[..., None]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    cache = (single, img.shape, x0, y0, fx, fy, vals)
    return (out[0] if single else out), cache


def grid_sample_backward(dout, cache, need_image_grad=True):
    """Gradients w.r.t. the image and the grid coordinates.

    Out-of-range neighbors contribute zero to both (zero-padding subgradient).
    """
    single, (n, c, h, w), x0, y0, fx, fy, vals = cache
    if single:
        dout = dout[None]
    d = dout.transpose(0, 2, 3, 1)  # N,Ht,Wt,C
    v00, v01, v10, v11 = vals
    # d out / d fx and d fy per channel, reduced over channels
    dfx = ((1 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10))
    dfy = ((1 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01))
    gx = (d * dfx).sum(axis=-1) * ((w - 1) / 2)
    gy = (d * dfy).sum(axis=-1) * ((h - 1) / 2)
    dgrid = np.stack([gx, gy], axis=-1).astype(dout.dtype)
    dimg = None
    if need_image_grad:
        weights = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
        acc = np.zeros((n * h * w, c), dtype=dout.dtype)
        base = np.arange(n).reshape(n, 1, 1) * (h * w)
        for (yy, xx, valid), wt in zip(_neighbors(x0, y0, h, w), weights):
            contrib = d * (wt * valid)[..., None]
            idx = (base + yy * w + xx).reshape(-1)
            np.add.at(acc, idx, contrib.reshape(-1, c))
        dimg = acc.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dimg = np.ascontiguousarray(dimg)
        if single:
            dimg = dimg[0]
    if single:
        dgrid = dgrid[0]
    return dimg, dgrid
