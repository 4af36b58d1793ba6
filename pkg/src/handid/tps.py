"""Thin-plate-spline fitting and deformation-grid generation.

A spline maps template coordinates to image coordinates (both in the
corner-aligned [-1, 1] frame used by :mod:`handid.sampler`).  Since the
linear system depends only on the source points, every grid coordinate is a
fixed linear combination of the target points; :class:`TpsWarp` caches that
map so the forward pass is one matmul and the backward pass its transpose.
"""

import logging
from dataclasses import dataclass

import numpy as np

from handid.errors import GeometryError
from handid.regions import FINGER_ROI, KEYPOINT_COUNTS, PALM_ROI, check_region
from handid.sampler import DeformationGrid, identity_grid

log = logging.getLogger(__name__)

COND_WARN = 1e8
COND_FAIL = 1e13
DEFAULT_REG = 1e-6


@dataclass
class TemplateLayout:
    region: str
    keypoints: np.ndarray  # (K, 2) in [-1, 1]^2
    size: tuple  # (H_t, W_t)


@dataclass
class TpsCoefficients:
    w: np.ndarray  # (K, 2) radial weights
    a: np.ndarray  # (3, 2) affine part, rows: offset, x, y
    source: np.ndarray  # (K, 2)
    reg: float

    def __call__(self, points):
        return tps_eval(self, points)


def template_layout(region, size=None):
    """Canonical keypoint layout of a region's template.

    Fingers and thumb: points evenly spaced on the vertical centerline,
    fingertip (y=-0.9) first, base (y=0.9) last.  Palm: the 3x3 lattice
    {-0.7, 0, 0.7}^2 in row-major order.
    """
    try:
        check_region(region)
    except ValueError as exc:
        raise GeometryError(str(exc)) from None
    if region == "palm":
        v = np.array([-0.7, 0.0, 0.7])
        gx, gy = np.meshgrid(v, v)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        default = PALM_ROI
    else:
        k = KEYPOINT_COUNTS[region]
        pts = np.stack([np.zeros(k), np.linspace(-0.9, 0.9, k)], axis=1)
        default = FINGER_ROI
    return TemplateLayout(region, pts, tuple(size) if size is not None else default)


def radial_kernel(r2):
    """U(r) = r^2 log(r^2) written in terms of r^2, with U(0) = 0."""
    r2 = np.asarray(r2, dtype=np.float64)
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def _pairwise_r2(a, b):
    d = a[:, None, :] - b[None, :, :]
    return (d * d).sum(-1)


def _basis(points, source):
    points = np.asarray(points, dtype=np.float64)
    u = radial_kernel(_pairwise_r2(points, source))
    return np.concatenate([u, np.ones((len(points), 1)), points], axis=1)


def _system(source, reg, region=None):
    source = np.asarray(source, dtype=np.float64)
    k = len(source)
    if k < 3:
        raise GeometryError(f"TPS needs at least 3 control points, got {k}", region)
    p = np.concatenate([np.ones((k, 1)), source], axis=1)
    if np.linalg.matrix_rank(p, tol=1e-9) < 3:
        raise GeometryError("control points are collinear; TPS system is singular", region)
    lmat = np.zeros((k + 3, k + 3))
    lmat[:k, :k] = radial_kernel(_pairwise_r2(source, source)) + reg * np.eye(k)
    lmat[:k, k:] = p
    lmat[k:, :k] = p.T
    cond = np.linalg.cond(lmat)
    if not np.isfinite(cond) or cond > COND_FAIL:
        raise GeometryError(f"ill-conditioned TPS system (cond={cond:.3g})", region)
    if cond > COND_WARN:
        log.warning("TPS system for %s has condition number %.3g", region or "region", cond)
    return lmat


def tps_fit(source, target, reg=0.0, region=None):
    """Fit the spline mapping ``source`` points onto ``target`` points.

    The linear solve (LU with partial pivoting) runs in float64.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 2:
        raise GeometryError(f"source {source.shape} and target {target.shape} must both be (K, 2)", region)
    lmat = _system(source, reg, region)
    k = len(source)
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = target
    sol = np.linalg.solve(lmat, rhs)
    return TpsCoefficients(w=sol[:k], a=sol[k:], source=source, reg=float(reg))


def tps_eval(coeffs, points):
    points = np.asarray(points, dtype=np.float64)
    return _basis(points, coeffs.source) @ np.concatenate([coeffs.w, coeffs.a], axis=0)


def template_lattice(size, dtype=np.float64):
    """Template pixel centers as an (H_t, W_t, 2) array of (x, y)."""
    return identity_grid(size[0], size[1], dtype=dtype)


def tps_grid(coeffs, layout):
    lattice = template_lattice(layout.size).reshape(-1, 2)
    coords = tps_eval(coeffs, lattice).reshape(layout.size[0], layout.size[1], 2)
    return DeformationGrid(layout.region, coords.astype(np.float32))


def tps_linear_map(source, points, reg=0.0, region=None):
    """Matrix M with f(points) = M @ target for every target configuration."""
    lmat = _system(source, reg, region)
    k = len(source)
    sel = np.zeros((k + 3, k))
    sel[:k] = np.eye(k)
    return _basis(points, np.asarray(source, dtype=np.float64)) @ np.linalg.solve(lmat, sel)


class TpsWarp:
    """Cached, batched grid generator for one region.

    ``extra_source`` optionally appends E auxiliary control points whose
    targets are a fixed linear map (``extra_map``, shape (2E, 2K) on
    interleaved x/y vectors) of the K targets; see
    :func:`handid.alignment.width_anchor_map`.
    """

    def __init__(self, source, size, reg=DEFAULT_REG, region=None, extra_source=None, extra_map=None):
        self.region = region
        self.size = tuple(size)
        self.k = len(source)
        src = np.asarray(source, dtype=np.float64)
        lattice = template_lattice(self.size).reshape(-1, 2)
        if extra_source is None:
            m = tps_linear_map(src, lattice, reg, region)  # (P, K)
            # same matrix for x and y
            self.matrix = np.kron(m, np.eye(2))  # (2P, 2K)
        else:
            full = np.concatenate([src, np.asarray(extra_source, dtype=np.float64)], axis=0)
            m = tps_linear_map(full, lattice, reg, region)  # (P, K+E)
            mk = np.kron(m[:, :self.k], np.eye(2))
            me = np.kron(m[:, self.k:], np.eye(2))  # (2P, 2E)
            self.matrix = mk + me @ extra_map  # extra_map: (2E, 2K)

    def grids(self, targets, dtype=np.float32):
        """Grids for a batch of targets (N, K, 2) -> (N, H_t, W_t, 2)."""
        targets = np.asarray(targets)
        n = targets.shape[0]
        mat = self.matrix.astype(dtype, copy=False)
        flat = targets.reshape(n, 2 * self.k).astype(dtype, copy=False) @ mat.T
        return flat.reshape(n, self.size[0], self.size[1], 2)

    def backward(self, dgrids):
        """Gradient w.r.t. targets (N, K, 2) from grid gradients (N, H_t, W_t, 2)."""
        n = dgrids.shape[0]
        mat = self.matrix.astype(dgrids.dtype, copy=False)
        return (dgrids.reshape(n, -1) @ mat).reshape(n, self.k, 2)
