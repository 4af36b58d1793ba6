"""Keypoint localization and the six-region grid-generate-and-sample stage."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from handid.diffcore import Activation, Conv2d, Flatten, Linear, Module, Sequential
from handid.diffcore.tensor import DTYPE
from handid.errors import ConfigError, DimensionError, GeometryError, LoadError
from handid.regions import (
    FINGER_ROI, KEYPOINT_COUNTS, N_KEYPOINTS, PALM_ROI, REGION_SLICES, REGIONS,
)
from handid.sampler import grid_sample, grid_sample_backward, identity_grid
from handid.tps import DEFAULT_REG, TpsWarp, template_layout


@dataclass
class HandKeypoints:
    """42 (x, y) points in normalized image coordinates [0, 1]^2.

    Rows are ordered palm[9], little[7], ring[7], middle[7], index[7],
    thumb[5]; within a finger the fingertip comes first.
    """

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=DTYPE)
        if self.points.shape != (N_KEYPOINTS, 2):
            raise DimensionError(f"HandKeypoints needs shape ({N_KEYPOINTS}, 2), got {self.points.shape}")

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec)
        if vec.size != 2 * N_KEYPOINTS:
            raise DimensionError(f"expected {2 * N_KEYPOINTS} values, got {vec.size}")
        return cls(vec.reshape(N_KEYPOINTS, 2))

    def region(self, name):
        return self.points[REGION_SLICES[name]]

    def to_vector(self):
        return self.points.reshape(-1)


@dataclass
class RoiBundle:
    rois: dict  # region -> (C, H_t, W_t)
    keypoints: HandKeypoints = None

    def __getitem__(self, region):
        return self.rois[region]


# ---------------------------------------------------------------------------
# localizer


def _pad_for(size):
    # stride-2 3x3 conv with one row/column of leading zero padding keeps the
    # output size integral for even inputs: (S + 1 - 3) / 2 + 1 = S / 2
    return ((1, 0), (1, 0)) if size % 2 == 0 else 1


class Localizer(Module):
    """Reference regressor: four stride-2 conv+relu blocks, then fc -> 84.

    Any object with ``forward(images) -> (N, 84)``, ``backward``,
    ``parameters`` and ``freeze`` satisfies the localizer contract.
    """

    def __init__(self, rng, in_channels=1, input_size=128, channels=(8, 16, 32, 32)):
        layers = []
        size = input_size
        c_prev = in_channels
        for i, c in enumerate(channels):
            layers.append(Conv2d(c_prev, c, 3, rng, stride=2, padding=_pad_for(size), name=f"ln.conv{i}"))
            layers.append(Activation("relu"))
            size = size // 2 if size % 2 == 0 else (size - 1) // 2 + 1
            c_prev = c
        self.body = Sequential(*layers, Flatten())
        self.head = Linear(c_prev * size * size, 2 * N_KEYPOINTS, rng, name="ln.head")
        self.input_size = input_size
        self.in_channels = in_channels

    def children(self):
        return [self.body, self.head]

    def parameters(self):
        return self.body.parameters() + self.head.parameters()

    def freeze(self, mode):
        """``mode`` is "all", "all_but_last" or "none"."""
        if mode not in ("all", "all_but_last", "none"):
            raise ConfigError(f"unknown freeze mode {mode!r}", key="freeze")
        self.body.set_requires_grad(mode == "none")
        self.head.set_requires_grad(mode != "all")

    def forward(self, images):
        if images.ndim != 4 or images.shape[1:] != (self.in_channels, self.input_size, self.input_size):
            raise DimensionError(
                f"localizer expects (N, {self.in_channels}, {self.input_size}, {self.input_size}), got {images.shape}"
            )
        return self.head.forward(self.body.forward(images))

    def backward(self, dout, need_input_grad=False):
        body_trainable = any(p.requires_grad for p in self.body.parameters())
        dfeat = self.head.backward(dout, need_input_grad=body_trainable or need_input_grad)
        if body_trainable or need_input_grad:
            return self.body.backward(dfeat, need_input_grad=need_input_grad)
        return None


def resize(image, size):
    """Corner-aligned bilinear resize of (C,H,W) or (N,C,H,W) to size x size."""
    if image.shape[-1] == size and image.shape[-2] == size:
        return image
    grid = identity_grid(size, size, dtype=image.dtype)
    if image.ndim == 4:
        grid = np.broadcast_to(grid, (image.shape[0], size, size, 2))
    out, _ = grid_sample(image, grid)
    return out


def localizer_input(images, size, mean=0.5, std=0.25):
    return ((resize(images, size) - mean) / std).astype(images.dtype, copy=False)


def localize(image, localizer, mean=0.5, std=0.25):
    """Regress HandKeypoints from one (C,H,W) image; outputs are not clamped."""
    if image.ndim != 3:
        raise DimensionError(f"localize expects a (C,H,W) image, got {image.shape}")
    x = localizer_input(image[None].astype(DTYPE), localizer.input_size, mean, std)
    out = localizer.forward(x)
    if out.shape != (1, 2 * N_KEYPOINTS):
        raise DimensionError(f"localizer produced {out.shape}, expected (1, {2 * N_KEYPOINTS})")
    return HandKeypoints.from_vector(out[0])


# ---------------------------------------------------------------------------
# multi-region alignment


def width_anchor_map(k, size):
    """Linear map from a finger's K centerline targets to two width anchors.

    Centerline layouts are collinear, which leaves the across-finger scale
    of the spline undetermined.  The anchors sit at template (+-1, 0); their
    targets are the centerline mean offset perpendicular to the tip->base
    direction, scaled so the template aspect ratio maps isotropically.
    Returns (anchor sources (2, 2), map (4, 2K)) on interleaved x/y vectors.
    """
    h, w = size
    c = (w - 1) / (1.8 * (h - 1))
    mean = np.zeros((2, 2 * k))
    for i in range(k):
        mean[0, 2 * i] = 1.0 / k
        mean[1, 2 * i + 1] = 1.0 / k
    # v = base - tip; perp(v) = (v_y, -v_x)
    perp = np.zeros((2, 2 * k))
    tip, base = 0, k - 1
    perp[0, 2 * base + 1] += 1
    perp[0, 2 * tip + 1] -= 1
    perp[1, 2 * base] -= 1
    perp[1, 2 * tip] += 1
    plus = mean + c * perp
    minus = mean - c * perp
    sources = np.array([[1.0, 0.0], [-1.0, 0.0]])
    return sources, np.concatenate([plus, minus], axis=0)


class Aligner:
    """Six TPS grid generators plus the bilinear sampler, batched.

    Keypoints arrive in [0, 1] image coordinates and are mapped to the
    sampler's [-1, 1] frame, so one set of keypoints can drive images of
    any resolution.
    """

    def __init__(self, reg=DEFAULT_REG, palm_size=PALM_ROI, finger_size=FINGER_ROI):
        self.reg = reg
        self.sizes = {r: tuple(palm_size) if r == "palm" else tuple(finger_size) for r in REGIONS}
        self.warps = {}
        for r in REGIONS:
            layout = template_layout(r, self.sizes[r])
            if r == "palm":
                self.warps[r] = TpsWarp(layout.keypoints, layout.size, reg, r)
            else:
                src, emap = width_anchor_map(KEYPOINT_COUNTS[r], layout.size)
                self.warps[r] = TpsWarp(layout.keypoints, layout.size, reg, r, extra_source=src, extra_map=emap)
        self._cache = None

    def grids(self, keypoints, dtype=DTYPE):
        """(N, 42, 2) keypoints -> {region: (N, H_t, W_t, 2)} grids."""
        kp = np.asarray(keypoints)
        if kp.ndim != 3 or kp.shape[1:] != (N_KEYPOINTS, 2):
            raise DimensionError(f"keypoints must be (N, {N_KEYPOINTS}, 2), got {kp.shape}")
        targets = 2 * kp.astype(dtype, copy=False) - 1
        return {r: self.warps[r].grids(targets[:, REGION_SLICES[r]], dtype) for r in REGIONS}

    def forward(self, images, keypoints):
        """Align a batch: images (N,C,S,S), keypoints (N,42,2) -> {region: ROI batch}."""
        _check_degenerate(keypoints)
        grids = self.grids(keypoints, images.dtype)
        rois, caches = {}, {}
        for r in REGIONS:
            rois[r], caches[r] = grid_sample(images, grids[r])
        self._cache = caches
        return rois

    def backward(self, drois, need_image_grad=False):
        """Keypoint gradient (N,42,2) (and image gradient) from ROI gradients."""
        dkp = None
        dimg = None
        for r in REGIONS:
            if r not in drois or drois[r] is None:
                continue
            di, dg = grid_sample_backward(drois[r], self._cache[r], need_image_grad)
            dt = self.warps[r].backward(dg)  # w.r.t. [-1,1] targets
            if dkp is None:
                dkp = np.zeros((dg.shape[0], N_KEYPOINTS, 2), dtype=dg.dtype)
            dkp[:, REGION_SLICES[r]] += 2 * dt
            if need_image_grad:
                dimg = di if dimg is None else dimg + di
        return dkp, dimg


def _check_degenerate(keypoints, tol=1e-6):
    kp = np.asarray(keypoints, dtype=np.float64)
    for r in REGIONS:
        pts = kp[:, REGION_SLICES[r]]
        spread = np.ptp(pts, axis=1).max(axis=-1)
        if r == "palm":
            # palm lattice must not collapse onto a line
            centered = pts - pts.mean(axis=1, keepdims=True)
            s = np.linalg.svd(centered, compute_uv=False)
            bad = s[:, 1] <= tol
        else:
            bad = spread <= tol
        if np.any(bad):
            raise GeometryError(f"degenerate keypoints for region {r}", r)


def align_regions(image, keypoints, reg=DEFAULT_REG, palm_size=PALM_ROI, finger_size=FINGER_ROI, aligner=None):
    """Align one (C,S,S) image into the six region ROIs."""
    if isinstance(keypoints, HandKeypoints):
        kp = keypoints
    else:
        kp = HandKeypoints(keypoints)
    aligner = aligner or Aligner(reg, palm_size, finger_size)
    rois = aligner.forward(image[None], kp.points[None])
    return RoiBundle({r: v[0] for r, v in rois.items()}, kp)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    rotation: tuple = (0.0, 360.0)  # degrees
    translation: tuple = (-0.25, 0.25)  # fraction of image size
    scale: tuple = (0.8, 1.2)
    brightness: float = 0.2
    contrast: float = 0.2


def similarity_matrix(angle_deg, translation, scale):
    """2x3 map on [0,1] coordinates: p -> c + s R (p - c) + t, c = (0.5, 0.5)."""
    t = np.deg2rad(angle_deg)
    rot = scale * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    c = np.array([0.5, 0.5])
    off = c - rot @ c + np.asarray(translation, dtype=np.float64)
    return np.concatenate([rot, off[:, None]], axis=1)


def apply_similarity(image, keypoints, angle_deg=0.0, translation=(0.0, 0.0), scale=1.0):
    """Warp (C,H,W) image and (42,2) keypoints by the same similarity."""
    m = similarity_matrix(angle_deg, translation, scale)
    kp = np.asarray(keypoints, dtype=np.float64)
    new_kp = kp @ m[:, :2].T + m[:, 2]
    if angle_deg % 360 == 0 and scale == 1.0 and not np.any(translation):
        return image.copy(), new_kp.astype(DTYPE)
    h, w = image.shape[-2:]
    inv = np.linalg.inv(m[:, :2])
    # output pixel centers in [0,1] coordinates (corner aligned)
    lattice = (identity_grid(h, w, np.float64) + 1) / 2
    src = (lattice - m[:, 2]) @ inv.T
    grid = (2 * src - 1).astype(image.dtype)
    out, _ = grid_sample(image, grid)
    return out, new_kp.astype(DTYPE)


def color_jitter(image, rng, brightness=0.2, contrast=0.2):
    c = image.shape[0]
    b = rng.uniform(1 - brightness, 1 + brightness, size=(c, 1, 1))
    k = rng.uniform(1 - contrast, 1 + contrast, size=(c, 1, 1))
    mean = image.mean(axis=(1, 2), keepdims=True)
    return np.clip(((image - mean) * k + mean) * b, 0, 1).astype(image.dtype)


def augment(image, keypoints, rng, config=None):
    """One random similarity (shared by image and keypoints) plus color jitter."""
    config = config or AugmentConfig()
    angle = rng.uniform(*config.rotation)
    trans = rng.uniform(config.translation[0], config.translation[1], size=2)
    scale = rng.uniform(*config.scale)
    img, kp = apply_similarity(image, keypoints, angle, trans, scale)
    if config.brightness or config.contrast:
        img = color_jitter(img, rng, config.brightness, config.contrast)
    return img, kp


# ---------------------------------------------------------------------------
# keypoint CSV


KEYPOINT_HEADER = ["image_id", "region", "index", "x", "y"]


def write_keypoints_csv(path, keypoints):
    """``keypoints`` maps image id -> (42, 2) array or HandKeypoints."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(KEYPOINT_HEADER)
        for image_id, kp in keypoints.items():
            pts = kp.points if isinstance(kp, HandKeypoints) else np.asarray(kp, dtype=DTYPE)
            for r in REGIONS:
                for i, (x, y) in enumerate(pts[REGION_SLICES[r]]):
                    wr.writerow([image_id, r, i, repr(float(x)), repr(float(y))])


def read_keypoints_csv(path, require_complete=True):
    """Parse a keypoint CSV into {image_id: (42, 2) float32 array}.

    Every image must list each region's points exactly once.
    """
    path = Path(path)
    rows = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != KEYPOINT_HEADER:
            raise LoadError(f"{path}: expected header {','.join(KEYPOINT_HEADER)}, got {header}")
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise LoadError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            image_id, region, idx, x, y = row
            if region not in KEYPOINT_COUNTS:
                raise LoadError(f"{path}:{lineno}: image {image_id}: unknown region {region!r}")
            try:
                idx = int(idx)
                xy = (float(x), float(y))
            except ValueError:
                raise LoadError(f"{path}:{lineno}: image {image_id}: malformed number") from None
            if not 0 <= idx < KEYPOINT_COUNTS[region]:
                raise LoadError(f"{path}:{lineno}: image {image_id}: index {idx} out of range for {region}")
            per = rows.setdefault(image_id, {})
            key = (region, idx)
            if key in per:
                raise LoadError(f"{path}:{lineno}: image {image_id}: duplicate point {region}[{idx}]")
            per[key] = xy
    out = {}
    for image_id, per in rows.items():
        if len(per) != N_KEYPOINTS:
            if require_complete:
                raise LoadError(f"{path}: image {image_id} has {len(per)} keypoints, expected {N_KEYPOINTS}")
            continue
        pts = np.empty((N_KEYPOINTS, 2), dtype=DTYPE)
        for r in REGIONS:
            for i in range(KEYPOINT_COUNTS[r]):
                pts[REGION_SLICES[r].start + i] = per[(r, i)]
        out[image_id] = pts
    return out
