"""Dataset ingestion, square preprocessing, left-hand flipping and synthesis."""

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from handid.alignment import read_keypoints_csv, write_keypoints_csv
from handid.errors import ConfigError, LoadError, ManifestError, PreprocessingError
from handid.regions import FINGER_ROI, FINGERS, KEYPOINT_COUNTS, N_KEYPOINTS, REGIONS

SPLITS = ("train", "gallery", "probe")
MANIFEST_HEADER = ["id", "file", "side", "label", "split"]


# ---------------------------------------------------------------------------
# image I/O


def to_float(arr8):
    return arr8.astype(np.float32) / np.float32(255)


def to_uint8(arr):
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def read_image(path):
    """8-bit PNG/PGM/PPM -> (C, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode in ("P", "CMYK") else "L")
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return to_float(arr)


def write_image(path, image):
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    elif arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# square preprocessing


def _pad_square(image):
    c, h, w = image.shape
    s = max(h, w)
    top = (s - h) // 2
    left = (s - w) // 2
    out = np.zeros((c, s, s), dtype=image.dtype)
    out[:, top:top + h, left:left + w] = image
    return out


def to_square(image, method="pad_zeros"):
    """Make a (C, H, W) image square.

    pad_zeros: zero rows/columns split evenly (extra one after);
    center_crop: central min(H, W) square;
    otsu_bbox: square box around the largest 4-connected Otsu foreground
    component, clipped to the image and zero padded back to square.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if h == 0 or w == 0:
        raise PreprocessingError("empty image")
    if method == "pad_zeros":
        return _pad_square(image)
    if method == "center_crop":
        s = min(h, w)
        top = (h - s) // 2
        left = (w - s) // 2
        return image[:, top:top + s, left:left + s].copy()
    if method == "otsu_bbox":
        from scipy import ndimage
        from skimage.filters import threshold_otsu

        gray = image.mean(axis=0)
        if np.ptp(gray) == 0:
            raise PreprocessingError("otsu_bbox: constant image has no foreground")
        fg = gray > threshold_otsu(gray)
        lab, count = ndimage.label(fg)  # default structure = 4-connectivity
        if count == 0:
            raise PreprocessingError("otsu_bbox: no foreground component")
        sizes = np.bincount(lab.ravel())[1:]
        rows, cols = np.nonzero(lab == int(np.argmax(sizes)) + 1)
        r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        side = max(r1 - r0, c1 - c0)
        cy2, cx2 = r0 + r1, c0 + c1  # doubled centers keep integer arithmetic
        top = (cy2 - side) // 2
        left = (cx2 - side) // 2
        crop = image[:, max(top, 0):min(top + side, h), max(left, 0):min(left + side, w)]
        return _pad_square(crop)
    raise PreprocessingError(f"unknown square method {method!r}")


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class Dataset:
    ids: list
    images: dict
    keypoints: dict
    sides: dict
    labels: dict
    splits: dict  # id -> train | gallery | probe
    files: dict = field(default_factory=dict)

    def split_ids(self, split):
        return [i for i in self.ids if self.splits.get(i) == split]

    def image_batch(self, ids):
        return np.stack([self.images[i] for i in ids])

    def keypoint_batch(self, ids):
        return np.stack([self.keypoints[i] for i in ids])

    def label_array(self, ids):
        return np.array([self.labels[i] for i in ids], dtype=np.int64)

    @property
    def n_classes(self):
        return len(set(self.labels.values()))

    def equals(self, other):
        if self.ids != other.ids or self.sides != other.sides or self.labels != other.labels:
            return False
        if self.splits != other.splits or set(self.keypoints) != set(other.keypoints):
            return False
        for i in self.ids:
            if not np.array_equal(self.images[i], other.images[i]):
                return False
        return all(np.array_equal(self.keypoints[k], other.keypoints[k]) for k in self.keypoints)


def mirror_hand(image, keypoints=None):
    """Horizontal mirror of a (C,H,W) image and x -> 1 - x on keypoints."""
    out = image[..., ::-1].copy()
    if keypoints is None:
        return out
    kp = np.array(keypoints, dtype=np.float32, copy=True)
    kp[:, 0] = 1 - kp[:, 0]
    return out, kp


def flip_left_hands(ds):
    """Mirror every left hand into a right hand.

    Classes become (person label, side) pairs so the two hands of one person
    are distinct subjects; labels are re-densified in order of first
    appearance.  Side tags are kept, so applying the flip again restores the
    original pixels and keypoints.
    """
    images, kps = dict(ds.images), dict(ds.keypoints)
    pair_ids = {}
    labels = {}
    for i in ds.ids:
        side = ds.sides.get(i)
        if side not in ("L", "R"):
            raise ManifestError(f"image {i}: missing or invalid hand side {side!r}")
        if side == "L":
            if i in kps:
                images[i], kps[i] = mirror_hand(ds.images[i], ds.keypoints[i])
            else:
                images[i] = mirror_hand(ds.images[i])
        key = (ds.labels[i], side)
        labels[i] = pair_ids.setdefault(key, len(pair_ids))
    return replace(ds, images=images, keypoints=kps, labels=labels)


# ---------------------------------------------------------------------------
# on-disk format


def write_dataset(ds, root):
    """Images as 8-bit PNG, plus manifest.csv, keypoints.csv and split lists."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(MANIFEST_HEADER)
        for i in ds.ids:
            rel = ds.files.get(i) or f"images/{i}.png"
            write_image(root / rel, ds.images[i])
            wr.writerow([i, rel, ds.sides[i], ds.labels[i], ds.splits[i]])
    write_keypoints_csv(root / "keypoints.csv", {i: ds.keypoints[i] for i in ds.ids if i in ds.keypoints})
    for s in SPLITS:
        (root / f"{s}.txt").write_text("".join(f"{i}\n" for i in ds.split_ids(s)))
    return root / "manifest.csv"


def _read_split_files(root):
    found = {}
    for s in SPLITS:
        p = root / f"{s}.txt"
        if p.exists():
            found[s] = [ln.strip() for ln in p.read_text().splitlines() if ln.strip()]
    return found


def load_dataset(manifest_path, keypoints_path=None):
    """Load and validate a dataset written by :func:`write_dataset` (or by hand).

    Split text files next to the manifest, when present, define the
    partition and must be pairwise disjoint; otherwise the manifest's split
    column is used.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    if not manifest_path.exists():
        raise LoadError(f"manifest not found: {manifest_path}")
    ids, files, sides, labels, splits = [], {}, {}, {}, {}
    with open(manifest_path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != MANIFEST_HEADER:
            raise LoadError(f"{manifest_path}: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise LoadError(f"{manifest_path}:{lineno}: expected 5 fields, got {len(row)}")
            i, f, side, label, split = row
            if i in files:
                raise LoadError(f"{manifest_path}:{lineno}: duplicate image id {i}")
            if side not in ("L", "R"):
                raise LoadError(f"{manifest_path}:{lineno}: image {i}: side must be L or R, got {side!r}")
            try:
                labels[i] = int(label)
            except ValueError:
                raise LoadError(f"{manifest_path}:{lineno}: image {i}: label {label!r} is not an integer") from None
            if split and split not in SPLITS:
                raise LoadError(f"{manifest_path}:{lineno}: image {i}: unknown split {split!r}")
            ids.append(i)
            files[i] = f
            sides[i] = side
            splits[i] = split
    present = sorted(set(labels.values()))
    if present != list(range(len(present))):
        raise LoadError(f"{manifest_path}: class labels must be dense integers 0..{len(present) - 1}")

    split_files = _read_split_files(root)
    if split_files:
        seen = {}
        for s, members in split_files.items():
            for i in members:
                if i in seen:
                    raise LoadError(f"image {i} listed in both {seen[i]}.txt and {s}.txt")
                if i not in files:
                    raise LoadError(f"{s}.txt lists unknown image id {i}")
                seen[i] = s
        splits = {i: seen.get(i, "") for i in ids}

    kp_path = Path(keypoints_path) if keypoints_path else root / "keypoints.csv"
    keypoints = read_keypoints_csv(kp_path) if kp_path.exists() else {}
    unknown = set(keypoints) - set(files)
    if unknown:
        raise LoadError(f"{kp_path}: keypoints for unknown image id {sorted(unknown)[0]}")
    images = {}
    for i in ids:
        if splits[i] == "train" and i not in keypoints:
            raise LoadError(f"train image {i} has no keypoints")
        p = root / files[i]
        if not p.exists():
            raise LoadError(f"image {i}: file not found: {p}")
        try:
            images[i] = read_image(p)
        except OSError as exc:
            raise LoadError(f"image {i}: cannot read {p}: {exc}") from None
    return Dataset(ids, images, keypoints, sides, labels, splits, files)


# ---------------------------------------------------------------------------
# synthetic hands


@dataclass
class SynthConfig:
    n_identities: int = 20
    images_per_identity: int = 10
    image_size: int = 96
    texture_seed: int = 0
    keypoint_jitter: float = 0.03  # pose perturbation amplitude
    noise: float = 0.04  # per-pixel photometric noise std
    train_per_identity: int = 6
    gallery_per_identity: int = 2
    identity_contrast: float = 0.8  # identity-specific share of the texture
    finger_contrast: float = 1.0  # finger texture amplitude relative to palm
    finger_roi: tuple = FINGER_ROI  # template aspect used for finger widths

    def __post_init__(self):
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise ConfigError("identity and image counts must be >= 1", key="n_identities")
        if self.train_per_identity + self.gallery_per_identity > self.images_per_identity:
            raise ConfigError("train + gallery images per identity exceed images per identity",
                              key="train_per_identity")


_GRATINGS = 6
# fingers are a few pixels wide: their patterns are crease-like bands across the axis
_PALM_GRATING = {"freq": (1.0, 3.0), "theta": (0.0, np.pi)}
_FINGER_GRATING = {"freq": (0.75, 2.5), "theta": (np.pi / 2 - 0.35, np.pi / 2 + 0.35)}
_GRATING = {r: _PALM_GRATING if r == "palm" else _FINGER_GRATING for r in REGIONS}


def _gratings(rng, n=_GRATINGS, freq=(1.0, 4.0), theta=(0.0, np.pi)):
    return {
        "theta": rng.uniform(*theta, n),
        "freq": rng.uniform(*freq, n),
        "phase": rng.uniform(0, 2 * np.pi, n),
        "amp": rng.uniform(0.5, 1.0, n),
    }


def _texture(g, u, v):
    acc = np.zeros_like(u)
    for t, f, p, a in zip(g["theta"], g["freq"], g["phase"], g["amp"]):
        acc += a * np.sin(np.pi * f * (np.cos(t) * u + np.sin(t) * v) + p)
    return acc / _GRATINGS


def _canonical_skeleton(geom, artic):
    """42 keypoints plus per-region frames in the canonical hand frame."""
    c = np.array([0.5, 0.64])
    hs = geom["palm_half"]
    frames = {"palm": (c, np.array([1.0, 0.0]), np.array([0.0, 1.0]), hs, hs)}
    v = np.array([-0.7, 0.0, 0.7])
    gx, gy = np.meshgrid(v, v)
    pts = [c + hs * np.stack([gx.ravel(), gy.ravel()], axis=1)]
    for k, r in enumerate(FINGERS + ("thumb",)):
        base = np.array(geom["bases"][k])
        ang = np.deg2rad(geom["angles"][k] + artic[k])
        d = np.array([np.sin(ang), -np.cos(ang)])  # base -> tip
        length = geom["lengths"][k]
        tip = base + length * d
        n = KEYPOINT_COUNTS[r]
        t = np.linspace(0, 1, n)[:, None]
        pts.append(tip + t * (base - tip))
        across = np.array([-d[1], d[0]])  # = perp(base - tip) direction
        half = geom["width_ratio"] * length
        # axis frame: origin at centerline mid, x across, y from tip to base
        frames[r] = ((tip + base) / 2, across, -d, half, length / 1.8)
    return np.concatenate(pts, axis=0), frames


def _identity_geometry(rng, width_ratio):
    s = rng.uniform(0.95, 1.05)
    lengths = np.array([0.19, 0.24, 0.26, 0.23, 0.18]) * s * rng.uniform(0.94, 1.06, 5)
    bases = [(0.375, 0.47), (0.455, 0.465), (0.535, 0.465), (0.615, 0.47), (0.665, 0.72)]
    angles = np.array([-8.0, -3.0, 1.0, 5.0, 50.0]) + rng.uniform(-3, 3, 5)
    return {
        "palm_half": 0.165 * s,
        "lengths": lengths,
        "bases": bases,
        "angles": angles,
        "width_ratio": width_ratio,
    }


def _render(size, sim, frames, textures, cfg, rng):
    """Render one hand at 2x supersampling, then box-filter down."""
    ss = 2 * size
    lin = (np.arange(ss) + 0.5) / ss * (size / (size - 1)) - 0.5 / (size - 1)
    px, py = np.meshgrid(lin, lin)
    # output pixel -> canonical coordinates through the inverse similarity
    inv = np.linalg.inv(sim[:, :2])
    q = np.stack([px - sim[0, 2], py - sim[1, 2]], axis=-1) @ inv.T
    img = 0.12 + 0.05 * np.sin(7 * px + rng.uniform(0, 6)) * np.cos(5 * py + rng.uniform(0, 6))
    for r in REGIONS:
        origin, ax, ay, hx, hy = frames[r]
        rel = q - origin
        u = rel @ ax / hx
        v = rel @ ay / hy
        if r == "palm":
            mask = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
            amp = 1.0
        else:
            mask = (np.abs(u) <= 0.85) & (v >= -1.0) & (v <= 1.0)
            amp = cfg.finger_contrast
        common, ident = textures["common"][r], textures["identity"][r]
        um, vm = u[mask], v[mask]
        tex = (1 - cfg.identity_contrast) * _texture(common, um, vm) + cfg.identity_contrast * _texture(ident, um, vm)
        img[mask] = 0.6 + 0.3 * amp * tex
    img = img.reshape(size, 2, size, 2).mean(axis=(1, 3))
    img = img * rng.uniform(0.92, 1.08) + rng.normal(0, cfg.noise, img.shape)
    return np.clip(img, 0, 1)


def synth_generate(config=None, seed=0):
    """Deterministic synthetic hand dataset (right hands, one channel)."""
    from handid.alignment import similarity_matrix

    cfg = config or SynthConfig()
    fh, fw = cfg.finger_roi
    width_ratio = (fw - 1) / (1.8 * (fh - 1))
    root = np.random.SeedSequence([seed, cfg.texture_seed])
    tex_rng = np.random.default_rng(root.spawn(1)[0])
    common = {r: _gratings(tex_rng, **_GRATING[r]) for r in REGIONS}
    ids, images, kps, sides, labels, splits = [], {}, {}, {}, {}, {}
    id_seqs = np.random.SeedSequence([seed, 1]).spawn(cfg.n_identities)
    j = cfg.keypoint_jitter
    for ident, iseq in enumerate(id_seqs):
        irng = np.random.default_rng(iseq)
        textures = {"common": common, "identity": {r: _gratings(irng, **_GRATING[r]) for r in REGIONS}}
        geom = _identity_geometry(irng, width_ratio)
        for k in range(cfg.images_per_identity):
            for _attempt in range(100):
                artic = irng.uniform(-120 * j, 120 * j, 5)
                sim = similarity_matrix(
                    irng.uniform(-200 * j, 200 * j),
                    irng.uniform(-j, j, 2),
                    irng.uniform(1 - 2 * j, 1 + 2 * j),
                )
                canon, frames = _canonical_skeleton(geom, artic)
                pts = canon @ sim[:, :2].T + sim[:, 2]
                if pts.min() >= 0.05 and pts.max() <= 0.95:
                    break
            else:
                raise ConfigError("keypoint_jitter too large to keep keypoints inside [0.05, 0.95]", key="keypoint_jitter")
            img = _render(cfg.image_size, sim, frames, textures, cfg, irng)
            iid = f"s{ident:03d}_{k:02d}"
            ids.append(iid)
            images[iid] = to_float(to_uint8(img))[None]
            kps[iid] = pts.astype(np.float32)
            sides[iid] = "R"
            labels[iid] = ident
            if k < cfg.train_per_identity:
                splits[iid] = "train"
            elif k < cfg.train_per_identity + cfg.gallery_per_identity:
                splits[iid] = "gallery"
            else:
                splits[iid] = "probe"
    return Dataset(ids, images, kps, sides, labels, splits, {i: f"images/{i}.png" for i in ids})


def check_keypoint_count(kp):
    return np.asarray(kp).shape == (N_KEYPOINTS, 2)
