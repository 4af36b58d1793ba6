"""Finite-difference checks for every differentiable operation.

Each check runs in float64 on a seed-derived random instance and returns
the maximum relative error between analytic and central-difference
gradients.  Coordinates within reach of a kink (relu at 0, integer pixel
positions, hinge and |x| at 0) are masked out.
"""

from dataclasses import dataclass

import numpy as np

from handid.alignment import Aligner, width_anchor_map
from handid.dataset import SynthConfig, synth_generate
from handid.diffcore import kernels
from handid.diffcore.gradcheck import finite_difference_check
from handid.features import FEATURE_TYPES, HandFeatureNet
from handid.losses import batch_hard_mine, cross_entropy, keypoint_loss, triplet_loss
from handid.regions import N_KEYPOINTS, REGIONS
from handid.sampler import grid_sample, grid_sample_backward
from handid.tps import TpsWarp, template_layout

F64 = np.float64
SIMPLE_TOL = 1e-4
COMPOSED_TOL = 1e-3


@dataclass
class GradResult:
    op: str
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return bool(self.max_rel_err <= self.tol)


def _rng(seed, tag):
    return np.random.default_rng([seed, sum(map(ord, tag))])


def check_fc(seed, eps=1e-6):
    rng = _rng(seed, "fc")
    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
    r = rng.standard_normal((4, 3))
    dx, dw, db = kernels.fc_backward(r, x, w)
    return finite_difference_check(lambda: np.sum(kernels.fc_forward(x, w, b) * r), [x, w, b], [dx, dw, db], eps)


def check_conv(seed, eps=1e-6):
    rng = _rng(seed, "conv")
    stride, pad = [(1, 1), (2, ((1, 0), (1, 0))), (1, 0)][seed % 3]
    x = rng.standard_normal((2, 2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out, cols = kernels.conv2d_forward(x, k, b, stride, pad)
    r = rng.standard_normal(out.shape)
    dx, dk, db = kernels.conv2d_backward(r, x.shape, cols, k, stride, pad)
    f = lambda: np.sum(kernels.conv2d_forward(x, k, b, stride, pad)[0] * r)  # noqa: E731
    return finite_difference_check(f, [x, k, b], [dx, dk, db], eps)


def check_batch_norm(seed, eps=1e-5):
    rng = _rng(seed, "bn")
    x = rng.standard_normal((6, 4)) * 2 + 1
    g, b = rng.standard_normal(4), rng.standard_normal(4)
    r = rng.standard_normal((6, 4))

    def f():
        y, _ = kernels.batch_norm_forward(x, g, b, np.zeros(4), np.ones(4), train=True)
        return np.sum(y * r)

    _, cache = kernels.batch_norm_forward(x, g, b, np.zeros(4), np.ones(4), train=True)
    dx, dg, db = kernels.batch_norm_backward(r, g, cache)
    return finite_difference_check(f, [x, g, b], [dx, dg, db], eps)


def check_activation(kind):
    def check(seed, eps=1e-6):
        rng = _rng(seed, kind)
        x = rng.standard_normal((5, 6))
        r = rng.standard_normal((5, 6))
        y = kernels.activation_forward(x, kind)
        dx = kernels.activation_backward(r, y, kind)
        mask = np.abs(x) > 10 * eps if kind == "relu" else None
        f = lambda: np.sum(kernels.activation_forward(x, kind) * r)  # noqa: E731
        return finite_difference_check(f, [x], [dx], eps, masks=[mask])
    return check


def _pixel_mask(coords, h, w, margin):
    px = (coords[..., 0] + 1) * (w - 1) / 2
    py = (coords[..., 1] + 1) * (h - 1) / 2
    far = lambda p, s: np.abs(p - np.rint(p)) > margin * s  # noqa: E731
    ok = far(px, (w - 1) / 2) & far(py, (h - 1) / 2)
    return np.stack([ok, ok], axis=-1)


def check_sampler(seed, eps=1e-6):
    rng = _rng(seed, "sampler")
    img = rng.standard_normal((2, 7, 9))
    grid = rng.uniform(-1.1, 1.1, (5, 4, 2))
    out, cache = grid_sample(img, grid)
    r = rng.standard_normal(out.shape)
    dimg, dgrid = grid_sample_backward(r, cache)
    f = lambda: np.sum(grid_sample(img, grid)[0] * r)  # noqa: E731
    # sampling positions also must not cross the zero-padding border kinks
    mask = _pixel_mask(grid, 7, 9, 20 * eps)
    return finite_difference_check(f, [img, grid], [dimg, dgrid], eps, masks=[None, mask])


def check_tps_grid(seed, eps=1e-6):
    rng = _rng(seed, "tps")
    region = REGIONS[seed % len(REGIONS)]
    layout = template_layout(region, (6, 4))
    src = layout.keypoints
    if region != "palm":
        esrc, emap = width_anchor_map(len(src), layout.size)
        warp = TpsWarp(src, layout.size, 0.0, region, esrc, emap)
    else:
        warp = TpsWarp(src, layout.size, 0.0, region)
    tgt = (src + 0.1 * rng.standard_normal(src.shape))[None]
    r = rng.standard_normal((1,) + layout.size + (2,))
    dt = warp.backward(r)
    f = lambda: np.sum(warp.grids(tgt, F64) * r)  # noqa: E731
    return finite_difference_check(f, [tgt], [dt], eps)


def check_cross_entropy(seed, eps=1e-6):
    rng = _rng(seed, "ce")
    z = rng.standard_normal((6, 5)) * 2
    y = rng.integers(0, 5, 6)
    _, g = cross_entropy(z, y)
    return finite_difference_check(lambda: cross_entropy(z, y)[0], [z], [g], eps)


def check_triplet(seed, eps=1e-6):
    rng = _rng(seed, "triplet")
    x = rng.standard_normal((8, 4))
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    trip = batch_hard_mine(x, labels)
    _, g, _ = triplet_loss(x, trip, 0.3)
    a, p, n = trip.anchors, trip.positives, trip.negatives
    h = np.linalg.norm(x[a] - x[p], axis=1) - np.linalg.norm(x[a] - x[n], axis=1) + 0.3
    if np.min(np.abs(h)) < 100 * eps:
        x = x * 1.5  # step away from the hinge; mined triplets are unchanged by scaling
        _, g, _ = triplet_loss(x, trip, 0.3)
    return finite_difference_check(lambda: triplet_loss(x, trip, 0.3)[0], [x], [g], eps)


class _ComposedFixture:
    """Tiny aligner + feature net in float64 with fixed mined triplets."""

    def __init__(self, seed):
        rng = _rng(seed, "composed")
        self.n = 4
        self.aligner = Aligner(1e-6, (8, 8), (16, 8))
        self.net = HandFeatureNet(rng, 2, "conv", 1, (8, 8), (16, 8), (2, 3, 4), em_filters=2)
        self.net.astype(F64)
        self.net.train(True)
        self.labels = np.array([0, 0, 1, 1])
        ds = synth_generate(SynthConfig(n_identities=1, images_per_identity=self.n, image_size=24,
                                        train_per_identity=self.n, gallery_per_identity=0, finger_roi=(16, 8)),
                            seed=seed)
        self.target = ds.keypoint_batch(ds.ids).astype(F64).reshape(self.n, -1)
        self.images = ds.image_batch(ds.ids).astype(F64)
        self.pred = self.target + 0.01 * rng.standard_normal(self.target.shape)
        self.lam_ce, self.lam_t, self.lam_kp = 0.5, 40.0, 1.0
        emb = self._embed(self.pred)
        self.triplets = {m: batch_hard_mine(emb[m], self.labels) for m in FEATURE_TYPES}

    def _embed(self, pred):
        rois = self.aligner.forward(self.images, pred.reshape(self.n, N_KEYPOINTS, 2))
        return self.net.embed(rois)

    def loss(self, pred=None, with_grad=False):
        pred = self.pred if pred is None else pred
        emb = self._embed(pred)
        logits = self.net.logits(emb)
        total = 0.0
        d_emb, d_logits = {}, {}
        for m in FEATURE_TYPES:
            ce, gce = cross_entropy(logits[m], self.labels)
            tl, gt, _ = triplet_loss(emb[m], self.triplets[m], 0.3)
            total += self.lam_ce * ce + self.lam_t * tl
            d_logits[m] = self.lam_ce * gce
            d_emb[m] = self.lam_t * gt
        kp, gkp = keypoint_loss(self.target, pred)
        total += self.lam_kp * kp
        if not with_grad:
            return total
        drois = self.net.backward(d_emb, d_logits, need_roi_grad=True)
        dkp, _ = self.aligner.backward(drois)
        for p in self.net.parameters():
            p.grad = None
        return total, dkp.reshape(self.n, -1) + self.lam_kp * gkp


def check_composed(seed, eps=1e-6, n_coords=24):
    """Full joint loss w.r.t. the localizer output (the 84 keypoint coordinates)."""
    fx = _ComposedFixture(seed)
    _, grad = fx.loss(with_grad=True)
    rng = _rng(seed, "coords")
    mask = np.zeros(fx.pred.shape, dtype=bool)
    mask.reshape(-1)[rng.choice(mask.size, n_coords, replace=False)] = True
    mask &= np.abs(fx.pred - fx.target) > 10 * eps  # |x| kink of the L1 term
    return finite_difference_check(lambda: fx.loss(), [fx.pred], [grad], eps, masks=[mask])


CHECKS = {
    "fc": (check_fc, SIMPLE_TOL),
    "conv2d": (check_conv, SIMPLE_TOL),
    "batch_norm": (check_batch_norm, SIMPLE_TOL),
    "tanh": (check_activation("tanh"), SIMPLE_TOL),
    "relu": (check_activation("relu"), SIMPLE_TOL),
    "grid_sample": (check_sampler, SIMPLE_TOL),
    "tps_grid": (check_tps_grid, SIMPLE_TOL),
    "cross_entropy": (check_cross_entropy, SIMPLE_TOL),
    "triplet": (check_triplet, SIMPLE_TOL),
    "composed_loss": (check_composed, COMPOSED_TOL),
}


def run_suite(seeds=range(20), ops=None):
    """[GradResult] with the worst error over ``seeds`` for each op."""
    out = []
    for op in ops or CHECKS:
        fn, tol = CHECKS[op]
        worst = max(fn(s) for s in seeds)
        out.append(GradResult(op, worst, tol))
    return out
