"""Cross-entropy, batch-hard triplet, keypoint and joint multi-feature losses.

Each loss returns ``(value, gradient)`` with the gradient taken w.r.t. its
array input, so the trainer can chain it straight into the backward passes.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from handid.errors import ConfigError, DimensionError
from handid.features import FEATURE_TYPES


class EmptyTripletWarning(UserWarning):
    pass


@dataclass
class LossWeights:
    triplet: float = 40.0
    l1: float = 1.0
    l2: float = 0.1
    keypoint: float = 1.0
    margin: float = 0.3
    kp_start_epoch: int = 20  # lambda_KP is zero for epoch <= this

    def __post_init__(self):
        for name in ("triplet", "l1", "l2", "keypoint", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0", key=name)

    @staticmethod
    def ce(epoch):
        if epoch < 1:
            raise ConfigError(f"epochs are numbered from 1, got {epoch}", key="epoch")
        return 1.0 / epoch

    def kp(self, epoch):
        return self.keypoint if epoch > self.kp_start_epoch else 0.0


@dataclass
class TripletSet:
    anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    positives: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    negatives: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.anchors)

    def as_tuples(self):
        return list(zip(self.anchors.tolist(), self.positives.tolist(), self.negatives.tolist()))


def cross_entropy(logits, labels):
    """Batch-summed softmax cross-entropy and its logit gradient."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, c = logits.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].sum()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    return loss.astype(logits.dtype), grad.astype(logits.dtype)


def pairwise_distances(x):
    """Euclidean distance matrix; computed from differences for exactness."""
    d = x[:, None, :] - x[None, :, :]
    return np.sqrt((d * d).sum(-1))


def batch_hard_mine(embeddings, labels):
    """One triplet per eligible anchor: farthest positive, nearest negative.

    Ties go to the smallest index (``argmax``/``argmin`` semantics).
    """
    x = np.asarray(embeddings)
    labels = np.asarray(labels)
    n = len(labels)
    if x.ndim != 2 or x.shape[0] != n:
        raise DimensionError(f"batch_hard_mine: embeddings {x.shape}, labels {labels.shape}")
    if n < 2:
        raise ValueError("batch_hard_mine needs at least 2 samples")
    dist = pairwise_distances(x.astype(np.float64))
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    eligible = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not eligible.any():
        warnings.warn("batch_hard_mine: no anchor has both a positive and a negative", EmptyTripletWarning)
        return TripletSet()
    pos_d = np.where(pos_mask, dist, -np.inf)
    neg_d = np.where(neg_mask, dist, np.inf)
    anchors = np.flatnonzero(eligible)
    return TripletSet(anchors, pos_d[anchors].argmax(axis=1), neg_d[anchors].argmin(axis=1))


def triplet_loss(embeddings, triplets, margin=0.3):
    """Sum of hinge terms max(d(a,p) - d(a,n) + margin, 0), Euclidean d.

    Returns (loss, gradient w.r.t. embeddings, number of active triplets).
    """
    x = np.asarray(embeddings)
    grad = np.zeros_like(x)
    if len(triplets) == 0:
        warnings.warn("triplet_loss: empty triplet set", EmptyTripletWarning)
        return x.dtype.type(0), grad, 0
    a, p, n = triplets.anchors, triplets.positives, triplets.negatives
    dap_v = x[a] - x[p]
    dan_v = x[a] - x[n]
    dap = np.sqrt((dap_v * dap_v).sum(1))
    dan = np.sqrt((dan_v * dan_v).sum(1))
    h = dap - dan + margin
    active = h > 0
    loss = h[active].sum()
    tiny = np.finfo(x.dtype).tiny
    ua = dap_v / np.maximum(dap, tiny)[:, None]
    un = dan_v / np.maximum(dan, tiny)[:, None]
    # the distance subgradient at coincident points is taken as 0
    ua[dap == 0] = 0
    un[dan == 0] = 0
    w = active[:, None].astype(x.dtype)
    np.add.at(grad, a, w * (ua - un))
    np.add.at(grad, p, -w * ua)
    np.add.at(grad, n, w * un)
    return x.dtype.type(loss), grad, int(active.sum())


def keypoint_loss(target, pred, l2=0.1, l1=1.0):
    """lambda_l2 * mean squared error + lambda_l1 * mean absolute error.

    Means run over every coordinate of every sample.  Returns (loss, grad
    w.r.t. ``pred``).
    """
    target = np.asarray(target)
    pred = np.asarray(pred)
    if target.shape != pred.shape:
        raise DimensionError(f"keypoint_loss: target {target.shape} vs prediction {pred.shape}")
    diff = pred - target.astype(pred.dtype)
    count = diff.size
    loss = l2 * np.mean(diff * diff) + l1 * np.mean(np.abs(diff))
    grad = (2 * l2 / count) * diff + (l1 / count) * np.sign(diff)
    return pred.dtype.type(loss), grad.astype(pred.dtype)


def joint_multi_feature_loss(ce_losses, triplet_losses, kp_loss, weights, epoch):
    """Weighted total over the seven feature types plus the keypoint term.

    Returns (total, lambda_ce, lambda_kp).
    """
    missing = [m for m in FEATURE_TYPES if m not in ce_losses or m not in triplet_losses]
    if missing:
        raise ConfigError(f"joint loss is missing feature types: {', '.join(missing)}", key="feature_types")
    lam_ce = weights.ce(epoch)
    lam_kp = weights.kp(epoch)
    total = lam_ce * sum(float(ce_losses[m]) for m in FEATURE_TYPES)
    total += weights.triplet * sum(float(triplet_losses[m]) for m in FEATURE_TYPES)
    total += lam_kp * float(kp_loss)
    return total, lam_ce, lam_kp
