import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handid.errors import ConfigError, DimensionError
from handid.features import FEATURE_TYPES
from handid.gradsuite import check_cross_entropy, check_triplet
from handid.losses import (
    EmptyTripletWarning, LossWeights, TripletSet, batch_hard_mine, cross_entropy,
    joint_multi_feature_loss, keypoint_loss, pairwise_distances, triplet_loss,
)


# -- cross-entropy -----------------------------------------------------------

def test_ce_confident_is_zero():
    loss, _ = cross_entropy(np.array([[100.0, 0.0, 0.0]]), [0])
    assert loss == pytest.approx(0, abs=1e-12)


def test_ce_uniform():
    loss, _ = cross_entropy(np.zeros((1, 4)), [2])
    assert loss == pytest.approx(np.log(4), rel=1e-6)


def test_ce_matches_direct_sum(rng):
    logits = rng.standard_normal((2, 5))
    labels = np.array([1, 4])
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    loss, grad = cross_entropy(logits, labels)
    assert loss == pytest.approx(-np.log(p[0, 1]) - np.log(p[1, 4]))
    onehot = np.eye(5)[labels]
    np.testing.assert_allclose(grad, p - onehot, atol=1e-12)


def test_ce_stable_for_large_logits():
    loss, grad = cross_entropy(np.array([[1000.0, -1000.0]]), [1])
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_ce_label_range():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), [3])
    with pytest.raises(DimensionError):
        cross_entropy(np.zeros((2, 3)), [0])


def test_ce_gradcheck():
    assert max(check_cross_entropy(s) for s in range(5)) < 1e-4


# -- triplet -----------------------------------------------------------------

def _tset(*triples):
    a, p, n = (np.array(v) for v in zip(*triples))
    return TripletSet(a, p, n)


def test_triplet_inactive():
    x = np.array([[0.0, 0.0], [0.2, 0.0], [0.9, 0.0]])
    loss, grad, n_active = triplet_loss(x, _tset((0, 1, 2)), margin=0.5)
    assert loss == 0 and n_active == 0
    assert np.all(grad == 0)


def test_triplet_identical_embeddings_give_margin():
    x = np.ones((4, 3))
    loss, _, n_active = triplet_loss(x, _tset((0, 1, 2), (1, 0, 3)), margin=0.3)
    assert loss == pytest.approx(0.6) and n_active == 2


def test_triplet_matches_per_triplet_oracle(rng):
    x = rng.standard_normal((8, 5))
    ts = _tset((0, 1, 2), (3, 4, 5), (6, 7, 0))
    expect = sum(max(np.linalg.norm(x[a] - x[p]) - np.linalg.norm(x[a] - x[n]) + 0.3, 0) for a, p, n in ts.as_tuples())
    loss, _, _ = triplet_loss(x, ts, 0.3)
    assert loss == pytest.approx(expect)


def test_triplet_gradcheck():
    assert max(check_triplet(s) for s in range(5)) < 1e-4


def test_triplet_empty_warns():
    with pytest.warns(EmptyTripletWarning):
        loss, grad, n = triplet_loss(np.ones((2, 2)), TripletSet())
    assert loss == 0 and n == 0 and np.all(grad == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_triplet_nonnegative_and_zero_iff_satisfied(seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((10, 3))
    labels = r.integers(0, 3, 10)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyTripletWarning)
        ts = batch_hard_mine(x, labels)
        loss, _, _ = triplet_loss(x, ts, 0.3)
    assert loss >= 0
    d = pairwise_distances(x)
    satisfied = all(d[a, n] >= d[a, p] + 0.3 for a, p, n in ts.as_tuples())
    assert (loss == 0) == satisfied


# -- mining ------------------------------------------------------------------

def _brute_force(x, labels):
    out = []
    n = len(labels)
    for a in range(n):
        pos = [j for j in range(n) if j != a and labels[j] == labels[a]]
        neg = [j for j in range(n) if labels[j] != labels[a]]
        if not pos or not neg:
            continue
        dist = lambda j: np.linalg.norm(x[a] - x[j])  # noqa: E731
        best_p = pos[0]
        for j in pos:
            if dist(j) > dist(best_p):
                best_p = j
        best_n = neg[0]
        for j in neg:
            if dist(j) < dist(best_n):
                best_n = j
        out.append((a, best_p, best_n))
    return out


def test_mining_matches_exhaustive_search():
    r = np.random.default_rng(0)
    for _ in range(50):
        n = int(r.integers(2, 65))
        x = r.standard_normal((n, 4))
        labels = r.integers(0, max(2, n // 4), n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyTripletWarning)
            got = batch_hard_mine(x, labels).as_tuples()
        assert got == _brute_force(x, labels)


def test_mining_hand_built_two_by_two():
    # points on a line: class 0 at {0, 3}, class 1 at {1, 5}
    x = np.array([[0.0], [3.0], [1.0], [5.0]])
    got = batch_hard_mine(x, np.array([0, 0, 1, 1])).as_tuples()
    assert got == [(0, 1, 2), (1, 0, 2), (2, 3, 0), (3, 2, 1)]


def test_mining_single_class_is_empty():
    with pytest.warns(EmptyTripletWarning):
        assert len(batch_hard_mine(np.ones((3, 2)), np.zeros(3))) == 0


def test_mining_ties_take_smallest_index():
    x = np.eye(4)  # all pairwise distances equal
    got = batch_hard_mine(x, np.array([0, 0, 1, 1])).as_tuples()
    assert got == [(0, 1, 2), (1, 0, 2), (2, 3, 0), (3, 2, 0)]


def test_mining_permutation_equivariance(rng):
    x = rng.standard_normal((12, 3))
    labels = np.repeat(np.arange(4), 3)
    perm = rng.permutation(12)
    base = batch_hard_mine(x, labels)
    moved = batch_hard_mine(x[perm], labels[perm])
    mapped = sorted((perm[a], perm[p], perm[n]) for a, p, n in moved.as_tuples())
    assert mapped == sorted(base.as_tuples())
    assert triplet_loss(x, base)[0] == pytest.approx(triplet_loss(x[perm], moved)[0])


def test_mining_needs_two_samples():
    with pytest.raises(ValueError):
        batch_hard_mine(np.ones((1, 2)), [0])


# -- keypoint loss -----------------------------------------------------------

def test_kp_loss_zero_at_target(rng):
    t = rng.random((3, 42, 2))
    loss, grad = keypoint_loss(t, t.copy())
    assert loss == 0 and np.all(grad == 0)


def test_kp_loss_unit_offset():
    t = np.zeros((2, 42, 2))
    loss, _ = keypoint_loss(t, t + 1, l2=0.1, l1=1.0)
    assert loss == pytest.approx(1.1)


def test_kp_loss_matches_two_pass(rng):
    t, p = rng.random((4, 42, 2)), rng.random((4, 42, 2))
    loss, _ = keypoint_loss(t, p, l2=0.1, l1=1.0)
    sq = sum((a - b) ** 2 for a, b in zip(t.ravel(), p.ravel())) / t.size
    ab = sum(abs(a - b) for a, b in zip(t.ravel(), p.ravel())) / t.size
    assert loss == pytest.approx(0.1 * sq + ab)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(0, 2), st.floats(0, 2))
def test_kp_loss_translation(c, l2, l1):
    t = np.random.default_rng(0).random((2, 42, 2))
    loss, _ = keypoint_loss(t, t + c, l2=l2, l1=l1)
    assert loss == pytest.approx(l2 * c * c + l1 * abs(c), rel=1e-9, abs=1e-12)


def test_kp_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        keypoint_loss(np.zeros((2, 42, 2)), np.zeros((3, 42, 2)))


# -- joint loss --------------------------------------------------------------

def test_joint_all_zero():
    zeros = {m: 0.0 for m in FEATURE_TYPES}
    assert joint_multi_feature_loss(zeros, zeros, 0.0, LossWeights(), 1)[0] == 0


def test_lambda_ce_schedule():
    assert LossWeights.ce(4) == 0.25
    with pytest.raises(ConfigError):
        LossWeights.ce(0)


def test_joint_unit_losses_epoch_25():
    ones = {m: 1.0 for m in FEATURE_TYPES}
    total, lam_ce, lam_kp = joint_multi_feature_loss(ones, ones, 1.0, LossWeights(), 25)
    assert total == pytest.approx(281.28)
    assert lam_ce == pytest.approx(0.04) and lam_kp == 1


def test_joint_kp_inactive_until_epoch_20():
    ones = {m: 1.0 for m in FEATURE_TYPES}
    w = LossWeights()
    t20 = joint_multi_feature_loss(ones, ones, 5.0, w, 20)
    t21 = joint_multi_feature_loss(ones, ones, 5.0, w, 21)
    assert t20[2] == 0 and t21[2] == 1
    assert t20[0] == pytest.approx(7 / 20 + 280)


def test_joint_missing_type():
    ones = {m: 1.0 for m in FEATURE_TYPES if m != "thumb"}
    with pytest.raises(ConfigError, match="thumb"):
        joint_multi_feature_loss(ones, {m: 1.0 for m in FEATURE_TYPES}, 0, LossWeights(), 1)


def test_negative_weight_rejected():
    with pytest.raises(ConfigError):
        LossWeights(margin=-0.1)


def test_mining_tuple_validity(rng):
    x = rng.standard_normal((16, 2))
    labels = rng.integers(0, 4, 16)
    for a, p, n in batch_hard_mine(x, labels).as_tuples():
        assert a != p and labels[a] == labels[p] != labels[n]
