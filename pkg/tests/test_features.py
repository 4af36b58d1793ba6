import numpy as np
import pytest

from handid.errors import ConfigError, DimensionError, FormatError
from handid.features import (
    EmbeddingConv, EmbeddingFC, HandEmbedding, HandFeatureNet, embedding_dims, extract_hand,
    read_hfe1, write_hfe1,
)
from handid.regions import FINGERS, REGIONS


def _net(rng, em_kind="conv"):
    return HandFeatureNet(rng, n_classes=3, em_kind=em_kind, palm_size=(16, 16), finger_size=(16, 8),
                          backbone_channels=(2, 3, 4), palm_fc=6, finger_fc=5, em_filters=2)


def _rois(rng, n=3):
    return {r: rng.random((n, 1, 16, 16 if r == "palm" else 8), dtype=np.float32) for r in REGIONS}


def test_full_scale_dims():
    fc = embedding_dims("fc", (16, 16), (16, 4))
    assert fc["palm"] == 512 and fc["index"] == 128 and fc["hand"] == 1152
    conv = embedding_dims("conv", (16, 16), (16, 4))
    assert conv["palm"] == 4096 and conv["thumb"] == 1024 and conv["hand"] == 9216
    with pytest.raises(ConfigError):
        embedding_dims("pool", (16, 16), (16, 4))


def test_full_scale_conv_embedding_length(rng):
    em = EmbeddingConv(512, (16, 16), rng, filters=16)
    out = em.forward(rng.standard_normal((2, 512, 16, 16)).astype(np.float32))
    assert out.shape == (2, 4096)
    em = EmbeddingConv(512, (16, 4), rng, filters=16)
    assert em.forward(rng.standard_normal((2, 512, 16, 4)).astype(np.float32)).shape == (2, 1024)


def test_fc_zero_weights_give_beta(rng):
    em = EmbeddingFC(3, (2, 2), 5, rng)
    em.fc.weight.data[:] = 0
    em.fc.bias.data[:] = 0
    em.bn.beta.data[:] = np.arange(5)
    out = em.forward(rng.random((4, 3, 2, 2), dtype=np.float32))
    np.testing.assert_allclose(out, np.tile(np.arange(5), (4, 1)), atol=1e-6)


def test_conv_zero_input_gives_tanh_bias(rng):
    em = EmbeddingConv(3, (2, 4), rng, filters=2)
    em.conv.bias.data[:] = [0.5, -1.0]
    pre = em.pre_norm(np.zeros((1, 3, 2, 4), np.float32))
    expect = np.repeat(np.tanh([0.5, -1.0]), 8)
    np.testing.assert_allclose(pre[0], expect, rtol=1e-6)


def test_conv_spatial_permutation_equivariance(rng):
    em = EmbeddingConv(3, (2, 4), rng, filters=2)
    fm = rng.standard_normal((2, 3, 2, 4)).astype(np.float32)
    perm = rng.permutation(8)
    permuted = fm.reshape(2, 3, 8)[:, :, perm].reshape(2, 3, 2, 4)
    a = em.pre_norm(fm).reshape(2, 2, 8)[:, :, perm]
    b = em.pre_norm(permuted).reshape(2, 2, 8)
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_embedding_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        EmbeddingFC(3, (2, 2), 5, rng).forward(np.zeros((2, 3, 4, 4), np.float32))
    with pytest.raises(DimensionError):
        EmbeddingConv(3, (2, 2), rng).pre_norm(np.zeros((2, 4, 2, 2), np.float32))


@pytest.mark.parametrize("kind", ["fc", "conv"])
def test_hand_is_concatenation(rng, kind):
    net = _net(rng, kind)
    emb = net.embed(_rois(rng))
    assert emb["hand"].shape[1] == net.dims["hand"] == sum(net.dims[r] for r in REGIONS)
    np.testing.assert_array_equal(emb["hand"][:, :net.dims["palm"]], emb["palm"])
    split = HandEmbedding(emb, kind).split()
    for r in REGIONS:
        np.testing.assert_array_equal(split[r], emb[r])


def test_toy_dims_follow_config(rng):
    assert _net(rng, "fc").dims == {"palm": 6, "thumb": 5, **{f: 5 for f in FINGERS}, "hand": 31}
    conv = _net(rng, "conv").dims
    assert conv["palm"] == 2 * 2 * 2 and conv["index"] == 2 * 2 * 1


def test_identical_finger_rois_give_identical_vectors(rng):
    net = _net(rng)
    net.train(False)
    rois = _rois(rng, n=1)
    rois["ring"] = rois["index"].copy()
    rois["thumb"] = rois["index"].copy()
    emb = net.embed(rois)
    np.testing.assert_array_equal(emb["ring"], emb["index"])
    # thumb shares the backbone but has its own embedding module
    assert not np.array_equal(emb["thumb"], emb["index"])


def test_sharing_is_structural(rng):
    net = _net(rng)
    names = [p.name for p in net.parameters()]
    assert len(names) == len(set(names))
    shared = [p.name for p in net.fe_parameters() + net.finger_em.parameters()]
    assert not any(f in n for n in shared for f in FINGERS)
    assert net.thumb_em is not net.finger_em


def test_extract_hand_single(rng):
    net = _net(rng)
    net.train(False)
    single = {r: v[0] for r, v in _rois(rng, 1).items()}
    emb = extract_hand(single, net)
    assert emb.hand.shape == (net.dims["hand"],)
    assert emb.em_kind == "conv"


def test_roi_size_checked(rng):
    net = _net(rng)
    rois = _rois(rng)
    rois["thumb"] = rois["thumb"][:, :, :8]
    with pytest.raises(DimensionError, match="thumb"):
        net.embed(rois)


def test_unknown_em_kind(rng):
    with pytest.raises(ConfigError):
        _net(rng, "pool")


def test_backward_reaches_rois(rng):
    net = _net(rng)
    rois = _rois(rng)
    emb = net.embed(rois)
    grads = net.backward({"hand": np.ones_like(emb["hand"])}, need_roi_grad=True)
    for r in REGIONS:
        assert grads[r].shape == rois[r].shape


def test_hfe1_roundtrip(tmp_path, rng):
    ids = ["a", "b-ü", "c"]
    vecs = rng.standard_normal((3, 7)).astype(np.float32)
    path = tmp_path / "e.hfe1"
    write_hfe1(path, ids, vecs, "conv")
    rid, rv, kind = read_hfe1(path)
    assert rid == ids and kind == "conv"
    assert rv.tobytes() == vecs.tobytes()


def test_hfe1_corruption(tmp_path, rng):
    path = tmp_path / "e.hfe1"
    write_hfe1(path, ["a", "b"], rng.standard_normal((2, 4)), "fc")
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_hfe1(path)
    path.write_bytes(b"HFE2" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_hfe1(path)
    with pytest.raises(FormatError):
        write_hfe1(path, ["a"], np.zeros((2, 4)), "fc")
