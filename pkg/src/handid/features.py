"""Per-region feature extraction, embedding modules and the HFE1 format.

Topology: the palm ROI runs through its own backbone (PFE) and Palm-EM.  The
four finger ROIs and the thumb ROI share one backbone (FTFE); the fingers
also share one Finger-EM while the thumb has its own Thumb-EM.  Shared
modules are single objects, so sharing is structural, and the fingers run
through them as one stacked batch.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from handid.diffcore import Activation, BatchNorm, Conv2d, Flatten, Linear, Module, Sequential
from handid.errors import ConfigError, DimensionError, FormatError
from handid.regions import FINGERS, REGIONS

HFE1_MAGIC = b"HFE1"
EM_KINDS = {"fc": 0, "conv": 1}
FEATURE_TYPES = REGIONS + ("hand",)
REDUCTION = 8


class Backbone(Module):
    """Three stride-2 3x3 conv+relu blocks: spatial reduction 8."""

    def __init__(self, rng, in_channels=1, channels=(8, 16, 32), name="fe"):
        layers = []
        c_prev = in_channels
        for i, c in enumerate(channels):
            layers.append(Conv2d(c_prev, c, 3, rng, stride=2, padding=((1, 0), (1, 0)), name=f"{name}.conv{i}"))
            layers.append(Activation("relu"))
            c_prev = c
        self.net = Sequential(*layers)
        self.out_channels = c_prev

    def children(self):
        return [self.net]

    def parameters(self):
        return self.net.parameters()

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % REDUCTION or w % REDUCTION:
            raise DimensionError(f"backbone input {h}x{w} is not divisible by {REDUCTION}")
        return self.net.forward(x)

    def backward(self, dy, need_input_grad=True):
        return self.net.backward(dy, need_input_grad)


class EmbeddingFC(Module):
    """fc followed by batch normalization."""

    kind = "fc"

    def __init__(self, channels, spatial, out_dim, rng, name="em"):
        self.in_shape = (channels,) + tuple(spatial)
        self.flatten = Flatten()
        self.fc = Linear(int(np.prod(self.in_shape)), out_dim, rng, name=f"{name}.fc")
        self.bn = BatchNorm(out_dim, name=f"{name}.bn")
        self.out_dim = out_dim

    def children(self):
        return [self.fc, self.bn]

    def parameters(self):
        return self.fc.parameters() + self.bn.parameters()

    def buffers(self):
        return self.bn.buffers()

    def forward(self, featmap):
        if featmap.shape[1:] != self.in_shape:
            raise DimensionError(f"EM-fc expects feature maps {self.in_shape}, got {featmap.shape[1:]}")
        return self.bn.forward(self.fc.forward(self.flatten.forward(featmap)))

    def backward(self, dy, need_input_grad=True):
        d = self.fc.backward(self.bn.backward(dy), need_input_grad)
        return self.flatten.backward(d) if need_input_grad else None


class EmbeddingConv(Module):
    """1x1 conv to ``filters`` maps, tanh, flatten (channel-major), batch norm.

    Batch normalization runs per flattened feature so each spatial position
    keeps its own statistics.
    """

    kind = "conv"

    def __init__(self, channels, spatial, rng, filters=16, name="em"):
        self.in_shape = (channels,) + tuple(spatial)
        self.conv = Conv2d(channels, filters, 1, rng, name=f"{name}.conv")
        self.act = Activation("tanh")
        self.flatten = Flatten()
        self.out_dim = filters * int(np.prod(spatial))
        self.bn = BatchNorm(self.out_dim, name=f"{name}.bn")

    def children(self):
        return [self.conv, self.bn]

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def buffers(self):
        return self.bn.buffers()

    def pre_norm(self, featmap):
        if featmap.shape[1:] != self.in_shape:
            raise DimensionError(f"EM-conv expects feature maps {self.in_shape}, got {featmap.shape[1:]}")
        return self.flatten.forward(self.act.forward(self.conv.forward(featmap)))

    def forward(self, featmap):
        return self.bn.forward(self.pre_norm(featmap))

    def backward(self, dy, need_input_grad=True):
        d = self.flatten.backward(self.bn.backward(dy))
        return self.conv.backward(self.act.backward(d), need_input_grad)


def embed_fc(featmap, em):
    return em.forward(featmap)


def embed_conv(featmap, em):
    return em.forward(featmap)


def embedding_dims(em_kind, palm_spatial, finger_spatial, palm_fc=512, finger_fc=128, filters=16):
    """Per-region output lengths and the hand total, from shapes alone."""
    if em_kind == "fc":
        dims = {r: palm_fc if r == "palm" else finger_fc for r in REGIONS}
    elif em_kind == "conv":
        dims = {
            r: filters * int(np.prod(palm_spatial if r == "palm" else finger_spatial)) for r in REGIONS
        }
    else:
        raise ConfigError(f"unknown embedding kind {em_kind!r}", key="em_kind")
    dims["hand"] = sum(dims[r] for r in REGIONS)
    return dims


@dataclass
class HandEmbedding:
    vectors: dict  # region/hand -> (D_m,) or (N, D_m)
    em_kind: str

    @property
    def hand(self):
        return self.vectors["hand"]

    def split(self):
        """Recover per-region vectors from the concatenated hand vector."""
        out, start = {}, 0
        for r in REGIONS:
            d = self.vectors[r].shape[-1]
            out[r] = self.hand[..., start:start + d]
            start += d
        return out


class HandFeatureNet(Module):
    """PFE/FTFE backbones, the three EMs, and per-feature-type classifier heads."""

    def __init__(self, rng, n_classes, em_kind="conv", in_channels=1,
                 palm_size=(128, 128), finger_size=(128, 32), backbone_channels=(8, 16, 32),
                 palm_fc=512, finger_fc=128, em_filters=16):
        self.em_kind = em_kind
        self.palm_size = tuple(palm_size)
        self.finger_size = tuple(finger_size)
        for s in (self.palm_size, self.finger_size):
            if s[0] % REDUCTION or s[1] % REDUCTION:
                raise DimensionError(f"ROI size {s} must be divisible by {REDUCTION}")
        self.pfe = Backbone(rng, in_channels, backbone_channels, name="pfe")
        self.ftfe = Backbone(rng, in_channels, backbone_channels, name="ftfe")
        cf = self.pfe.out_channels
        ps = (self.palm_size[0] // REDUCTION, self.palm_size[1] // REDUCTION)
        fs = (self.finger_size[0] // REDUCTION, self.finger_size[1] // REDUCTION)
        if em_kind == "fc":
            self.palm_em = EmbeddingFC(cf, ps, palm_fc, rng, name="palm_em")
            self.finger_em = EmbeddingFC(cf, fs, finger_fc, rng, name="finger_em")
            self.thumb_em = EmbeddingFC(cf, fs, finger_fc, rng, name="thumb_em")
        elif em_kind == "conv":
            self.palm_em = EmbeddingConv(cf, ps, rng, em_filters, name="palm_em")
            self.finger_em = EmbeddingConv(cf, fs, rng, em_filters, name="finger_em")
            self.thumb_em = EmbeddingConv(cf, fs, rng, em_filters, name="thumb_em")
        else:
            raise ConfigError(f"unknown embedding kind {em_kind!r}", key="em_kind")
        self.dims = {"palm": self.palm_em.out_dim, "thumb": self.thumb_em.out_dim}
        self.dims.update({f: self.finger_em.out_dim for f in FINGERS})
        self.dims["hand"] = sum(self.dims[r] for r in REGIONS)
        self.n_classes = n_classes
        self.heads = {m: Linear(self.dims[m], n_classes, rng, name=f"head.{m}") for m in FEATURE_TYPES}
        self._n = None

    def children(self):
        return [self.pfe, self.ftfe, self.palm_em, self.finger_em, self.thumb_em, *self.heads.values()]

    def fe_parameters(self):
        return self.pfe.parameters() + self.ftfe.parameters()

    def em_parameters(self):
        ps = self.palm_em.parameters() + self.finger_em.parameters() + self.thumb_em.parameters()
        for m in FEATURE_TYPES:
            ps += self.heads[m].parameters()
        return ps

    def parameters(self):
        return self.fe_parameters() + self.em_parameters()

    def buffers(self):
        return self.palm_em.buffers() + self.finger_em.buffers() + self.thumb_em.buffers()

    def embed(self, rois):
        """ROI batches {region: (N,C,H,W)} -> {feature type: (N, D_m)}."""
        n = rois["palm"].shape[0]
        for r in REGIONS:
            want = self.palm_size if r == "palm" else self.finger_size
            if rois[r].shape[0] != n or rois[r].shape[-2:] != want:
                raise DimensionError(f"ROI {r} has shape {rois[r].shape}, expected (N, C, {want[0]}, {want[1]})")
        self._n = n
        out = {"palm": self.palm_em.forward(self.pfe.forward(rois["palm"]))}
        stacked = np.concatenate([rois[r] for r in FINGERS + ("thumb",)], axis=0)
        feats = self.ftfe.forward(stacked)
        fing = self.finger_em.forward(feats[:4 * n])
        for i, f in enumerate(FINGERS):
            out[f] = fing[i * n:(i + 1) * n]
        out["thumb"] = self.thumb_em.forward(feats[4 * n:])
        out["hand"] = np.concatenate([out[r] for r in REGIONS], axis=1)
        return out

    def logits(self, emb):
        return {m: self.heads[m].forward(emb[m]) for m in FEATURE_TYPES}

    def backward(self, d_emb, d_logits=None, need_roi_grad=False):
        """Backpropagate embedding and logit gradients; returns ROI gradients or None."""
        n = self._n
        grads = {m: (None if d_emb.get(m) is None else d_emb[m].copy()) for m in FEATURE_TYPES}
        if d_logits:
            for m, dl in d_logits.items():
                if dl is None:
                    continue
                dx = self.heads[m].backward(dl)
                grads[m] = dx if grads[m] is None else grads[m] + dx
        if grads["hand"] is not None:
            start = 0
            for r in REGIONS:
                d = self.dims[r]
                part = grads["hand"][:, start:start + d]
                grads[r] = part.copy() if grads[r] is None else grads[r] + part
                start += d
        dtype = next(g.dtype for g in grads.values() if g is not None)
        for r in REGIONS:
            if grads[r] is None:
                grads[r] = np.zeros((n, self.dims[r]), dtype=dtype)
        d_palm = self.pfe.backward(self.palm_em.backward(grads["palm"]), need_roi_grad)
        d_fing = self.finger_em.backward(np.concatenate([grads[f] for f in FINGERS], axis=0))
        d_thumb = self.thumb_em.backward(grads["thumb"])
        d_stack = self.ftfe.backward(np.concatenate([d_fing, d_thumb], axis=0), need_roi_grad)
        if not need_roi_grad:
            return None
        out = {"palm": d_palm}
        for i, r in enumerate(FINGERS + ("thumb",)):
            out[r] = d_stack[i * n:(i + 1) * n]
        return out


def extract_hand(rois, net):
    """Embed one RoiBundle (or a dict of single ROIs) into a HandEmbedding."""
    batch = {r: np.asarray(rois[r])[None] for r in REGIONS}
    emb = net.embed(batch)
    return HandEmbedding({m: v[0] for m, v in emb.items()}, net.em_kind)


# ---------------------------------------------------------------------------
# HFE1 embedding files


def write_hfe1(path, ids, vectors, em_kind):
    vectors = np.ascontiguousarray(np.asarray(vectors, dtype="<f4"))
    if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
        raise FormatError(f"need one vector per id: {len(ids)} ids, vectors {vectors.shape}")
    if em_kind not in EM_KINDS:
        raise FormatError(f"unknown embedding kind {em_kind!r}")
    parts = [HFE1_MAGIC, struct.pack("<IIB", len(ids), vectors.shape[1], EM_KINDS[em_kind])]
    for i, vec in zip(ids, vectors):
        raw = str(i).encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(vec.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_hfe1(path):
    """Returns (ids, vectors (count, dim) float32, em_kind)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != HFE1_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {HFE1_MAGIC!r}")
    if len(raw) < 13:
        raise FormatError(f"{path}: truncated header")
    count, dim, kind = struct.unpack("<IIB", raw[4:13])
    kinds = {v: k for k, v in EM_KINDS.items()}
    if kind not in kinds:
        raise FormatError(f"{path}: unknown embedding kind code {kind}")
    off = 13
    ids = []
    vecs = np.empty((count, dim), dtype=np.float32)
    for n in range(count):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated at record {n}")
        (ln,) = struct.unpack("<I", raw[off:off + 4])
        off += 4
        end = off + ln + 4 * dim
        if end > len(raw):
            raise FormatError(f"{path}: truncated at record {n}")
        ids.append(raw[off:off + ln].decode("utf-8"))
        off += ln
        vecs[n] = np.frombuffer(raw, dtype="<f4", count=dim, offset=off)
        off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after {count} records")
    return ids, vecs, kinds[kind]
