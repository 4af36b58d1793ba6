"""Two-phase training: localizer pretraining, then end-to-end joint training.

Randomness is drawn from streams derived from (seed, phase, epoch, step), so
an interrupted run resumed from a checkpoint replays exactly the batches
and augmentations the uninterrupted run would have seen.
"""

import csv
import hashlib
import io
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from handid.alignment import AugmentConfig, augment
from handid.config import TrainConfig, config_from_dict
from handid.diffcore import Adam, ParamGroup, clip_global_norm
from handid.errors import CheckpointError, ConfigError, NumericalError, TrainingError
from handid.features import FEATURE_TYPES
from handid.losses import LossWeights, batch_hard_mine, cross_entropy, keypoint_loss, triplet_loss
from handid.pipeline import HandPipeline
from handid.regions import N_KEYPOINTS

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "HCK1"


def stream(seed, phase, epoch, step=0):
    return np.random.default_rng(np.random.SeedSequence([seed, phase, epoch, step]))


def rng_digest(rng):
    return hashlib.sha256(json.dumps(rng.bit_generator.state, sort_keys=True).encode()).hexdigest()[:16]


class TrainLog:
    """Per-epoch records; every record carries the weights it was trained with."""

    TIMING_FIELD = "wall_time"

    def __init__(self, records=None):
        self.records = list(records or [])

    def append(self, rec):
        if self.records:
            last = self.records[-1]
            if (rec["phase"], rec["epoch"]) <= (last["phase"], last["epoch"]):
                raise TrainingError(f"non-monotone epoch numbering: {rec['phase']}/{rec['epoch']} after "
                                    f"{last['phase']}/{last['epoch']}")
        self.records.append(rec)

    def phase(self, phase):
        return [r for r in self.records if r["phase"] == phase]

    def columns(self, include_time=True):
        cols = []
        for r in self.records:
            for k in r:
                if k not in cols and (include_time or k != self.TIMING_FIELD):
                    cols.append(k)
        return cols

    def to_csv(self, path, include_time=True):
        cols = self.columns(include_time)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for r in self.records:
                wr.writerow([_cell(r.get(c, "")) for c in cols])

    def to_csv_text(self, include_time=False):
        buf = io.StringIO()
        cols = self.columns(include_time)
        wr = csv.writer(buf)
        wr.writerow(cols)
        for r in self.records:
            wr.writerow([_cell(r.get(c, "")) for c in cols])
        return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _mean(values):
    return float(np.mean(values)) if values else 0.0


class Trainer:
    """Owns all mutable training state: parameters, optimizers, log, position."""

    def __init__(self, pipeline: HandPipeline, dataset, config: TrainConfig = None):
        self.pipeline = pipeline
        self.dataset = dataset
        self.config = config or pipeline.config
        c = self.config
        loc, net = pipeline.localizer, pipeline.net
        self.opt1 = Adam([ParamGroup("ln", loc.parameters(), c.p1_lr)])
        self.opt2 = Adam([
            ParamGroup("fe", net.fe_parameters(), c.fe_lr),
            ParamGroup("em", net.em_parameters(), c.em_lr),
            ParamGroup("ln_head", loc.head.parameters(), c.ln_lr),
        ])
        self.weights = LossWeights(c.lambda_t, c.lambda_l1, c.lambda_l2, c.lambda_kp, c.margin, c.unfreeze_epoch)
        self.aug = AugmentConfig(c.aug_rotation, c.aug_translation, c.aug_scale, c.aug_brightness, c.aug_contrast)
        self.log = TrainLog()
        self.phase = 1
        self.epoch = 0  # last completed epoch of the current phase
        self.initialized = False
        self.last_checkpoint = None
        self.train_ids = dataset.split_ids("train") if dataset is not None else []

    # -- phase 1 --------------------------------------------------------------

    def init_localizer_head(self):
        """Start the regressor at the mean training pose with a damped head."""
        kps = self.dataset.keypoint_batch(self.train_ids).reshape(len(self.train_ids), -1)
        head = self.pipeline.localizer.head
        head.bias.data[...] = kps.mean(axis=0)
        head.weight.data *= np.float32(0.1)
        self.initialized = True

    def _phase1_step(self, ids, rng):
        c = self.config
        loc = self.pipeline.localizer
        imgs, kps = [], []
        for i in ids:
            img, kp = augment(self.dataset.images[i], self.dataset.keypoints[i], rng, self.aug)
            imgs.append(img)
            kps.append(kp)
        images = np.stack(imgs)
        target = np.stack(kps).reshape(len(ids), -1)
        pred = loc.forward(self.pipeline.ln_input(images))
        loss, grad = keypoint_loss(target, pred, c.lambda_l2, c.lambda_l1)
        loc.backward(grad)
        _, clipped = clip_global_norm([p for p in loc.parameters() if p.requires_grad], c.grad_clip)
        self.opt1.step()
        self.opt1.zero_grad()
        return float(loss), clipped

    def run_phase1(self, until=None):
        c = self.config
        if not self.train_ids:
            raise ConfigError("dataset has no training images", key="split")
        missing = [i for i in self.train_ids if i not in self.dataset.keypoints]
        if missing:
            raise TrainingError(f"train image {missing[0]} has no ground-truth keypoints")
        if self.phase != 1:
            return self.log
        if not self.initialized:
            self.init_localizer_head()
        loc = self.pipeline.localizer
        loc.freeze("none")
        loc.train(True)
        until = c.p1_epochs if until is None else min(until, c.p1_epochs)
        for epoch in range(self.epoch + 1, until + 1):
            t0 = time.perf_counter()
            rng = stream(c.seed, 1, epoch)
            order = rng.permutation(len(self.train_ids))
            losses, clips = [], 0
            n_steps = math.ceil(len(order) / c.p1_batch)
            for step in range(n_steps):
                ids = [self.train_ids[j] for j in order[step * c.p1_batch:(step + 1) * c.p1_batch]]
                srng = stream(c.seed, 1, epoch, step + 1)
                try:
                    loss, clipped = self._phase1_step(ids, srng)
                except NumericalError as exc:
                    raise self._diverged(epoch, exc) from None
                if not np.isfinite(loss):
                    raise self._diverged(epoch, "loss is NaN")
                losses.append(loss)
                clips += clipped
            self.log.append({
                "phase": 1, "epoch": epoch, "loss_total": _mean(losses), "loss_kp": _mean(losses),
                "lambda_l2": c.lambda_l2, "lambda_l1": c.lambda_l1, "ln_state": "trainable",
                "ln_lr": c.p1_lr, "clipped_steps": clips, "rng_digest": rng_digest(rng),
                "wall_time": time.perf_counter() - t0,
            })
            self.epoch = epoch
            log.info("phase 1 epoch %d: L_KP %.5f", epoch, _mean(losses))
        if self.epoch >= c.p1_epochs:
            self.phase, self.epoch = 2, 0
        return self.log

    # -- phase 2 --------------------------------------------------------------

    def _class_pools(self):
        pools = {}
        for i in self.train_ids:
            pools.setdefault(self.dataset.labels[i], []).append(i)
        return pools

    def sample_batch(self, rng, pools):
        """P classes x K samples; classes with fewer than K images repeat some."""
        c = self.config
        classes = sorted(pools)
        if len(classes) < c.classes_per_batch:
            raise ConfigError(
                f"cannot build class-balanced batches: {len(classes)} training classes < "
                f"classes_per_batch={c.classes_per_batch}", key="classes_per_batch",
            )
        chosen = rng.choice(len(classes), size=c.classes_per_batch, replace=False)
        ids = []
        for ci in chosen:
            pool = pools[classes[ci]]
            pick = rng.choice(len(pool), size=c.samples_per_class, replace=len(pool) < c.samples_per_class)
            ids.extend(pool[j] for j in pick)
        return ids

    def _phase2_step(self, ids, epoch):
        c = self.config
        pipe = self.pipeline
        loc, net, aligner = pipe.localizer, pipe.net, pipe.aligner
        ln_trainable = any(p.requires_grad for p in loc.parameters())
        images = self.dataset.image_batch(ids)
        labels = self.dataset.label_array(ids)
        pred = loc.forward(pipe.ln_input(images))
        kp = pred.reshape(len(ids), N_KEYPOINTS, 2)
        rois = aligner.forward(pipe.align_input(images), kp)
        emb = net.embed(rois)
        logits = net.logits(emb)
        lam_ce = self.weights.ce(epoch)
        lam_kp = self.weights.kp(epoch)
        ce, tri, d_logits, d_emb = {}, {}, {}, {}
        active = 0
        for m in FEATURE_TYPES:
            loss, g = cross_entropy(logits[m], labels)
            if c.ce_batch_mean:
                loss, g = loss / len(ids), g / len(ids)
            ce[m] = float(loss)
            d_logits[m] = lam_ce * g
            if self.weights.triplet > 0:
                trip = batch_hard_mine(emb[m], labels)
                tl, tg, n_act = triplet_loss(emb[m], trip, self.weights.margin)
                tri[m] = float(tl)
                d_emb[m] = self.weights.triplet * tg
                active += n_act
            else:
                tri[m] = 0.0
        kp_val = 0.0
        d_kp = None
        if lam_kp > 0:
            gt = self.dataset.keypoint_batch(ids).reshape(len(ids), -1)
            kp_val, gk = keypoint_loss(gt, pred, c.lambda_l2, c.lambda_l1)
            kp_val = float(kp_val)
            d_kp = lam_kp * gk
        total = lam_ce * sum(ce.values()) + self.weights.triplet * sum(tri.values()) + lam_kp * kp_val
        if not np.isfinite(total):
            raise self._diverged(epoch, "loss is NaN")
        drois = net.backward(d_emb, d_logits, need_roi_grad=ln_trainable)
        if ln_trainable:
            dkp, _ = aligner.backward(drois)
            dpred = dkp.reshape(len(ids), -1)
            if d_kp is not None:
                dpred = dpred + d_kp
            loc.backward(dpred.astype(pred.dtype))
        params = [p for _, p in self.opt2.trainable() if p.grad is not None]
        _, clipped = clip_global_norm(params, c.grad_clip)
        self.opt2.step()
        self.opt2.zero_grad()
        return total, ce, tri, kp_val, active, clipped

    def run_phase2(self, until=None):
        c = self.config
        if self.phase == 1:
            raise TrainingError("phase 2 requires a pretrained localizer; run phase 1 first")
        pools = self._class_pools()
        loc, net = self.pipeline.localizer, self.pipeline.net
        net.train(True)
        loc.train(True)
        until = c.p2_epochs if until is None else min(until, c.p2_epochs)
        n_steps = max(1, math.ceil(len(self.train_ids) / c.batch_size))
        for epoch in range(self.epoch + 1, until + 1):
            t0 = time.perf_counter()
            frozen = epoch <= c.unfreeze_epoch
            loc.freeze("all" if frozen else "all_but_last")
            rng = stream(c.seed, 2, epoch)
            totals, ces, tris, kps = [], {m: [] for m in FEATURE_TYPES}, {m: [] for m in FEATURE_TYPES}, []
            active = clips = 0
            for step in range(n_steps):
                ids = self.sample_batch(rng, pools)
                try:
                    total, ce, tri, kp_val, n_act, clipped = self._phase2_step(ids, epoch)
                except NumericalError as exc:
                    raise self._diverged(epoch, exc) from None
                totals.append(total)
                for m in FEATURE_TYPES:
                    ces[m].append(ce[m])
                    tris[m].append(tri[m])
                kps.append(kp_val)
                active += n_act
                clips += clipped
            rec = {"phase": 2, "epoch": epoch, "loss_total": _mean(totals), "loss_kp": _mean(kps)}
            for m in FEATURE_TYPES:
                rec[f"ce_{m}"] = _mean(ces[m])
            for m in FEATURE_TYPES:
                rec[f"tri_{m}"] = _mean(tris[m])
            rec.update({
                "lambda_ce": self.weights.ce(epoch), "lambda_t": self.weights.triplet,
                "lambda_kp": self.weights.kp(epoch), "lambda_l2": c.lambda_l2, "lambda_l1": c.lambda_l1,
                "margin": self.weights.margin, "ln_state": "frozen" if frozen else "last_layer",
                "ln_lr": 0.0 if frozen else self.opt2.group("ln_head").lr,
                "fe_lr": self.opt2.group("fe").lr, "em_lr": self.opt2.group("em").lr,
                "active_triplets": active, "clipped_steps": clips, "rng_digest": rng_digest(rng),
                "wall_time": time.perf_counter() - t0,
            })
            self.log.append(rec)
            self.epoch = epoch
            log.info("phase 2 epoch %d: L_JMF %.4f", epoch, rec["loss_total"])
        net.train(False)
        return self.log

    def _diverged(self, epoch, why):
        ref = f"; last good checkpoint: {self.last_checkpoint}" if self.last_checkpoint else "; no checkpoint saved"
        return TrainingError(f"training diverged in phase {self.phase} epoch {epoch}: {why}{ref}")

    # -- checkpoints ----------------------------------------------------------

    def state_arrays(self):
        arrays = {}
        for name, p in self.pipeline.named_parameters():
            arrays[f"param/{name}"] = p.data
        for name, b in self.pipeline.named_buffers():
            arrays[f"buffer/{name}"] = b
        for oname, opt in (("opt1", self.opt1), ("opt2", self.opt2)):
            for pname, st in opt.states.items():
                arrays[f"{oname}/{pname}/m"] = st.m
                arrays[f"{oname}/{pname}/v"] = st.v
        return arrays

    def save(self, path):
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "n_classes": self.pipeline.n_classes,
            "em_kind": self.config.em_kind,
            "embedding_dims": self.pipeline.net.dims,
            "phase": self.phase,
            "epoch": self.epoch,
            "initialized": self.initialized,
            "rng": {"seed": self.config.seed, "phase": self.phase, "next_epoch": self.epoch + 1},
            "adam_steps": {
                o: {k: st.step for k, st in opt.states.items()} for o, opt in (("opt1", self.opt1), ("opt2", self.opt2))
            },
            "log": self.log.records,
        }
        arrays = self.state_arrays()
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        self.last_checkpoint = str(path)
        return path

    @classmethod
    def load(cls, path, dataset=None, pipeline=None):
        """Restore a trainer; ``pipeline`` (if given) must match the saved shapes."""
        meta, arrays = read_checkpoint(path)
        config = config_from_dict(meta["config"])
        if pipeline is None:
            pipeline = HandPipeline(config, meta["n_classes"], np.random.default_rng(0))
        load_pipeline_state(pipeline, meta, arrays, path)
        tr = cls(pipeline, dataset, config)
        for oname, opt in (("opt1", tr.opt1), ("opt2", tr.opt2)):
            params = {p.name: p for g in opt.groups for p in g.params}
            for pname, step in meta["adam_steps"][oname].items():
                if pname not in params:
                    raise CheckpointError(f"{path}: optimizer state for unknown parameter {pname}")
                st = opt.state_for(params[pname])
                m, v = arrays[f"{oname}/{pname}/m"], arrays[f"{oname}/{pname}/v"]
                if m.shape != st.m.shape:
                    raise CheckpointError(f"{path}: optimizer state shape mismatch for {pname}")
                st.m[...] = m
                st.v[...] = v
                st.step = int(step)
        tr.log = TrainLog(meta["log"])
        tr.phase = meta["phase"]
        tr.epoch = meta["epoch"]
        tr.initialized = meta["initialized"]
        tr.last_checkpoint = str(path)
        return tr


def read_checkpoint(path):
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing checkpoint metadata")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    return meta, arrays


def load_pipeline_state(pipeline, meta, arrays, path="<checkpoint>"):
    if meta["n_classes"] != pipeline.n_classes:
        raise CheckpointError(f"{path}: checkpoint has {meta['n_classes']} classes, model {pipeline.n_classes}")
    for name, p in pipeline.named_parameters():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[key].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: checkpoint {arrays[key].shape}, model {p.data.shape}"
            )
        p.data = np.array(arrays[key], dtype=p.data.dtype)
    for name, b in pipeline.named_buffers():
        key = f"buffer/{name}"
        if key not in arrays or arrays[key].shape != b.shape:
            raise CheckpointError(f"{path}: missing or mismatched buffer {name}")
        b[...] = arrays[key]
    expected = {f"param/{n}" for n, _ in pipeline.named_parameters()}
    extra = sorted(k for k in arrays if k.startswith("param/") and k not in expected)
    if extra:
        raise CheckpointError(f"{path}: checkpoint has unexpected parameter {extra[0][6:]}")


def load_pipeline(path):
    """Inference-only restore: (pipeline, meta)."""
    meta, arrays = read_checkpoint(path)
    config = config_from_dict(meta["config"])
    pipeline = HandPipeline(config, meta["n_classes"], np.random.default_rng(0))
    load_pipeline_state(pipeline, meta, arrays, path)
    pipeline.train(False)
    return pipeline, meta


def pretrain_localizer(dataset, pipeline, config=None):
    tr = Trainer(pipeline, dataset, config)
    tr.run_phase1()
    return tr


def train_full(dataset, trainer):
    """Phase 2 on a trainer whose localizer finished phase 1."""
    trainer.run_phase2()
    return trainer
