"""Synthetic end-to-end experiment: generate, train both phases, evaluate."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from handid.config import TrainConfig
from handid.dataset import SynthConfig, synth_generate
from handid.features import FEATURE_TYPES
from handid.matcher_eval import cosine_scores, evaluate
from handid.pipeline import HandPipeline
from handid.regions import FINGERS
from handid.trainer import Trainer

log = logging.getLogger(__name__)


def keypoint_error(pipeline, dataset, ids, batch=64):
    """Mean Euclidean keypoint error in normalized image units."""
    was = pipeline.localizer.training
    pipeline.localizer.train(False)
    errs = []
    try:
        for s in range(0, len(ids), batch):
            chunk = ids[s:s + batch]
            pred = pipeline.predict_keypoints(dataset.image_batch(chunk))
            gt = dataset.keypoint_batch(chunk)
            errs.append(np.linalg.norm(pred.astype(np.float64) - gt, axis=-1).ravel())
    finally:
        pipeline.localizer.train(was)
    return float(np.concatenate(errs).mean())


def evaluate_pipeline(pipeline, dataset, feature_types=FEATURE_TYPES):
    """{feature type: EvalReport} for probe vs gallery split."""
    gal = dataset.split_ids("gallery")
    prb = dataset.split_ids("probe")
    eg = pipeline.embed(dataset.image_batch(gal), feature_types=feature_types)
    ep = pipeline.embed(dataset.image_batch(prb), feature_types=feature_types)
    gl, pl = dataset.label_array(gal), dataset.label_array(prb)
    out = {}
    for m in feature_types:
        sm = cosine_scores(ep[m], eg[m], prb, gal)
        out[m] = evaluate(sm, pl, gl)
    return out


@dataclass
class ExperimentResult:
    config: TrainConfig
    kp_error_phase1: float
    kp_error_final: float
    reports: dict
    trainer: Trainer = field(repr=False)
    seconds: float = 0.0

    def rank1(self, m):
        return self.reports[m].rank1

    @property
    def finger_rank1(self):
        return float(np.mean([self.reports[f].rank1 for f in FINGERS]))

    def summary(self):
        out = {"kp_error_phase1": self.kp_error_phase1, "kp_error_final": self.kp_error_final,
               "finger_rank1": self.finger_rank1, "seconds": self.seconds}
        for m, r in self.reports.items():
            out[f"{m}_rank1"] = r.rank1
            out[f"{m}_eer"] = r.eer
        return out


def run_experiment(config=None, synth=None, dataset=None, trainer=None):
    """Train on the synthetic set (or ``dataset``) and evaluate every feature type.

    A partially trained ``trainer`` (e.g. restored from a checkpoint) is
    continued instead of starting over.
    """
    config = config or TrainConfig()
    t0 = time.perf_counter()
    with threadpool_limits(1 if config.deterministic else None):
        if dataset is None:
            dataset = synth_generate(synth or SynthConfig(finger_roi=config.finger_roi), seed=config.seed)
        if trainer is None:
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
            pipeline = HandPipeline(config, dataset.n_classes, rng)
            trainer = Trainer(pipeline, dataset, config)
        pipeline = trainer.pipeline
        held_out = dataset.split_ids("gallery") + dataset.split_ids("probe")
        trainer.run_phase1()
        kp1 = keypoint_error(pipeline, dataset, held_out)
        log.info("phase 1 held-out keypoint error %.4f", kp1)
        trainer.run_phase2()
        kp2 = keypoint_error(pipeline, dataset, held_out)
        reports = evaluate_pipeline(pipeline, dataset)
    return ExperimentResult(config, kp1, kp2, reports, trainer, time.perf_counter() - t0)
