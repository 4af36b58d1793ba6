"""Command-line entry point: ``handid <verb> [options]``.

Exit status: 0 success, 1 runtime error, 2 usage or configuration error.
"""

import argparse
import logging
import platform
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from handid import FORMAT_VERSIONS, __version__
from handid.alignment import align_regions, read_keypoints_csv
from handid.config import dump_config, load_config
from handid.dataset import SynthConfig, load_dataset, read_image, synth_generate, to_square, write_dataset, write_image
from handid.errors import ConfigError, EvaluationError, HandIdError
from handid.features import FEATURE_TYPES, read_hfe1, write_hfe1
from handid.gradsuite import CHECKS, run_suite
from handid.matcher_eval import (
    cosine_scores, evaluate, genuine_impostor, write_report, write_score_matrix,
)
from handid.pipeline import HandPipeline
from handid.plotting import plot_cmc, plot_det
from handid.regions import FINGER_ROI, PALM_ROI
from handid.trainer import Trainer, load_pipeline

log = logging.getLogger("handid")

VERBS = ("synth", "pretrain-ln", "train", "align", "extract", "match", "eval", "gradcheck")


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                        help="config override (repeatable; wins over --config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="single-threaded numerics for bitwise reproducibility")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="handid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"handid {__version__}")
    sub = p.add_subparsers(dest="verb", metavar="VERB")
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic hand dataset")
    s.add_argument("--identities", type=int, default=20)
    s.add_argument("--images", type=int, default=10, help="images per identity")
    s.add_argument("--size", type=int, default=96, help="image side in pixels")
    s.add_argument("--train-per-identity", type=int, help="default: 60%% of --images")
    s.add_argument("--gallery-per-identity", type=int, help="default: 20%% of --images")

    for verb, text in (("pretrain-ln", "phase 1: localizer pretraining"), ("train", "both training phases")):
        t = sub.add_parser(verb, parents=[common], help=text)
        t.add_argument("--dataset", required=True, help="manifest.csv")
        t.add_argument("--checkpoint", help="resume from this checkpoint")

    a = sub.add_parser("align", parents=[common], help="write the six aligned ROIs of one image")
    a.add_argument("--image", required=True)
    a.add_argument("--keypoints", required=True, help="keypoint CSV")
    a.add_argument("--id", dest="image_id", help="image id in the CSV (default: the only one)")
    a.add_argument("--square", default="pad_zeros", choices=("pad_zeros", "center_crop", "otsu_bbox"))

    e = sub.add_parser("extract", parents=[common], help="embed one dataset split into HFE1 files")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="manifest.csv")
    e.add_argument("--split", required=True, choices=("train", "gallery", "probe"))
    e.add_argument("--region", default="hand", choices=FEATURE_TYPES + ("all",))

    for verb, text in (("match", "cosine score matrix"), ("eval", "CMC / EER report")):
        m = sub.add_parser(verb, parents=[common], help=text)
        m.add_argument("--gallery", required=True, help="gallery HFE1 file")
        m.add_argument("--probe", required=True, help="probe HFE1 file")
        if verb == "eval":
            m.add_argument("--dataset", help="manifest.csv for class labels (default: ids are labels)")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--op", action="append", choices=tuple(CHECKS), help="restrict to these ops")
    return p


def _config(args):
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.deterministic is not None:
        overrides["deterministic"] = "true" if args.deterministic else "false"
    return load_config(args.config, overrides)


def write_provenance(out, args, config, extra=None):
    lines = {
        "command": " ".join(["handid", *sys.argv[1:]]) if sys.argv else args.verb,
        "verb": args.verb,
        "handid_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": config.seed,
        "deterministic": str(config.deterministic).lower(),
        "config_digest": config.digest(),
    }
    lines.update({f"format_{k}": v for k, v in FORMAT_VERSIONS.items()})
    lines.update(extra or {})
    (out / "run_info.txt").write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    (out / "config.txt").write_text(dump_config(config))


def cmd_synth(args, config, out):
    n_train = args.train_per_identity if args.train_per_identity is not None else round(0.6 * args.images)
    n_gal = args.gallery_per_identity if args.gallery_per_identity is not None else round(0.2 * args.images)
    cfg = SynthConfig(n_identities=args.identities, images_per_identity=args.images, image_size=args.size,
                      train_per_identity=n_train, gallery_per_identity=n_gal, finger_roi=config.finger_roi)
    ds = synth_generate(cfg, seed=config.seed)
    write_dataset(ds, out)
    print(f"wrote {len(ds.ids)} images of {ds.n_classes} identities to {out}")
    return {"images": len(ds.ids)}


def _save_log(trainer, out, config):
    # wall time breaks bitwise log comparison, so deterministic runs keep it apart
    trainer.log.to_csv(out / "trainlog.csv", include_time=not config.deterministic)
    if config.deterministic:
        with open(out / "timing.csv", "w") as fh:
            fh.write("phase,epoch,wall_time\n")
            for r in trainer.log.records:
                fh.write(f"{r['phase']},{r['epoch']},{r['wall_time']!r}\n")


def cmd_train(args, config, out, phase1_only=False):
    ds = load_dataset(args.dataset)
    if args.checkpoint:
        trainer = Trainer.load(args.checkpoint, ds)
        config = trainer.config
    else:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        trainer = Trainer(HandPipeline(config, ds.n_classes, rng), ds, config)
    trainer.run_phase1()
    trainer.save(out / "checkpoint_phase1.npz" if not phase1_only else out / "checkpoint.npz")
    if not phase1_only:
        trainer.run_phase2()
        trainer.save(out / "checkpoint.npz")
    _save_log(trainer, out, config)
    last = trainer.log.records[-1] if trainer.log.records else {}
    print(f"phase {last.get('phase')} epoch {last.get('epoch')}: loss {last.get('loss_total')}")
    return {"dataset": args.dataset, "checkpoint_in": args.checkpoint or ""}


def cmd_align(args, config, out):
    image = to_square(read_image(args.image), args.square)
    kps = read_keypoints_csv(args.keypoints)
    if args.image_id is None:
        if len(kps) != 1:
            raise ConfigError(f"{args.keypoints} holds {len(kps)} images; pick one with --id", key="id")
        (kp,) = kps.values()
    else:
        if args.image_id not in kps:
            raise ConfigError(f"image id {args.image_id} not in {args.keypoints}", key="id")
        kp = kps[args.image_id]
    bundle = align_regions(image, kp, reg=config.tps_reg, palm_size=PALM_ROI, finger_size=FINGER_ROI)
    for r, roi in bundle.rois.items():
        write_image(out / f"{r}.png", roi)
    print(f"wrote {len(bundle.rois)} ROIs to {out}")
    return {"image": args.image}


def cmd_extract(args, config, out):
    pipeline, meta = load_pipeline(args.checkpoint)
    ds = load_dataset(args.dataset)
    ids = sorted(ds.split_ids(args.split))
    if not ids:
        raise EvaluationError(f"split {args.split} of {args.dataset} is empty")
    images = np.stack([to_square(ds.images[i]) for i in ids])
    if images.shape[1] != pipeline.config.channels:
        raise ConfigError(f"images have {images.shape[1]} channels, model expects {pipeline.config.channels}",
                          key="channels")
    types = FEATURE_TYPES if args.region == "all" else (args.region,)
    emb = pipeline.embed(images, feature_types=types)
    for m in types:
        write_hfe1(out / f"{args.split}_{m}.hfe1", ids, emb[m], pipeline.config.em_kind)
    print(f"embedded {len(ids)} {args.split} images ({', '.join(types)})")
    return {"checkpoint": args.checkpoint, "split": args.split, "region": args.region}


def _read_pair(args):
    gids, gvec, gkind = read_hfe1(args.gallery)
    pids, pvec, pkind = read_hfe1(args.probe)
    if not gids:
        raise EvaluationError(f"{args.gallery}: empty gallery")
    if not pids:
        raise EvaluationError(f"{args.probe}: empty probe set")
    if gkind != pkind:
        raise EvaluationError(f"embedding kind mismatch: gallery {gkind}, probe {pkind}")
    if gvec.shape[1] != pvec.shape[1]:
        raise EvaluationError(f"dimension mismatch: gallery {gvec.shape[1]}, probe {pvec.shape[1]}")
    return cosine_scores(pvec, gvec, pids, gids)


def cmd_match(args, config, out):
    sm = _read_pair(args)
    write_score_matrix(out / "scores.csv", sm)
    print(f"scored {len(sm.probe_ids)} probes against {len(sm.gallery_ids)} gallery items")
    return {"gallery": args.gallery, "probe": args.probe}


def cmd_eval(args, config, out):
    sm = _read_pair(args)
    if args.dataset:
        ds = load_dataset(args.dataset)
        missing = [i for i in sm.probe_ids + sm.gallery_ids if i not in ds.labels]
        if missing:
            raise EvaluationError(f"id {missing[0]} is not in {args.dataset}")
        pl = [ds.labels[i] for i in sm.probe_ids]
        gl = [ds.labels[i] for i in sm.gallery_ids]
    else:
        pl, gl = list(sm.probe_ids), list(sm.gallery_ids)
    report = evaluate(sm, pl, gl)
    write_score_matrix(out / "scores.csv", sm)
    write_report(out, report)
    gen, imp = genuine_impostor(sm, pl, gl)
    plot_cmc({Path(args.probe).stem: report.cmc}, out / "cmc.png")
    if len(gen) and len(imp):
        plot_det(gen, imp, out / "det.png", report.eer)
    print(f"rank-1 {report.rank1:.4f}  rank-30 {report.rank30:.4f}  EER {report.eer:.4f}  ties {report.ties}")
    return {"gallery": args.gallery, "probe": args.probe}


def cmd_gradcheck(args, config, out):
    results = run_suite(range(args.seeds), args.op)
    with open(out / "gradcheck.csv", "w") as fh:
        fh.write("op,max_rel_err,tol,passed\n")
        for r in results:
            fh.write(f"{r.op},{r.max_rel_err!r},{r.tol!r},{str(r.passed).lower()}\n")
    width = max(len(r.op) for r in results)
    for r in results:
        print(f"{r.op:<{width}}  {r.max_rel_err:.3e}  (tol {r.tol:.0e})  {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        raise GradcheckFailure(f"gradient check failed for {', '.join(failed)}")
    return {"seeds": args.seeds}


class GradcheckFailure(HandIdError):
    module = "gradcheck"


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-ln": lambda a, c, o: cmd_train(a, c, o, phase1_only=True),
    "train": cmd_train,
    "align": cmd_align,
    "extract": cmd_extract,
    "match": cmd_match,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        config = _config(args)
    except ConfigError as exc:
        print(f"handid: configuration error ({exc.key}): {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"handid: cannot read config: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(1 if config.deterministic else None):
            extra = COMMANDS[args.verb](args, config, out)
        write_provenance(out, args, config, extra)
    except ConfigError as exc:
        print(f"handid: configuration error ({exc.key}): {exc}", file=sys.stderr)
        return 2
    except HandIdError as exc:
        print(f"handid: {exc.module} error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"handid: io error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
