"""End-to-end acceptance checks, one test per criterion.

Each test prints ``criterion N: PASS|FAIL <details>`` and then asserts, so the
report line appears whether or not the criterion holds.
"""

import time
import warnings
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import ACCEPTANCE_LINES
from handid.alignment import read_keypoints_csv, width_anchor_map, write_keypoints_csv
from handid.config import TrainConfig
from handid.dataset import SynthConfig, load_dataset, synth_generate, write_dataset
from handid.diffcore import read_ht01, write_ht01
from handid.errors import CheckpointError, FormatError, LoadError
from handid.experiment import evaluate_pipeline, keypoint_error
from handid.features import FEATURE_TYPES, read_hfe1, write_hfe1
from handid.gradsuite import run_suite
from handid.losses import EmptyTripletWarning, batch_hard_mine
from handid.matcher_eval import cmc, eer
from handid.pipeline import HandPipeline
from handid.regions import FINGERS, KEYPOINT_COUNTS, REGIONS
from handid.sampler import grid_sample, identity_grid
from handid.tps import template_layout, tps_fit
from handid.trainer import Trainer, read_checkpoint

TIME_BUDGET = 15 * 60


def report(capsys, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared training runs


def _ln_params(pipe):
    return {n: p.data.copy() for n, p in pipe.named_parameters() if n.startswith("ln.")}


def _run(config):
    """Both phases on the default synthetic set, with freeze-window snapshots."""
    t0 = time.perf_counter()
    with threadpool_limits(1):
        ds = synth_generate(SynthConfig(n_identities=20, images_per_identity=10, finger_roi=config.finger_roi),
                            seed=config.seed)
        pipe = HandPipeline(config, ds.n_classes, np.random.default_rng(np.random.SeedSequence([config.seed, 0])))
        tr = Trainer(pipe, ds, config)
        held_out = ds.split_ids("gallery") + ds.split_ids("probe")
        tr.run_phase1()
        kp1 = keypoint_error(pipe, ds, held_out)
        ln_start = _ln_params(pipe)
        tr.run_phase2(until=config.unfreeze_epoch)
        ln_window_end = _ln_params(pipe)
        tr.run_phase2()
        reports = evaluate_pipeline(pipe, ds)
    return {
        "trainer": tr, "kp_error": kp1, "reports": reports, "ln_start": ln_start, "ln_window_end": ln_window_end,
        "params": {n: p.data.copy() for n, p in pipe.named_parameters()}, "seconds": time.perf_counter() - t0,
    }


@pytest.fixture(scope="module")
def jmf_run():
    return _run(TrainConfig())


@pytest.fixture(scope="module")
def ce_run():
    return _run(replace(TrainConfig(), lambda_t=0.0))


@pytest.fixture(scope="module")
def jmf_rerun():
    return _run(TrainConfig())


def _finger_rank1(run):
    return float(np.mean([run["reports"][f].rank1 for f in FINGERS]))


# ---------------------------------------------------------------------------
# 1. TPS exactness


def _sources(region):
    lay = template_layout(region, (32, 32) if region == "palm" else (32, 8))
    if region == "palm":
        return lay.keypoints
    anchors, _ = width_anchor_map(KEYPOINT_COUNTS[region], lay.size)
    return np.concatenate([lay.keypoints, anchors])


def test_criterion_1_tps_exactness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_res = worst_w = 0.0
    for region in REGIONS:
        src = _sources(region)
        for _ in range(100):
            target = src + rng.uniform(-0.3, 0.3, src.shape)
            coeffs = tps_fit(src, target, reg=0.0, region=region)
            worst_res = max(worst_res, np.abs(coeffs(src) - target).max())
            a = rng.uniform(-1, 1, (2, 2)) + np.eye(2)
            affine = src @ a.T + rng.uniform(-0.5, 0.5, 2)
            worst_w = max(worst_w, np.abs(tps_fit(src, affine, reg=0.0, region=region).w).max())
    secs = time.perf_counter() - t0
    ok = worst_res < 1e-5 and worst_w < 1e-5 and secs < 2
    report(capsys, 1, ok, f"max residual {worst_res:.2e}, max |w| on affine {worst_w:.2e}, {secs:.2f}s")


# ---------------------------------------------------------------------------
# 2. gradient suite


def test_criterion_2_gradient_suite(capsys):
    t0 = time.perf_counter()
    results = run_suite(range(20))
    secs = time.perf_counter() - t0
    failed = [r.op for r in results if not r.passed]
    worst = ", ".join(f"{r.op} {r.max_rel_err:.1e}" for r in results)
    report(capsys, 2, not failed and secs < 60,
           f"{len(results)} ops x 20 seeds in {secs:.1f}s; failed: {failed or 'none'}; {worst}")


# ---------------------------------------------------------------------------
# 3. sampler


def test_criterion_3_sampler_cases(capsys):
    rng = np.random.default_rng(3)
    identity_ok = True
    for h, w in [(2, 2), (5, 7), (16, 9), (33, 33)]:
        img = rng.random((2, h, w), dtype=np.float32)
        out, _ = grid_sample(img, identity_grid(h, w))
        identity_ok &= out.tobytes() == img.tobytes()
    img = np.zeros((1, 5, 5), np.float32)
    img[0, 2, 2] = 7
    center, _ = grid_sample(img, np.zeros((1, 1, 2), np.float32))
    mid_img = np.array([[[10.0, 20.0], [10.0, 20.0]]], np.float32)
    mid, _ = grid_sample(mid_img, np.array([[[0.0, -1.0]]], np.float32))
    e_center = abs(float(center[0, 0, 0]) - 7)
    e_mid = abs(float(mid[0, 0, 0]) - 15)
    ok = identity_ok and e_center <= 1e-6 and e_mid <= 1e-6
    report(capsys, 3, ok, f"identity exact {identity_ok}, pixel-center err {e_center:.1e}, midpoint err {e_mid:.1e}")


# ---------------------------------------------------------------------------
# 4. batch-hard oracle


def _exhaustive(x, labels):
    out = []
    n = len(labels)
    for a in range(n):
        best_p = best_n = None
        for j in range(n):
            d = np.sqrt(np.sum((x[a] - x[j]) ** 2))
            if j != a and labels[j] == labels[a] and (best_p is None or d > best_p[0]):
                best_p = (d, j)
            if labels[j] != labels[a] and (best_n is None or d < best_n[0]):
                best_n = (d, j)
        if best_p and best_n:
            out.append((a, best_p[1], best_n[1]))
    return out


def test_criterion_4_batch_hard_oracle(capsys):
    rng = np.random.default_rng(4)
    mismatches = 0
    for trial in range(50):
        n = int(rng.integers(2, 65))
        x = rng.standard_normal((n, 8))
        if trial % 2:
            x = np.round(x)  # integer grid: many equal distances exercise the tie-break
        labels = rng.integers(0, max(2, n // 4), n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyTripletWarning)
            got = batch_hard_mine(x, labels).as_tuples()
        mismatches += got != _exhaustive(x, labels)
    report(capsys, 4, mismatches == 0, f"{50 - mismatches}/50 batches match exhaustive search")


# ---------------------------------------------------------------------------
# 5. ranking and EER


def _brute_ranks(values, pl, gl):
    ranks = []
    for row, lab in zip(values, pl):
        best = None
        for j in range(len(row)):
            if gl[j] != lab:
                continue
            ahead = sum(1 for k in range(len(row)) if row[k] > row[j] or (row[k] == row[j] and k < j))
            best = ahead + 1 if best is None else min(best, ahead + 1)
        if best is not None:
            ranks.append(best)
    return ranks


def test_criterion_5_ranking_and_eer(capsys):
    rng = np.random.default_rng(5)
    cmc_ok = 0
    for trial in range(100):
        values = rng.random((20, 50))
        if trial % 2:
            values = np.round(values * 5) / 5  # coarse scores produce ties
        pl, gl = rng.integers(0, 15, 20), rng.integers(0, 15, 50)
        res = cmc(values, pl, gl)
        ranks = _brute_ranks(values, pl, gl)
        curve = np.array([np.mean(np.array(ranks) <= k) for k in range(1, 51)]) if ranks else np.zeros(50)
        cmc_ok += list(res.ranks) == ranks and np.array_equal(res.curve, curve)
    sep = eer([0.8, 0.9, 0.95], [0.1, 0.3, 0.5])
    same = eer([0.2, 0.4, 0.6, 0.8], [0.2, 0.4, 0.6, 0.8])
    trials, g = 1000, 10
    r1 = cmc(rng.random((trials, g)), rng.integers(0, g, trials), np.arange(g)).at(1)
    sigma = np.sqrt(0.1 * 0.9 / trials)
    ok = cmc_ok == 100 and sep == 0.0 and same == 0.5 and abs(r1 - 0.1) <= 3 * sigma
    report(capsys, 5, ok, f"CMC {cmc_ok}/100 match, EER separated {sep}, identical {same}, "
                          f"random rank-1 {r1:.3f} (0.100 +- {3 * sigma:.3f})")


# ---------------------------------------------------------------------------
# 6. schedule fidelity


def test_criterion_6_schedule(capsys, jmf_run):
    tr = jmf_run["trainer"]
    p2 = tr.log.phase(2)
    ce_exact = all(r["lambda_ce"] == 1.0 / r["epoch"] for r in p2)
    window = [r for r in p2 if r["epoch"] <= tr.config.unfreeze_epoch]
    frozen_logged = all(r["ln_state"] == "frozen" and r["ln_lr"] == 0 for r in window)
    frozen_bitwise = all(np.array_equal(jmf_run["ln_start"][n], jmf_run["ln_window_end"][n]) for n in jmf_run["ln_start"])
    kp_off = all(r["lambda_kp"] == 0 and r["loss_kp"] == 0 for r in window)
    after = [r for r in p2 if r["epoch"] > tr.config.unfreeze_epoch]
    kp_on = all(r["lambda_kp"] == tr.config.lambda_kp and r["ln_state"] == "last_layer" for r in after)
    ok = ce_exact and frozen_logged and frozen_bitwise and kp_off and kp_on and len(p2) == tr.config.p2_epochs
    report(capsys, 6, ok, f"{len(p2)} epochs: lambda_CE exact {ce_exact}, LN bitwise frozen through epoch "
                          f"{tr.config.unfreeze_epoch} {frozen_bitwise}, lambda_KP off before unfreeze {kp_off}, "
                          f"on after {kp_on}")


# ---------------------------------------------------------------------------
# 7. end-to-end toy reproduction


def test_criterion_7_toy_reproduction(capsys, jmf_run, ce_run):
    kp = jmf_run["kp_error"]
    rep = jmf_run["reports"]
    hand, palm = rep["hand"].rank1, rep["palm"].rank1
    fing_jmf, fing_ce = _finger_rank1(jmf_run), _finger_rank1(ce_run)
    secs = jmf_run["seconds"] + ce_run["seconds"]
    a = kp < 0.05
    b = hand >= 0.90
    c = hand >= palm - 0.02 and fing_jmf > fing_ce
    ok = a and b and c and secs < TIME_BUDGET
    report(capsys, 7, ok, f"(a) held-out kp error {kp:.4f} {'ok' if a else 'FAIL'}; "
                          f"(b) hand rank-1 {hand:.3f} {'ok' if b else 'FAIL'}; "
                          f"(c) palm rank-1 {palm:.3f}, finger rank-1 L_JMF {fing_jmf:.3f} vs CE-only {fing_ce:.3f} "
                          f"{'ok' if c else 'FAIL'}; CE-only hand {ce_run['reports']['hand'].rank1:.3f}; "
                          f"{secs:.0f}s for both runs")


# ---------------------------------------------------------------------------
# 8. determinism


def _reports_equal(a, b):
    for m in FEATURE_TYPES:
        ra, rb = a[m], b[m]
        if not np.array_equal(ra.cmc, rb.cmc):
            return False
        fields = ("rank1", "rank30", "eer", "n_genuine", "n_impostor", "ties", "excluded")
        if any(getattr(ra, f) != getattr(rb, f) for f in fields):
            return False
    return True


def test_criterion_8_determinism(capsys, jmf_run, jmf_rerun):
    log_a = jmf_run["trainer"].log.to_csv_text(include_time=False)
    log_b = jmf_rerun["trainer"].log.to_csv_text(include_time=False)
    logs = log_a == log_b
    reports = _reports_equal(jmf_run["reports"], jmf_rerun["reports"])
    params = all(np.array_equal(jmf_run["params"][n], jmf_rerun["params"][n]) for n in jmf_run["params"])
    total = jmf_run["seconds"] + jmf_rerun["seconds"]
    report(capsys, 8, logs and reports and params,
           f"TrainLog identical {logs} ({len(log_a.splitlines()) - 1} rows), EvalReports identical {reports}, "
           f"parameters identical {params}; {total:.0f}s for both runs")


# ---------------------------------------------------------------------------
# 9. format round trips


def _expect(exc, fn, *args, match=None):
    try:
        fn(*args)
    except exc as e:
        return match is None or match in str(e)
    return False


def test_criterion_9_round_trips(capsys, tmp_path):
    rng = np.random.default_rng(9)
    checks = {}

    arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
    write_ht01(tmp_path / "t.ht", arr)
    checks["HT01"] = read_ht01(tmp_path / "t.ht").tobytes() == arr.tobytes()
    raw = (tmp_path / "t.ht").read_bytes()
    (tmp_path / "bad.ht").write_bytes(b"XXXX" + raw[4:])
    checks["HT01 magic"] = _expect(FormatError, read_ht01, tmp_path / "bad.ht", match="magic")
    (tmp_path / "short.ht").write_bytes(raw[:-8])
    checks["HT01 shape"] = _expect(FormatError, read_ht01, tmp_path / "short.ht", match="shape")

    vecs = rng.standard_normal((4, 6)).astype(np.float32)
    write_hfe1(tmp_path / "e.hfe1", ["a", "b", "c", "d"], vecs, "conv")
    ids, back, kind = read_hfe1(tmp_path / "e.hfe1")
    checks["HFE1"] = ids == ["a", "b", "c", "d"] and back.tobytes() == vecs.tobytes() and kind == "conv"
    raw = (tmp_path / "e.hfe1").read_bytes()
    (tmp_path / "bad.hfe1").write_bytes(b"HFE0" + raw[4:])
    checks["HFE1 magic"] = _expect(FormatError, read_hfe1, tmp_path / "bad.hfe1", match="magic")
    (tmp_path / "short.hfe1").write_bytes(raw[:-4])
    checks["HFE1 shape"] = _expect(FormatError, read_hfe1, tmp_path / "short.hfe1", match="truncated")

    kps = {"x": rng.random((42, 2)).astype(np.float32), "y": rng.random((42, 2)).astype(np.float32)}
    write_keypoints_csv(tmp_path / "kp.csv", kps)
    got = read_keypoints_csv(tmp_path / "kp.csv")
    checks["keypoint CSV"] = all(got[k].tobytes() == kps[k].tobytes() for k in kps)
    lines = (tmp_path / "kp.csv").read_text().splitlines()
    (tmp_path / "kp41.csv").write_text("\n".join(lines[:-1]) + "\n")
    checks["keypoint count"] = _expect(LoadError, read_keypoints_csv, tmp_path / "kp41.csv", match="y")

    ds = synth_generate(SynthConfig(n_identities=3, images_per_identity=3, image_size=32, train_per_identity=1,
                                    gallery_per_identity=1), seed=9)
    checks["manifest"] = load_dataset(write_dataset(ds, tmp_path / "ds")).equals(ds)

    config = TrainConfig(ln_input_size=32, align_input_size=32, ln_channels=(4,), backbone_channels=(2, 2, 2),
                         em_filters=2, classes_per_batch=2, samples_per_class=1)
    pipe = HandPipeline(config, ds.n_classes, np.random.default_rng(0))
    tr = Trainer(pipe, ds, config)
    path = tr.save(tmp_path / "ck.npz")
    back = Trainer.load(path, ds)
    checks["checkpoint"] = all(np.array_equal(p.data, q.data) for (_, p), (_, q) in
                               zip(pipe.named_parameters(), back.pipeline.named_parameters()))
    other = HandPipeline(replace(config, em_filters=3), ds.n_classes, np.random.default_rng(0))
    checks["checkpoint shape"] = _expect(CheckpointError, Trainer.load, path, ds, other, match="shape mismatch")
    meta_raw, arrays = read_checkpoint(path)
    meta_raw["version"] = "HCK0"
    import json
    arrays["__meta__"] = np.frombuffer(json.dumps(meta_raw).encode(), dtype=np.uint8)
    np.savez(tmp_path / "old.npz", **arrays)
    checks["checkpoint version"] = _expect(CheckpointError, read_checkpoint, tmp_path / "old.npz", match="version")

    failed = [k for k, v in checks.items() if not v]
    report(capsys, 9, not failed, f"{len(checks) - len(failed)}/{len(checks)} checks; failed: {failed or 'none'}")
