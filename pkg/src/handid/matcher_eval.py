"""Cosine 1-NN identification, CMC curves and equal error rate."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from handid.errors import EvaluationError


@dataclass
class ScoreMatrix:
    probe_ids: list
    gallery_ids: list
    values: np.ndarray  # (n_probe, n_gallery)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise EvaluationError(
                f"score matrix {self.values.shape} does not match {len(self.probe_ids)} probes x "
                f"{len(self.gallery_ids)} gallery items"
            )
        if not np.all(np.isfinite(self.values)):
            raise EvaluationError("score matrix has non-finite values")


@dataclass
class CmcResult:
    curve: np.ndarray  # CMC(k) for k = 1..n_gallery
    ranks: np.ndarray  # 1-based rank per evaluated probe
    excluded: int  # probes whose class is not enrolled
    ties: int  # probes whose best genuine score ties an impostor score

    def at(self, k):
        if len(self.curve) == 0:
            return float("nan")
        return float(self.curve[min(k, len(self.curve)) - 1])


@dataclass
class EvalReport:
    cmc: np.ndarray
    rank1: float
    rank30: float
    eer: float
    n_genuine: int
    n_impostor: int
    ties: int
    excluded: int = 0


def _unit_rows(x, ids, what):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise EvaluationError(f"zero-norm {what} vector for id {ids[bad[0]]}")
    return x / norms[:, None]


def cosine_scores(probes, gallery, probe_ids=None, gallery_ids=None):
    probes = np.atleast_2d(probes)
    gallery = np.atleast_2d(gallery)
    probe_ids = list(probe_ids) if probe_ids is not None else [str(i) for i in range(len(probes))]
    gallery_ids = list(gallery_ids) if gallery_ids is not None else [str(i) for i in range(len(gallery))]
    if probes.shape[1] != gallery.shape[1]:
        raise EvaluationError(f"dimension mismatch: probes {probes.shape[1]}, gallery {gallery.shape[1]}")
    p = _unit_rows(probes, probe_ids, "probe")
    g = _unit_rows(gallery, gallery_ids, "gallery")
    return ScoreMatrix(probe_ids, gallery_ids, p @ g.T)


def ranking(scores_row):
    """Gallery indices by descending score, ties by ascending index."""
    scores_row = np.asarray(scores_row)
    return np.lexsort((np.arange(len(scores_row)), -scores_row))


def identify(probe, gallery, gallery_ids=None):
    """Ranked (gallery id, cosine score) candidates for one probe vector."""
    gallery = np.atleast_2d(gallery)
    if len(gallery) == 0:
        raise EvaluationError("identify: empty gallery")
    probe = np.asarray(probe).reshape(1, -1)
    if probe.shape[1] != gallery.shape[1]:
        raise EvaluationError(f"dimension mismatch: probe {probe.shape[1]}, gallery {gallery.shape[1]}")
    gallery_ids = list(gallery_ids) if gallery_ids is not None else list(range(len(gallery)))
    sm = cosine_scores(probe, gallery, ["probe"], gallery_ids)
    row = sm.values[0]
    return [(gallery_ids[j], float(row[j])) for j in ranking(row)]


def cmc(scores, probe_labels, gallery_labels):
    values = scores.values if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=np.float64)
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    n_gallery = values.shape[1]
    ranks = []
    excluded = ties = 0
    for row, lab in zip(values, probe_labels):
        same = gallery_labels == lab
        if not same.any():
            excluded += 1
            continue
        order = ranking(row)
        pos = int(np.flatnonzero(same[order])[0])
        ranks.append(pos + 1)
        best = row[order[pos]]
        if np.any(row[~same] == best):
            ties += 1
    ranks = np.array(ranks, dtype=np.int64)
    if len(ranks):
        curve = np.array([(ranks <= k).mean() for k in range(1, n_gallery + 1)])
    else:
        curve = np.zeros(n_gallery)
    return CmcResult(curve, ranks, excluded, ties)


def det_points(genuine, impostor):
    """(thresholds, FAR, FRR) at every distinct score plus +inf."""
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    t = np.append(np.unique(np.concatenate([genuine, impostor])), np.inf)
    far = (len(impostor) - np.searchsorted(impostor, t, side="left")) / len(impostor)
    frr = np.searchsorted(genuine, t, side="left") / len(genuine)
    return t, far, frr


def eer(genuine, impostor):
    """Equal error rate, FAR(t) = P(impostor >= t), FRR(t) = P(genuine < t).

    The (FAR, FRR) points at successive thresholds are joined by straight
    segments and the crossing with FAR = FRR is returned.  The segment
    intersection is written symmetrically so that swapping the roles of the
    two score sets (and negating them) yields the identical value.
    """
    if len(genuine) == 0 or len(impostor) == 0:
        raise ValueError("eer needs non-empty genuine and impostor score sets")
    _, far, frr = det_points(genuine, impostor)
    d = far - frr
    k = int(np.flatnonzero(d <= 0)[0])
    if d[k] == 0:
        return float(far[k])
    a1, b1, a2, b2 = far[k - 1], frr[k - 1], far[k], frr[k]
    return float((a1 * b2 - b1 * a2) / (d[k - 1] - d[k]))


def genuine_impostor(scores, probe_labels, gallery_labels):
    values = scores.values if isinstance(scores, ScoreMatrix) else np.asarray(scores)
    same = np.asarray(probe_labels)[:, None] == np.asarray(gallery_labels)[None, :]
    return values[same], values[~same]


def evaluate(scores, probe_labels, gallery_labels):
    res = cmc(scores, probe_labels, gallery_labels)
    gen, imp = genuine_impostor(scores, probe_labels, gallery_labels)
    e = eer(gen, imp) if len(gen) and len(imp) else float("nan")
    return EvalReport(res.curve, res.at(1), res.at(30), e, len(gen), len(imp), res.ties, res.excluded)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(x):
    return repr(float(x))


def write_score_matrix(path, sm):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["probe_id", *sm.gallery_ids])
        for pid, row in zip(sm.probe_ids, sm.values):
            wr.writerow([pid, *map(_fmt, row)])


def read_score_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["probe_id"]:
        raise EvaluationError(f"{path}: missing score-matrix header")
    gallery_ids = rows[0][1:]
    probe_ids = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(probe_ids), len(gallery_ids))
    return ScoreMatrix(probe_ids, gallery_ids, values)


def write_report(out_dir, report, prefix=""):
    """``{prefix}cmc.csv`` (rank,cmc) and ``{prefix}summary.csv`` (rank1,rank30,eer,ties)."""
    out_dir = Path(out_dir)
    with open(out_dir / f"{prefix}cmc.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["rank", "cmc"])
        for k, v in enumerate(report.cmc, start=1):
            wr.writerow([k, _fmt(v)])
    with open(out_dir / f"{prefix}summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["rank1", "rank30", "eer", "ties"])
        wr.writerow([_fmt(report.rank1), _fmt(report.rank30), _fmt(report.eer), report.ties])
