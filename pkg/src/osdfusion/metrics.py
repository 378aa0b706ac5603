"""Evaluation metrics: AUROC variants, TPR at fixed open-set rates, average
precision (closed and open set) and throughput.

AUROC is the Mann-Whitney statistic (ties get half credit), computed from
average ranks; it is exactly the fraction of (positive, negative) pairs
ordered correctly. FP-ID detections count as ID positives everywhere.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError
from .features import sigmoid
from .matching import iou_matrix

PAIR_NAMES = ("id/ood", "id/bg", "ood/bg")
_PAIRS = ((0, 1), (0, 2), (1, 2))
DEFAULT_OSR_LEVELS = (0.05, 0.10, 0.20)


def auroc(positive_scores, negative_scores) -> float:
    """P(random positive > random negative), ties counted 0.5."""
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise DataError("auroc needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    rank_sum = ranks[: pos.size].sum()
    return float((rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def auroc_bd(id_scores, ood_scores, bg_scores) -> float:
    """AUROC with background detections merged into the OOD negatives."""
    ood = np.asarray(ood_scores, dtype=np.float64).ravel()
    bg = np.asarray(bg_scores, dtype=np.float64).ravel()
    if ood.size + bg.size == 0:
        raise DataError("auroc_bd needs at least one OOD or BG score")
    return auroc(id_scores, np.concatenate([ood, bg]))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    area: float


def roc_curve(positive_scores, negative_scores) -> RocCurve:
    """ROC points at every distinct score, endpoints (0,0) and (1,1);
    trapezoidal area equals the rank-based AUROC."""
    pos = np.sort(np.asarray(positive_scores, dtype=np.float64).ravel())
    neg = np.sort(np.asarray(negative_scores, dtype=np.float64).ravel())
    if pos.size == 0 or neg.size == 0:
        raise DataError("roc_curve needs both classes")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        tpr.append((pos.size - np.searchsorted(pos, t, side="left")) / pos.size)
        fpr.append((neg.size - np.searchsorted(neg, t, side="left")) / neg.size)
    tpr_arr = np.asarray(tpr)
    fpr_arr = np.asarray(fpr)
    area = float(np.trapezoid(tpr_arr, fpr_arr))
    return RocCurve(fpr_arr, tpr_arr, area)


def macro_average(per_pair_values) -> float:
    """Unweighted mean of the per-pair AUROCs."""
    return float(np.mean(np.asarray(per_pair_values, dtype=np.float64)))


def macro_pairwise_auroc(posteriors, labels) -> tuple[float, dict[str, float]]:
    """One-vs-one AUROCs among ID, OOD, BG from 3-class posteriors.

    For the pair (a, b) only samples labeled a or b participate; the score
    is posterior_a - posterior_b with a as positive.
    """
    p = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if p.shape[1] != 3:
        raise DataError("macro pairwise AUROC needs 3-class posteriors")
    if y.shape != (p.shape[0],):
        raise DataError("labels must align with posteriors")
    per_pair = {}
    for name, (a, b) in zip(PAIR_NAMES, _PAIRS):
        mask_a = y == a
        mask_b = y == b
        if not np.any(mask_a) or not np.any(mask_b):
            raise DataError(f"class missing for pair {name}")
        score = p[:, a] - p[:, b]
        per_pair[name] = auroc(score[mask_a], score[mask_b])
    return macro_average(list(per_pair.values())), per_pair


def tpr_at_osr(id_scores, ood_scores, levels=DEFAULT_OSR_LEVELS) -> dict[float, float]:
    """ID recall at thresholds that keep the open-set rate (fraction of OOD
    accepted as ID) within each level."""
    id_s = np.sort(np.asarray(id_scores, dtype=np.float64).ravel())
    ood_s = np.sort(np.asarray(ood_scores, dtype=np.float64).ravel())
    if id_s.size == 0 or ood_s.size == 0:
        raise DataError("tpr_at_osr needs both ID and OOD scores")
    candidates = np.unique(np.concatenate([id_s, ood_s]))
    out = {}
    for level in levels:
        threshold = np.inf
        for t in candidates:
            osr = (ood_s.size - np.searchsorted(ood_s, t, side="left")) / ood_s.size
            if osr <= level:
                threshold = t
                break
        tpr = (id_s.size - np.searchsorted(id_s, threshold, side="left")) / id_s.size
        out[float(level)] = float(tpr)
    return out


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------


def _interpolated_area(recall: np.ndarray, precision: np.ndarray, eleven_point: bool) -> float:
    if eleven_point:
        total = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r
            total += float(precision[mask].max()) if np.any(mask) else 0.0
        return total / 11.0
    # all-point interpolation: precision envelope from the right
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(p.size - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    changed = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[changed + 1] - r[changed]) * p[changed + 1]))


@dataclass
class ApResult:
    per_class: dict[str, float]
    mean_ap: float
    n_ground_truth: dict[str, int]


def average_precision(
    detections,
    ground_truth,
    vocabulary,
    iou_threshold: float = 0.5,
    open_set: bool = False,
    decisions=None,
    eleven_point: bool = False,
) -> ApResult:
    """Detection AP over the vocabulary classes.

    Each detection competes for its argmax class, ranked by that class's
    sigmoid confidence, greedily matched against unused ground truth at the
    IoU threshold. Open-set mode drops detections the fusion rule declared
    OOD (or suppressed by pruning) before scoring; ground truth of
    non-vocabulary classes never enters the pools.
    """
    detections = list(detections)
    ground_truth = list(ground_truth)
    if open_set:
        if decisions is None or len(decisions) != len(detections):
            raise DataError("open-set AP needs one fusion decision per detection")
        keep = [d not in ("OOD", "SUPPRESSED") for d in decisions]
        detections = [det for det, k in zip(detections, keep) if k]

    gt_by_class: dict[str, list] = {name: [] for name in vocabulary.id_classes}
    for gt in ground_truth:
        if vocabulary.contains(gt.class_name):
            gt_by_class[gt.class_name].append(gt)

    det_by_class: dict[str, list] = {name: [] for name in vocabulary.id_classes}
    for det in detections:
        cls = vocabulary.id_classes[int(np.argmax(det.class_logits))]
        conf = float(sigmoid(np.max(det.class_logits)))
        det_by_class[cls].append((conf, det))

    per_class: dict[str, float] = {}
    n_gt: dict[str, int] = {}
    for name in vocabulary.id_classes:
        gts = gt_by_class[name]
        if not gts:
            continue
        n_gt[name] = len(gts)
        cands = det_by_class[name]
        if not cands:
            per_class[name] = 0.0
            continue
        order = sorted(range(len(cands)), key=lambda i: -cands[i][0])
        gt_boxes = np.stack([g.box for g in gts])
        used = np.zeros(len(gts), dtype=bool)
        hits = np.zeros(len(cands))
        for rank, i in enumerate(order):
            det = cands[i][1]
            best_iou, best_j = 0.0, -1
            for j, gt in enumerate(gts):
                if used[j] or gt.image_id != det.image_id:
                    continue
                pair_iou = float(iou_matrix(det.box[None, :], gt_boxes[j][None, :])[0, 0])
                if pair_iou > best_iou:
                    best_iou, best_j = pair_iou, j
            if best_j >= 0 and best_iou >= iou_threshold:
                used[best_j] = True
                hits[rank] = 1.0
        tp = np.cumsum(hits)
        fp = np.cumsum(1.0 - hits)
        recall = tp / len(gts)
        precision = tp / (tp + fp)
        per_class[name] = _interpolated_area(recall, precision, eleven_point)

    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return ApResult(per_class, mean_ap, n_gt)


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------


@dataclass
class ThroughputResult:
    detections_per_second: float
    rates: list[float]
    n_records: int
    runs: int

    def to_payload(self) -> dict:
        return {
            "detections_per_second": self.detections_per_second,
            "rates": self.rates,
            "n_records": self.n_records,
            "runs": self.runs,
        }


def measure_throughput(classify_fn, records, min_records: int = 1000, runs: int = 3) -> ThroughputResult:
    """Wall-clock classification rate over at least min_records, excluding
    parsing; one warm-up pass, then `runs` timed passes."""
    records = list(records)
    if not records:
        raise DataError("cannot measure throughput on an empty stream")
    while len(records) < min_records:
        records = records + records
    classify_fn(records)  # warm-up
    rates = []
    for _ in range(runs):
        start = time.perf_counter()
        classify_fn(records)
        elapsed = time.perf_counter() - start
        rates.append(len(records) / elapsed)
    return ThroughputResult(float(np.mean(rates)), rates, len(records), runs)


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    auroc: float
    auroc_bd: float
    tpr_at_osr: dict[float, float]
    macro_pairwise_auroc: float | None = None
    per_pair_auroc: dict[str, float] | None = None
    closed_set_map: float | None = None
    open_set_map: float | None = None
    fps: dict | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_payload(self) -> dict:
        return {
            "auroc": self.auroc,
            "auroc_bd": self.auroc_bd,
            "tpr_at_osr": {f"{k:g}": v for k, v in self.tpr_at_osr.items()},
            "macro_pairwise_auroc": self.macro_pairwise_auroc,
            "per_pair_auroc": self.per_pair_auroc,
            "closed_set_map": self.closed_set_map,
            "open_set_map": self.open_set_map,
            "fps": self.fps,
            "counts": self.counts,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "EvalReport":
        return cls(
            auroc=payload["auroc"],
            auroc_bd=payload["auroc_bd"],
            tpr_at_osr={float(k): v for k, v in payload["tpr_at_osr"].items()},
            macro_pairwise_auroc=payload.get("macro_pairwise_auroc"),
            per_pair_auroc=payload.get("per_pair_auroc"),
            closed_set_map=payload.get("closed_set_map"),
            open_set_map=payload.get("open_set_map"),
            fps=payload.get("fps"),
            counts=payload.get("counts") or {},
        )


def render_report(report: EvalReport) -> str:
    """Human-readable tables mirroring the result layouts in the writeup."""
    lines = []
    lines.append("Two-class setting (ID vs OOD)")
    header = ["AUROC", "AUROC_bd"] + [f"TPR@{int(level * 100)}%" for level in sorted(report.tpr_at_osr)]
    row = [f"{report.auroc:.3f}", f"{report.auroc_bd:.3f}"] + [
        f"{report.tpr_at_osr[level]:.3f}" for level in sorted(report.tpr_at_osr)
    ]
    width = max(len(h) for h in header) + 2
    lines.append("".join(h.rjust(width) for h in header))
    lines.append("".join(v.rjust(width) for v in row))
    if report.macro_pairwise_auroc is not None:
        lines.append("")
        lines.append("Three-class setting (ID vs OOD vs BG)")
        pair_header = ["macro AUROC"] + list(report.per_pair_auroc)
        pair_row = [f"{report.macro_pairwise_auroc:.3f}"] + [
            f"{v:.3f}" for v in report.per_pair_auroc.values()
        ]
        width = max(len(h) for h in pair_header) + 2
        lines.append("".join(h.rjust(width) for h in pair_header))
        lines.append("".join(v.rjust(width) for v in pair_row))
    lines.append("")
    lines.append("Detection quality")
    closed = "n/a" if report.closed_set_map is None else f"{report.closed_set_map:.3f}"
    open_ = "n/a" if report.open_set_map is None else f"{report.open_set_map:.3f}"
    lines.append(f"  closed-set mAP: {closed}")
    lines.append(f"  open-set mAP:   {open_}")
    if report.fps:
        lines.append(f"  throughput:     {report.fps['detections_per_second']:.0f} det/s "
                     f"({report.fps['runs']} runs)")
    if report.counts:
        lines.append("")
        lines.append("Retained detections by label")
        for key, value in report.counts.items():
            lines.append(f"  {key}: {value}")
    return "\n".join(lines) + "\n"


def write_roc_csv(curve: RocCurve, stream):
    stream.write("fpr,tpr\n")
    for f, t in zip(curve.fpr, curve.tpr):
        stream.write(f"{float(f)!r},{float(t)!r}\n")
