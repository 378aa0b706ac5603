"""Detection-to-ground-truth matching and four-way labeling.

Per image, detections are assigned one-to-one to ground-truth boxes by
minimizing total (1 - IoU) cost with an exact assignment solver; pairs below
the IoU threshold are discarded. Each detection then gets one of four labels:

    TP_ID  matched, class in vocabulary, argmax logit class correct
    FP_ID  matched, class in vocabulary, argmax logit class wrong
    OOD    matched, class not in vocabulary
    BG     unmatched

TP_ID and FP_ID collapse to "ID" for the open-set problem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._accel import maybe_njit
from .errors import DataError
from .interchange import (
    ClassVocabulary,
    DetectionRecord,
    GroundTruthObject,
    group_by_image,
    parse_detection_line,
    serialize_detection,
    _iter_lines,
)

# Canonical collapsed-class order used for MLP targets and posteriors.
COLLAPSED_ORDER = ("ID", "OOD", "BG")


class MatchLabel(Enum):
    TP_ID = "TP_ID"
    FP_ID = "FP_ID"
    OOD = "OOD"
    BG = "BG"

    def collapsed(self) -> str:
        if self in (MatchLabel.TP_ID, MatchLabel.FP_ID):
            return "ID"
        return self.value


@dataclass(eq=False)
class LabeledDetection:
    """A DetectionRecord plus its match outcome.

    matched_gt_index indexes the ground-truth sequence the labeling ran on;
    it is None exactly when the label is BG.
    """

    record: DetectionRecord
    label: MatchLabel
    matched_class: str | None = None
    matched_gt_index: int | None = None
    iou_with_match: float | None = None

    @property
    def collapsed_label(self) -> str:
        return self.label.collapsed()


def _check_box(box, name):
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (4,):
        raise DataError(f"{name} must have 4 coordinates")
    if not np.all(np.isfinite(box)):
        raise DataError(f"{name} contains non-finite coordinates")
    if not (box[0] < box[2] and box[1] < box[3]):
        raise DataError(f"degenerate {name}: {box.tolist()}")
    return box


def iou(box_a, box_b) -> float:
    """Intersection over union of two corner-form boxes."""
    a = _check_box(box_a, "box_a")
    b = _check_box(box_b, "box_b")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


@maybe_njit
def _lapjv_kernel(cost):
    """Exact rectangular assignment by shortest augmenting paths.

    Expects n <= m. Returns row -> column indices (length n). Ties are
    resolved toward the lowest column index, rows processed in order, so the
    result is deterministic.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def solve_assignment(cost) -> list[tuple[int, int]]:
    """One-to-one partial assignment of size min(n, m) with minimal total cost.

    Returns (row, col) pairs sorted by row. An empty matrix yields an empty
    assignment.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DataError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise DataError("cost matrix contains non-finite entries")
    if n <= m:
        row_to_col = _lapjv_kernel(cost)
        pairs = [(int(r), int(c)) for r, c in enumerate(row_to_col)]
    else:
        col_to_row = _lapjv_kernel(cost.T.copy())
        pairs = sorted((int(r), int(c)) for c, r in enumerate(col_to_row))
    return pairs


def label_detections(
    detections,
    ground_truth,
    vocabulary: ClassVocabulary,
    iou_threshold: float = 0.5,
) -> list[LabeledDetection]:
    """Match per image with cost 1 - IoU and assign the four-way label."""
    if not (0.0 < iou_threshold < 1.0):
        raise DataError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    detections = list(detections)
    ground_truth = list(ground_truth)
    n_classes = len(vocabulary)
    for det in detections:
        if det.class_logits.shape[0] != n_classes:
            raise DataError(
                f"detection has {det.class_logits.shape[0]} logits but the "
                f"vocabulary defines {n_classes} classes"
            )

    gt_index = {id(gt): i for i, gt in enumerate(ground_truth)}
    gt_by_image = group_by_image(ground_truth)
    det_by_image = group_by_image(detections)

    labeled: dict[int, LabeledDetection] = {}
    det_pos = {id(det): i for i, det in enumerate(detections)}

    for image_id, dets in det_by_image.items():
        gts = gt_by_image.get(image_id, [])
        matches: dict[int, tuple[GroundTruthObject, float]] = {}
        if gts:
            det_boxes = np.stack([d.box for d in dets])
            gt_boxes = np.stack([g.box for g in gts])
            overlap = iou_matrix(det_boxes, gt_boxes)
            for det_i, gt_i in solve_assignment(1.0 - overlap):
                pair_iou = float(overlap[det_i, gt_i])
                if pair_iou >= iou_threshold:
                    matches[det_i] = (gts[gt_i], pair_iou)
        for det_i, det in enumerate(dets):
            if det_i in matches:
                gt, pair_iou = matches[det_i]
                if vocabulary.contains(gt.class_name):
                    predicted = vocabulary.id_classes[int(np.argmax(det.class_logits))]
                    label = MatchLabel.TP_ID if predicted == gt.class_name else MatchLabel.FP_ID
                else:
                    label = MatchLabel.OOD
                entry = LabeledDetection(
                    det, label, gt.class_name, gt_index[id(gt)], pair_iou
                )
            else:
                entry = LabeledDetection(det, MatchLabel.BG)
            labeled[det_pos[id(det)]] = entry

    return [labeled[i] for i in range(len(detections))]


# ---------------------------------------------------------------------------
# labeled-detections file (detection fields + match outcome per line)
# ---------------------------------------------------------------------------


def serialize_labeled(entry: LabeledDetection) -> str:
    base = json.loads(serialize_detection(entry.record))
    base["label"] = entry.label.value
    base["matched_class"] = entry.matched_class
    base["matched_gt_index"] = entry.matched_gt_index
    base["matched_iou"] = entry.iou_with_match
    return json.dumps(base)


def write_labeled(entries, stream):
    for entry in entries:
        stream.write(serialize_labeled(entry) + "\n")


def parse_labeled_line(line: str, line_no: int = 1) -> LabeledDetection:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON record ({exc.msg})", line_no) from exc
    if not isinstance(obj, dict):
        raise DataError("record must be a JSON object", line_no)
    extra = {}
    for key in ("label", "matched_class", "matched_gt_index", "matched_iou"):
        if key not in obj:
            raise DataError(f"missing required field {key!r}", line_no)
        extra[key] = obj.pop(key)
    record = parse_detection_line(json.dumps(obj), line_no)
    try:
        label = MatchLabel(extra["label"])
    except ValueError:
        raise DataError(f"unknown label {extra['label']!r}", line_no) from None
    matched_class = extra["matched_class"]
    matched_index = extra["matched_gt_index"]
    matched_iou = extra["matched_iou"]
    if (label is MatchLabel.BG) != (matched_index is None):
        raise DataError("BG label must coincide with an absent match", line_no)
    return LabeledDetection(
        record,
        label,
        matched_class,
        None if matched_index is None else int(matched_index),
        None if matched_iou is None else float(matched_iou),
    )


def iter_labeled(stream):
    n_classes = None
    for line_no, text in _iter_lines(stream):
        entry = parse_labeled_line(text, line_no)
        if n_classes is None:
            n_classes = entry.record.class_logits.shape[0]
        elif entry.record.class_logits.shape[0] != n_classes:
            raise DataError(
                f"class_logits length {entry.record.class_logits.shape[0]} does not "
                f"match first record ({n_classes})",
                line_no,
            )
        yield entry


def parse_labeled(stream) -> list[LabeledDetection]:
    return list(iter_labeled(stream))
