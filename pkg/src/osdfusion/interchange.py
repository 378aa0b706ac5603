"""Data model and file formats for detector outputs, ground truth and models.

All record files are line-delimited JSON (one object per line) so that
parsing memory stays bounded by the largest single record. Numbers are
serialized with Python's shortest round-trip ``repr``, which makes
``parse(serialize(x)) == x`` exact on the decimal representation written.

Detection line schema (keys are exact, no extras):
    {"image_id": str,
     "box": [x_min, y_min, x_max, y_max],
     "class_logits": [C finite reals],
     "embedding": [D finite reals],
     "detector_score": finite real in [0, 1] | null | absent}

Ground-truth line schema:
    {"image_id": str, "box": [4 reals], "class_name": str}

Vocabulary file: one class name per line, order significant; a class name
absent from this list is out-of-distribution by definition.

Model files are a versioned JSON envelope:
    {"schema_version": 1, "kind": "density" | "fusion", ...payload}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

SCHEMA_VERSION = 1

_DET_REQUIRED = ("image_id", "box", "class_logits", "embedding")
_DET_ALLOWED = frozenset(_DET_REQUIRED + ("detector_score",))
_GT_REQUIRED = ("image_id", "box", "class_name")
_GT_ALLOWED = frozenset(_GT_REQUIRED)

SPLIT_TAGS = ("detector-train", "calibration", "ood-test")


@dataclass(eq=False)
class DetectionRecord:
    """One detector output: box, class-logit vector, embedding."""

    image_id: str
    box: np.ndarray          # (4,) x_min, y_min, x_max, y_max, absolute pixels
    class_logits: np.ndarray  # (C,) pre-activation
    embedding: np.ndarray     # (D,)
    detector_score: float | None = None

    def __eq__(self, other):
        if not isinstance(other, DetectionRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and np.array_equal(self.box, other.box)
            and np.array_equal(self.class_logits, other.class_logits)
            and np.array_equal(self.embedding, other.embedding)
            and self.detector_score == other.detector_score
        )


@dataclass(eq=False)
class GroundTruthObject:
    image_id: str
    box: np.ndarray
    class_name: str

    def __eq__(self, other):
        if not isinstance(other, GroundTruthObject):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and np.array_equal(self.box, other.box)
            and self.class_name == other.class_name
        )


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered in-distribution class list; logit index c maps to id_classes[c].

    Whether a class is out-of-distribution is always derived from membership
    here, never stored as a flag on records.
    """

    id_classes: tuple[str, ...]

    def __post_init__(self):
        if len(self.id_classes) == 0:
            raise DataError("vocabulary is empty")
        seen = set()
        for name in self.id_classes:
            if not name:
                raise DataError("vocabulary contains an empty class name")
            if name in seen:
                raise DataError(f"duplicate class name in vocabulary: {name!r}")
            seen.add(name)

    def __len__(self):
        return len(self.id_classes)

    def index_of(self, class_name: str) -> int | None:
        """Index of an ID class, or None when the name is OOD."""
        try:
            return self.id_classes.index(class_name)
        except ValueError:
            return None

    def contains(self, class_name: str) -> bool:
        return class_name in self.id_classes


@dataclass
class DatasetBundle:
    """Detections plus ground truth for one split of one dataset."""

    detections: list[DetectionRecord]
    ground_truth: list[GroundTruthObject]
    vocabulary: ClassVocabulary
    split_tag: str = "ood-test"

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise DataError(f"unknown split_tag {self.split_tag!r}, expected one of {SPLIT_TAGS}")

    def image_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for det in self.detections:
            seen.setdefault(det.image_id, None)
        for gt in self.ground_truth:
            seen.setdefault(gt.image_id, None)
        return list(seen)


def group_by_image(items):
    """Group records by image_id, preserving first-seen image order."""
    groups: dict[str, list] = {}
    for item in items:
        groups.setdefault(item.image_id, []).append(item)
    return groups


# ---------------------------------------------------------------------------
# line-level validation helpers
# ---------------------------------------------------------------------------


def _require_finite_number(value, name, line_no):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DataError(f"field {name!r} must be a number, got {type(value).__name__}", line_no)
    if not math.isfinite(value):
        raise DataError(f"field {name!r} contains a non-finite value", line_no)
    return float(value)


def _parse_vector(value, name, line_no):
    if not isinstance(value, list) or len(value) == 0:
        raise DataError(f"field {name!r} must be a non-empty array of numbers", line_no)
    out = np.empty(len(value), dtype=np.float64)
    for i, entry in enumerate(value):
        out[i] = _require_finite_number(entry, f"{name}[{i}]", line_no)
    return out


def _parse_box(value, line_no):
    box = _parse_vector(value, "box", line_no)
    if box.shape != (4,):
        raise DataError(f"field 'box' must have exactly 4 entries, got {box.shape[0]}", line_no)
    if not (box[0] < box[2]) or not (box[1] < box[3]):
        raise DataError(
            "degenerate box: requires x_min < x_max and y_min < y_max "
            f"(got {box.tolist()})",
            line_no,
        )
    return box


def _load_object(line, line_no):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON record ({exc.msg})", line_no) from exc
    if not isinstance(obj, dict):
        raise DataError("record must be a JSON object", line_no)
    return obj


def _check_keys(obj, required, allowed, line_no):
    for key in required:
        if key not in obj:
            raise DataError(f"missing required field {key!r}", line_no)
    for key in obj:
        if key not in allowed:
            raise DataError(f"unknown field {key!r}", line_no)


def parse_detection_line(line: str, line_no: int = 1) -> DetectionRecord:
    """Parse a single detection line; raises DataError with the line number."""
    obj = _load_object(line, line_no)
    _check_keys(obj, _DET_REQUIRED, _DET_ALLOWED, line_no)
    if not isinstance(obj["image_id"], str) or not obj["image_id"]:
        raise DataError("field 'image_id' must be a non-empty string", line_no)
    box = _parse_box(obj["box"], line_no)
    logits = _parse_vector(obj["class_logits"], "class_logits", line_no)
    embedding = _parse_vector(obj["embedding"], "embedding", line_no)
    score = obj.get("detector_score")
    if score is not None:
        score = _require_finite_number(score, "detector_score", line_no)
        if not 0.0 <= score <= 1.0:
            raise DataError(f"field 'detector_score' must lie in [0, 1], got {score}", line_no)
    return DetectionRecord(obj["image_id"], box, logits, embedding, score)


def parse_ground_truth_line(line: str, line_no: int = 1) -> GroundTruthObject:
    obj = _load_object(line, line_no)
    _check_keys(obj, _GT_REQUIRED, _GT_ALLOWED, line_no)
    if not isinstance(obj["image_id"], str) or not obj["image_id"]:
        raise DataError("field 'image_id' must be a non-empty string", line_no)
    if not isinstance(obj["class_name"], str) or not obj["class_name"]:
        raise DataError("field 'class_name' must be a non-empty string", line_no)
    box = _parse_box(obj["box"], line_no)
    return GroundTruthObject(obj["image_id"], box, obj["class_name"])


def _iter_lines(stream):
    """Yield (line_no, text) for non-empty lines of a text or byte stream."""
    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        text = raw.strip()
        if text:
            yield line_no, text


def iter_detections(stream):
    """Stream DetectionRecords from line-delimited text; memory stays bounded
    by one record. Enforces constant logit/embedding dimensions."""
    n_classes = None
    n_dims = None
    for line_no, text in _iter_lines(stream):
        record = parse_detection_line(text, line_no)
        if n_classes is None:
            n_classes = record.class_logits.shape[0]
            n_dims = record.embedding.shape[0]
        else:
            if record.class_logits.shape[0] != n_classes:
                raise DataError(
                    f"class_logits length {record.class_logits.shape[0]} does not match "
                    f"first record ({n_classes})",
                    line_no,
                )
            if record.embedding.shape[0] != n_dims:
                raise DataError(
                    f"embedding length {record.embedding.shape[0]} does not match "
                    f"first record ({n_dims})",
                    line_no,
                )
        yield record


def parse_detections(stream) -> list[DetectionRecord]:
    return list(iter_detections(stream))


def iter_ground_truth(stream):
    for line_no, text in _iter_lines(stream):
        yield parse_ground_truth_line(text, line_no)


def parse_ground_truth(stream) -> list[GroundTruthObject]:
    return list(iter_ground_truth(stream))


def parse_vocabulary(stream) -> ClassVocabulary:
    names = []
    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        name = raw.strip()
        if not name:
            raise DataError("empty class name in vocabulary", line_no)
        names.append(name)
    return ClassVocabulary(tuple(names))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _floats(array) -> list[float]:
    return [float(x) for x in np.asarray(array).ravel()]


def serialize_detection(record: DetectionRecord) -> str:
    obj = {
        "image_id": record.image_id,
        "box": _floats(record.box),
        "class_logits": _floats(record.class_logits),
        "embedding": _floats(record.embedding),
    }
    if record.detector_score is not None:
        obj["detector_score"] = float(record.detector_score)
    return json.dumps(obj)


def serialize_ground_truth(gt: GroundTruthObject) -> str:
    return json.dumps(
        {"image_id": gt.image_id, "box": _floats(gt.box), "class_name": gt.class_name}
    )


def write_detections(records, stream):
    for record in records:
        stream.write(serialize_detection(record) + "\n")


def write_ground_truth(objects, stream):
    for gt in objects:
        stream.write(serialize_ground_truth(gt) + "\n")


def write_vocabulary(vocabulary: ClassVocabulary, stream):
    for name in vocabulary.id_classes:
        stream.write(name + "\n")


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def write_model(model, stream):
    """Write a ClassDensityModel or FusionModel as versioned JSON text."""
    from .density import ClassDensityModel
    from .fusion import FusionModel

    if isinstance(model, ClassDensityModel):
        kind = "density"
    elif isinstance(model, FusionModel):
        kind = "fusion"
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    envelope = {"schema_version": SCHEMA_VERSION, "kind": kind}
    envelope.update(model.to_payload())
    stream.write(json.dumps(envelope, indent=1) + "\n")


def read_model(stream):
    """Read back a model written by write_model; round-trips exactly."""
    from .density import ClassDensityModel
    from .fusion import FusionModel

    text = stream.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        envelope = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"truncated or malformed model stream ({exc.msg})") from exc
    if not isinstance(envelope, dict):
        raise DataError("model stream must contain a JSON object")
    version = envelope.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DataError(f"unsupported model schema version {version!r}")
    kind = envelope.get("kind")
    if kind == "density":
        return ClassDensityModel.from_payload(envelope)
    if kind == "fusion":
        return FusionModel.from_payload(envelope)
    raise DataError(f"unknown model kind {kind!r}")


def read_model_path(path):
    with open(path, "r", encoding="utf-8") as fh:
        return read_model(fh)


def write_model_path(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        write_model(model, fh)
