"""Per-detection fusion features and score pruning.

Feature order is fixed and serialized with the model:
    [score, entropy, density, gmm_entropy, gmm_density, logits..., gmm_logits...]
with disabled entries skipped. Detector-side features are computed on
temperature-calibrated class logits, GMM-side features on calibrated GMM
logits. Pruning alone uses raw (uncalibrated) logits: a detection whose
largest sigmoid confidence is strictly below the threshold is discarded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import logsumexp

from .calibration import Temperature, apply_temperature
from .density import DensityEvaluator
from .errors import DataError
from .interchange import DetectionRecord, _iter_lines
from .matching import COLLAPSED_ORDER

FEATURE_ORDER = ("score", "entropy", "density", "gmm_entropy", "gmm_density",
                 "logits", "gmm_logits")

DEFAULT_PRUNE_THRESHOLD = 0.2


def sigmoid(x) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def score(class_logits) -> np.ndarray:
    """Max over classes of the logistic confidence."""
    return np.max(sigmoid(class_logits), axis=-1)


def entropy(class_logits) -> np.ndarray:
    """Shannon entropy (nats) of the softmax distribution, max-shifted."""
    z = np.asarray(class_logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    lse = logsumexp(z, axis=-1, keepdims=True)
    log_p = z - lse
    return -np.sum(np.exp(log_p) * log_p, axis=-1)


def energy_density(class_logits) -> np.ndarray:
    """log sum exp of the class logits (logit-space density surrogate)."""
    return logsumexp(np.asarray(class_logits, dtype=np.float64), axis=-1)


def gmm_entropy(gmm_logits) -> np.ndarray:
    return entropy(gmm_logits)


def gmm_density(gmm_logits, use_max: bool = False) -> np.ndarray:
    """Total embedding log-density under the class mixtures; ``use_max``
    switches to the best single class instead of the log-sum-exp."""
    gl = np.asarray(gmm_logits, dtype=np.float64)
    if use_max:
        return np.max(gl, axis=-1)
    return logsumexp(gl, axis=-1)


@dataclass(frozen=True)
class FeatureConfig:
    """Switches mirroring the input-feature ablation columns."""

    score: bool = True
    entropy: bool = True
    density: bool = True
    gmm_entropy: bool = True
    gmm_density: bool = True
    logits: bool = True
    gmm_logits: bool = True
    gmm_density_use_max: bool = False

    def __post_init__(self):
        if not any(getattr(self, name) for name in FEATURE_ORDER):
            raise DataError("feature configuration enables no features")

    def enabled(self) -> tuple[str, ...]:
        return tuple(name for name in FEATURE_ORDER if getattr(self, name))

    @property
    def needs_density(self) -> bool:
        return self.gmm_entropy or self.gmm_density or self.gmm_logits

    def feature_length(self, n_classes: int) -> int:
        length = 0
        for name in self.enabled():
            length += n_classes if name in ("logits", "gmm_logits") else 1
        return length

    def feature_names(self, n_classes: int) -> list[str]:
        names = []
        for name in self.enabled():
            if name in ("logits", "gmm_logits"):
                names.extend(f"{name}[{i}]" for i in range(n_classes))
            else:
                names.append(name)
        return names

    def to_payload(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_payload(cls, payload: dict) -> "FeatureConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise DataError(f"unknown feature switches: {sorted(unknown)}")
        return cls(**{k: bool(v) for k, v in payload.items()})

    @classmethod
    def single(cls, name: str) -> "FeatureConfig":
        if name not in FEATURE_ORDER:
            raise DataError(f"unknown feature {name!r}")
        return cls(**{field: field == name for field in FEATURE_ORDER})


def prune_mask(raw_logits: np.ndarray, threshold: float = DEFAULT_PRUNE_THRESHOLD) -> np.ndarray:
    """True where the detection survives: max raw sigmoid >= threshold
    (strict-less discard)."""
    return score(np.atleast_2d(np.asarray(raw_logits, dtype=np.float64))) >= threshold


def prune(detections, threshold: float = DEFAULT_PRUNE_THRESHOLD) -> list:
    """Retain detections whose raw confidence is not below the threshold.

    Accepts DetectionRecords or LabeledDetections; order preserved.
    """
    retained = []
    for det in detections:
        record = det.record if hasattr(det, "record") else det
        if float(score(record.class_logits)) >= threshold:
            retained.append(det)
    return retained


def _temperature_value(temperature) -> float:
    if temperature is None:
        return 1.0
    if isinstance(temperature, Temperature):
        return float(temperature.value)
    return float(temperature)


def assemble_features_batch(
    records,
    config: FeatureConfig,
    density_model=None,
    detector_temperature=None,
    gmm_temperature=None,
) -> np.ndarray:
    """(N, F) feature matrix for a batch of DetectionRecords."""
    records = list(records)
    if not records:
        n = 0
        logits = np.zeros((0, 1))
    else:
        logits = np.stack([r.class_logits for r in records])
        n = logits.shape[0]
    n_classes = logits.shape[1]

    cal_logits = apply_temperature(logits, _temperature_value(detector_temperature))
    gmm_logits = None
    if config.needs_density:
        if density_model is None:
            raise DataError(
                "feature configuration requires GMM features but no density model was given"
            )
        evaluator = (
            density_model if isinstance(density_model, DensityEvaluator)
            else DensityEvaluator(density_model)
        )
        if n:
            embeddings = np.stack([r.embedding for r in records])
            raw_gmm = evaluator.log_likelihoods(embeddings)
        else:
            raw_gmm = np.zeros((0, evaluator.model.n_classes))
        gmm_logits = apply_temperature(raw_gmm, _temperature_value(gmm_temperature))

    columns = []
    for name in config.enabled():
        if name == "score":
            columns.append(score(cal_logits)[:, None])
        elif name == "entropy":
            columns.append(entropy(cal_logits)[:, None])
        elif name == "density":
            columns.append(energy_density(cal_logits)[:, None])
        elif name == "gmm_entropy":
            columns.append(gmm_entropy(gmm_logits)[:, None])
        elif name == "gmm_density":
            columns.append(gmm_density(gmm_logits, config.gmm_density_use_max)[:, None])
        elif name == "logits":
            columns.append(cal_logits)
        elif name == "gmm_logits":
            columns.append(gmm_logits)
    out = np.concatenate(columns, axis=1) if n else np.zeros((0, config.feature_length(n_classes)))
    if not np.all(np.isfinite(out)):
        raise DataError("non-finite feature value")
    return out


def assemble_features(
    record: DetectionRecord,
    config: FeatureConfig,
    density_model=None,
    detector_temperature=None,
    gmm_temperature=None,
) -> np.ndarray:
    return assemble_features_batch(
        [record], config, density_model, detector_temperature, gmm_temperature
    )[0]


# ---------------------------------------------------------------------------
# feature file (vector + collapsed label per line)
# ---------------------------------------------------------------------------


@dataclass
class FeatureRow:
    """One assembled feature vector; ``index`` points back to the line of the
    labeled-detections file it came from. ``source`` is set once rows from
    several splits are mixed."""

    index: int
    values: np.ndarray
    label: str  # collapsed: ID | OOD | BG
    source: str | None = None

    def __post_init__(self):
        if self.label not in COLLAPSED_ORDER:
            raise DataError(f"unknown collapsed label {self.label!r}")


def serialize_feature_row(row: FeatureRow) -> str:
    obj = {"index": row.index, "label": row.label, "features": [float(v) for v in row.values]}
    if row.source is not None:
        obj["source"] = row.source
    return json.dumps(obj)


def write_feature_rows(rows, stream):
    for row in rows:
        stream.write(serialize_feature_row(row) + "\n")


def parse_feature_rows(stream) -> list[FeatureRow]:
    rows = []
    width = None
    for line_no, text in _iter_lines(stream):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed JSON record ({exc.msg})", line_no) from exc
        try:
            row = FeatureRow(
                int(obj["index"]),
                np.asarray(obj["features"], dtype=np.float64),
                str(obj["label"]),
                obj.get("source"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed feature row: {exc}", line_no) from exc
        if width is None:
            width = row.values.shape[0]
        elif row.values.shape[0] != width:
            raise DataError(
                f"feature length {row.values.shape[0]} does not match first row ({width})",
                line_no,
            )
        if not np.all(np.isfinite(row.values)):
            raise DataError("non-finite feature value", line_no)
        rows.append(row)
    return rows


def feature_matrix(rows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack rows into (indices, X, label indices in collapsed order)."""
    if not rows:
        raise DataError("empty feature set")
    idx = np.asarray([r.index for r in rows], dtype=np.int64)
    x = np.stack([r.values for r in rows])
    y = np.asarray([COLLAPSED_ORDER.index(r.label) for r in rows], dtype=np.int64)
    return idx, x, y
