"""Scalar temperature scaling for detector logits and GMM logits.

The temperature minimizes mean softmax cross-entropy on TP-ID detections of
the calibration split (the only population whose correct class is known).
The search is a deterministic coarse grid over log T in [ln 0.01, ln 100]
refined by golden-section to 1e-4 in log T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DataError
from .matching import MatchLabel

LOG_T_MIN = float(np.log(0.01))
LOG_T_MAX = float(np.log(100.0))
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

TARGETS = ("detector_logits", "gmm_logits")


@dataclass
class Temperature:
    value: float
    target: str = "detector_logits"
    calibration_nll: float = float("nan")

    def __post_init__(self):
        if not self.value > 0.0:
            raise DataError(f"temperature must be positive, got {self.value}")
        if self.target not in TARGETS:
            raise DataError(f"unknown temperature target {self.target!r}")

    def to_payload(self) -> dict:
        return {
            "value": float(self.value),
            "target": self.target,
            "calibration_nll": float(self.calibration_nll),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "Temperature":
        return cls(float(payload["value"]), payload["target"], float(payload["calibration_nll"]))


def nll_at_temperature(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    """Mean cross-entropy of softmax(logits / T) against the labels."""
    z = logits / temperature
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(z.shape[0]), labels]))


def fit_temperature(logit_vectors, true_classes, target: str = "detector_logits") -> Temperature:
    logits = np.asarray(logit_vectors, dtype=np.float64)
    labels = np.asarray(true_classes, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise DataError("temperature fitting needs at least one labeled logit vector")
    if labels.shape != (logits.shape[0],):
        raise DataError("labels must align one-to-one with logit vectors")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError("label index outside the logit range")
    if not np.all(np.isfinite(logits)):
        raise DataError("non-finite logit value")

    def objective(log_t):
        return nll_at_temperature(logits, labels, float(np.exp(log_t)))

    # coarse bracket, then golden-section inside the winning cell
    grid = np.linspace(LOG_T_MIN, LOG_T_MAX, 257)
    values = np.array([objective(g) for g in grid])
    best = int(np.argmin(values))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = objective(c), objective(d)
    while (b - a) > 1e-4:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = objective(d)
    log_t = 0.5 * (a + b)
    t_star = float(np.exp(log_t))
    nll_star = objective(log_t)
    nll_one = nll_at_temperature(logits, labels, 1.0)
    if nll_one < nll_star:
        return Temperature(1.0, target, nll_one)
    return Temperature(t_star, target, nll_star)


def apply_temperature(logits, temperature) -> np.ndarray:
    """Elementwise division of logits by a positive scalar temperature."""
    t = temperature.value if isinstance(temperature, Temperature) else float(temperature)
    if not t > 0.0:
        raise DataError(f"temperature must be positive, got {t}")
    return np.asarray(logits, dtype=np.float64) / t


def calibration_samples(labeled, vocabulary):
    """(logits, class indices) of TP-ID detections; the matched ground-truth
    class is the supervision target."""
    rows, labels = [], []
    for entry in labeled:
        if entry.label is MatchLabel.TP_ID:
            idx = vocabulary.index_of(entry.matched_class)
            if idx is None:  # pragma: no cover - TP_ID implies an ID class
                raise DataError(f"TP-ID match with non-vocabulary class {entry.matched_class!r}")
            rows.append(entry.record.class_logits)
            labels.append(idx)
    if not rows:
        raise DataError("no TP-ID detections available for calibration")
    return np.stack(rows), np.asarray(labels, dtype=np.int64)
