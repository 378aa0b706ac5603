"""K-way fusion MLP over per-detection features, threshold tuning and the
final open-set decision rule.

Class order for targets and posteriors is fixed: ID=0, OOD=1, BG=2 (the
first K entries for K=2). Training is deterministic mini-batch SGD with
momentum; inputs are standardized by statistics stored with the weights, and
class imbalance is countered with inverse-frequency loss weights.

The decision rule declares OOD when posterior_OOD >= tau, otherwise picks
the more likely of ID and BG (always ID for K=2). tau is tuned by a full
scan over the distinct validation posteriors, maximizing ID recall subject
to the OOD-escape bound.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field

from .density import DensityEvaluator
from .errors import DataError, InfeasibleError
from .calibration import Temperature
from .features import (
    DEFAULT_PRUNE_THRESHOLD,
    FeatureConfig,
    assemble_features_batch,
    prune_mask,
)
from .matching import COLLAPSED_ORDER

SUPPRESSED = "SUPPRESSED"


@dataclass
class MlpParameters:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]        # per layer (fan_in, fan_out)
    biases: list[np.ndarray]         # per layer (fan_out,)
    feature_mean: np.ndarray
    feature_std: np.ndarray          # floored at 1e-8

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    def validate(self):
        if self.n_classes not in (2, 3):
            raise DataError(f"output size must be 2 or 3, got {self.n_classes}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise DataError("mlp: layer count mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]):
                raise DataError(f"mlp: weight shape mismatch at layer {i}")
            if b.shape != (self.layer_sizes[i + 1],):
                raise DataError(f"mlp: bias shape mismatch at layer {i}")
        if self.feature_mean.shape != (self.n_features,):
            raise DataError("mlp: feature_mean shape mismatch")
        if self.feature_std.shape != (self.n_features,) or np.any(self.feature_std <= 0):
            raise DataError("mlp: feature_std must be positive")

    def to_payload(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "MlpParameters":
        try:
            params = cls(
                layer_sizes=tuple(int(s) for s in payload["layer_sizes"]),
                weights=[np.asarray(w, dtype=np.float64) for w in payload["weights"]],
                biases=[np.asarray(b, dtype=np.float64) for b in payload["biases"]],
                feature_mean=np.asarray(payload["feature_mean"], dtype=np.float64),
                feature_std=np.asarray(payload["feature_std"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed mlp payload: {exc}") from exc
        params.validate()
        return params


@dataclass
class TrainingConfig:
    hidden: tuple[int, ...] = (32, 32)
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 256
    epochs: int = 200
    patience: int = 20


def standardize(params: MlpParameters, x: np.ndarray) -> np.ndarray:
    return (x - params.feature_mean) / params.feature_std


def forward(params: MlpParameters, features: np.ndarray) -> np.ndarray:
    """Logits of the (already standardized) feature batch."""
    h = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if h.shape[1] != params.n_features:
        raise DataError(f"expected {params.n_features} features, got {h.shape[1]}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def posterior(params: MlpParameters, features: np.ndarray) -> np.ndarray:
    return softmax(forward(params, features))


def loss_and_grads(params: MlpParameters, x: np.ndarray, y: np.ndarray, class_weights: np.ndarray):
    """Weighted softmax cross-entropy and its gradients on one batch.

    x must already be standardized. Returns (loss, [(dW, db), ...]).
    """
    n = x.shape[0]
    activations = [x]
    h = x
    last = len(params.weights) - 1
    pre = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i != last else z
        activations.append(h)
    logits = activations[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    sw = class_weights[y]
    total = sw.sum()
    loss = float(-(sw * log_probs[np.arange(n), y]).sum() / total)

    probs = np.exp(log_probs)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta *= (sw / total)[:, None]

    grads = []
    for i in range(last, -1, -1):
        dw = activations[i].T @ delta
        db = delta.sum(axis=0)
        grads.append((dw, db))
        if i > 0:
            delta = (delta @ params.weights[i].T) * (pre[i - 1] > 0.0)
    grads.reverse()
    return loss, grads


def _init_parameters(n_features, n_classes, config, rng) -> MlpParameters:
    sizes = (n_features, *config.hidden, n_classes)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParameters(
        sizes, weights, biases, np.zeros(n_features), np.ones(n_features)
    )


def class_balance_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    if np.any(counts == 0):
        missing = [COLLAPSED_ORDER[i] for i in range(n_classes) if counts[i] == 0]
        raise DataError(f"class(es) absent from training data: {missing}")
    return y.shape[0] / (n_classes * counts)


def train_mlp(
    features,
    labels,
    n_classes: int,
    config: TrainingConfig | None = None,
    seed: int = 0,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Train the fusion MLP; returns (MlpParameters, metadata dict).

    Deterministic given the seed. When a validation set is supplied, early
    stopping keeps the parameters with the best validation loss (patience in
    epochs); otherwise all epochs run.
    """
    config = config or TrainingConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("training features must be a non-empty (N, F) matrix")
    if y.shape != (x.shape[0],):
        raise DataError("labels must align one-to-one with feature rows")
    if n_classes not in (2, 3):
        raise DataError(f"n_classes must be 2 or 3, got {n_classes}")
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError("label index outside the class range")

    rng = np.random.default_rng(seed)
    params = _init_parameters(x.shape[1], n_classes, config, rng)
    params.feature_mean = x.mean(axis=0)
    params.feature_std = np.maximum(x.std(axis=0), 1e-8)
    xn = standardize(params, x)
    weights = class_balance_weights(y, n_classes)

    val = None
    if validation is not None:
        xv = standardize(params, np.asarray(validation[0], dtype=np.float64))
        yv = np.asarray(validation[1], dtype=np.int64)
        val = (xv, yv)

    velocity = [
        (np.zeros_like(w), np.zeros_like(b))
        for w, b in zip(params.weights, params.biases)
    ]
    n = xn.shape[0]
    train_curve, val_curve = [], []
    best_val = np.inf
    best_state = None
    since_best = 0
    epochs_run = 0

    for epoch in range(config.epochs):
        epochs_run = epoch + 1
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(params, xn[batch], y[batch], weights)
            epoch_loss += loss * batch.shape[0]
            for i, (dw, db) in enumerate(grads):
                vw, vb = velocity[i]
                vw *= config.momentum
                vw -= config.learning_rate * dw
                vb *= config.momentum
                vb -= config.learning_rate * db
                params.weights[i] += vw
                params.biases[i] += vb
        train_curve.append(epoch_loss / n)

        if val is not None:
            vloss, _ = loss_and_grads(
                params, val[0], val[1], class_balance_weights_safe(val[1], n_classes)
            )
            val_curve.append(vloss)
            if vloss < best_val - 1e-12:
                best_val = vloss
                best_state = (
                    [w.copy() for w in params.weights],
                    [b.copy() for b in params.biases],
                )
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break

    if best_state is not None:
        params.weights, params.biases = best_state

    meta = {
        "epochs_run": epochs_run,
        "train_loss": train_curve,
        "val_loss": val_curve if val is not None else None,
        "seed": seed,
    }
    return params, meta


def class_balance_weights_safe(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Like class_balance_weights but tolerates absent classes (validation)."""
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    counts[counts == 0] = 1.0
    return y.shape[0] / (n_classes * counts)


# ---------------------------------------------------------------------------
# decision thresholds
# ---------------------------------------------------------------------------


@dataclass
class DecisionThresholds:
    rule_kind: str            # "two_class" | "three_class"
    tau_ood: float
    id_tpr: float             # objective achieved on the tuning split
    ood_escape: float         # constraint achieved on the tuning split
    escape_bound: float

    def to_payload(self) -> dict:
        return {
            "rule_kind": self.rule_kind,
            "tau_ood": float(self.tau_ood),
            "id_tpr": float(self.id_tpr),
            "ood_escape": float(self.ood_escape),
            "escape_bound": float(self.escape_bound),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "DecisionThresholds":
        return cls(
            payload["rule_kind"],
            float(payload["tau_ood"]),
            float(payload["id_tpr"]),
            float(payload["ood_escape"]),
            float(payload["escape_bound"]),
        )


def decide(posteriors: np.ndarray, tau_ood: float) -> np.ndarray:
    """Decision indices in collapsed order given K-class posteriors."""
    p = np.atleast_2d(posteriors)
    k = p.shape[1]
    out = np.zeros(p.shape[0], dtype=np.int64)
    is_ood = p[:, 1] >= tau_ood
    out[is_ood] = 1
    if k == 3:
        bg = (~is_ood) & (p[:, 2] > p[:, 0])
        out[bg] = 2
    return out


def tune_thresholds(
    validation_logits, validation_labels, escape_bound: float = 0.20
) -> DecisionThresholds:
    """Scan every distinct posterior_OOD value; keep the threshold with the
    highest ID recall whose OOD-escape rate stays within the bound."""
    logits = np.atleast_2d(np.asarray(validation_logits, dtype=np.float64))
    y = np.asarray(validation_labels, dtype=np.int64)
    if y.shape != (logits.shape[0],):
        raise DataError("validation labels must align with logits")
    k = logits.shape[1]
    if k not in (2, 3):
        raise DataError(f"expected 2 or 3 classes, got {k}")
    if not 0.0 <= escape_bound <= 1.0:
        raise InfeasibleError(f"escape bound must lie in [0, 1], got {escape_bound}")
    ood_mask = y == 1
    if not np.any(ood_mask):
        raise DataError("validation split contains no OOD samples")

    p = softmax(logits)
    p_ood = p[:, 1]
    id_mask = y == 0
    # ID samples that the argmax(ID, BG) leg would route to ID
    if k == 3:
        id_eligible = p[id_mask, 0] >= p[id_mask, 2]
    else:
        id_eligible = np.ones(int(id_mask.sum()), dtype=bool)
    p_ood_id = p_ood[id_mask]
    p_ood_ood = np.sort(p_ood[ood_mask])
    n_ood = p_ood_ood.shape[0]
    n_id = p_ood_id.shape[0]

    best = None  # (tpr, tau, escape)
    for tau in np.unique(p_ood):
        escape = np.searchsorted(p_ood_ood, tau, side="left") / n_ood
        if escape > escape_bound:
            continue
        tpr = float(np.sum((p_ood_id < tau) & id_eligible)) / n_id if n_id else 0.0
        if best is None or tpr > best[0] or (tpr == best[0] and tau > best[1]):
            best = (tpr, float(tau), float(escape))
    if best is None:
        # tau = min posterior escapes nothing, so this cannot trigger on
        # sane inputs; it signals corrupted labels.
        raise InfeasibleError(
            f"no threshold satisfies OOD-escape <= {escape_bound}; labels look corrupted"
        )
    tpr, tau, escape = best
    return DecisionThresholds(
        rule_kind="three_class" if k == 3 else "two_class",
        tau_ood=tau,
        id_tpr=tpr,
        ood_escape=escape,
        escape_bound=escape_bound,
    )


# ---------------------------------------------------------------------------
# fusion model and classification
# ---------------------------------------------------------------------------


@dataclass
class FusionModel:
    """Everything needed to classify a raw detection, accumulated stage by
    stage; pipeline stages fill the optional parts in order."""

    feature_config: FeatureConfig | None = None
    detector_temperature: Temperature | None = None
    gmm_temperature: Temperature | None = None
    mlp: MlpParameters | None = None
    thresholds: DecisionThresholds | None = None
    prune_threshold: float = DEFAULT_PRUNE_THRESHOLD
    seed: int | None = None
    training_meta: dict = field(default_factory=dict)

    def require_complete(self):
        missing = [
            name
            for name, value in (
                ("feature_config", self.feature_config),
                ("mlp", self.mlp),
                ("thresholds", self.thresholds),
            )
            if value is None
        ]
        if missing:
            raise DataError(f"fusion model is incomplete, missing: {', '.join(missing)}")

    def to_payload(self) -> dict:
        return {
            "feature_config": None if self.feature_config is None else self.feature_config.to_payload(),
            "detector_temperature": None
            if self.detector_temperature is None
            else self.detector_temperature.to_payload(),
            "gmm_temperature": None
            if self.gmm_temperature is None
            else self.gmm_temperature.to_payload(),
            "mlp": None if self.mlp is None else self.mlp.to_payload(),
            "thresholds": None if self.thresholds is None else self.thresholds.to_payload(),
            "prune_threshold": float(self.prune_threshold),
            "seed": self.seed,
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "FusionModel":
        def opt(key, loader):
            value = payload.get(key)
            return None if value is None else loader(value)

        try:
            return cls(
                feature_config=opt("feature_config", FeatureConfig.from_payload),
                detector_temperature=opt("detector_temperature", Temperature.from_payload),
                gmm_temperature=opt("gmm_temperature", Temperature.from_payload),
                mlp=opt("mlp", MlpParameters.from_payload),
                thresholds=opt("thresholds", DecisionThresholds.from_payload),
                prune_threshold=float(payload.get("prune_threshold", DEFAULT_PRUNE_THRESHOLD)),
                seed=payload.get("seed"),
                training_meta=payload.get("training_meta") or {},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed fusion model payload: {exc}") from exc


def classify_records(
    model: FusionModel,
    records,
    density_model=None,
    return_posteriors: bool = False,
):
    """Decisions for raw detection records: prune, featurize, standardize,
    forward, threshold. Pruned records come back as SUPPRESSED."""
    model.require_complete()
    records = list(records)
    decisions = [SUPPRESSED] * len(records)
    posteriors = np.full((len(records), model.mlp.n_classes), np.nan)
    if records:
        raw_logits = np.stack([r.class_logits for r in records])
        retained = np.flatnonzero(prune_mask(raw_logits, model.prune_threshold))
    else:
        retained = np.zeros(0, dtype=np.int64)
    if retained.size:
        evaluator = None
        if model.feature_config.needs_density:
            if density_model is None:
                raise DataError("fusion model uses GMM features but no density model was given")
            evaluator = (
                density_model
                if isinstance(density_model, DensityEvaluator)
                else DensityEvaluator(density_model)
            )
        x = assemble_features_batch(
            [records[i] for i in retained],
            model.feature_config,
            evaluator,
            model.detector_temperature,
            model.gmm_temperature,
        )
        p = posterior(model.mlp, standardize(model.mlp, x))
        idx = decide(p, model.thresholds.tau_ood)
        for row, i in enumerate(retained):
            decisions[i] = COLLAPSED_ORDER[idx[row]]
            posteriors[i] = p[row]
    if return_posteriors:
        return decisions, posteriors
    return decisions
