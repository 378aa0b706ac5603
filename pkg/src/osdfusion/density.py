"""Per-class Gaussian mixture density models over detection embeddings.

Fitting uses only TP-ID detections: a matched detection with the wrong
argmax class would pollute the cluster of its predicted class. The default
is a single full-covariance Gaussian per class (closed-form moments,
unbiased covariance); more components are fitted with EM.

``gmm_log_likelihoods`` maps one embedding to a length-C vector whose entry
c is  log(prior_c) + log sum_j w_cj N(x; mu_cj, Sigma_cj), evaluated through
Cholesky factors with max-shifted log-sum-exp so no finite input overflows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky as _cholesky, solve_triangular
from scipy.special import logsumexp

from ._accel import NUMBA_ENABLED, maybe_njit
from .errors import DataError
from .interchange import ClassVocabulary
from .matching import MatchLabel

_LOG_2PI = float(np.log(2.0 * np.pi))

DEFAULT_EPSILON = 1e-6


def regularize_covariance(cov: np.ndarray, epsilon: float, magnitude: float = 1.0) -> np.ndarray:
    """Symmetrize and add epsilon * (trace/D) * I.

    Variance at or below floating-point noise relative to the data magnitude
    (mean squared value) counts as exactly degenerate and yields epsilon * I,
    so identical points and single samples never break the Cholesky."""
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    scale = float(np.trace(cov)) / d
    if scale <= 1e-14 * max(1.0, magnitude):
        return epsilon * np.eye(d)
    return cov + (epsilon * scale) * np.eye(d)


def fit_class_gaussian(embeddings, epsilon: float = DEFAULT_EPSILON):
    """Sample mean and regularized unbiased covariance of one class.

    A single sample yields (v, epsilon * I).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    n, d = x.shape
    if n == 0:
        raise DataError("cannot fit a Gaussian on zero embeddings")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite embedding value")
    mu = x.mean(axis=0)
    if n >= 2:
        diff = x - mu
        cov = diff.T @ diff / (n - 1)
    else:
        cov = np.zeros((d, d))
    return mu, regularize_covariance(cov, epsilon, float(np.mean(x * x)))


@dataclass
class GmmFitResult:
    weights: np.ndarray        # (k,)
    means: np.ndarray          # (k, d)
    covariances: np.ndarray    # (k, d, d)
    log_likelihoods: list[float]
    n_iter: int
    converged: bool


def _component_log_densities(x, means, covariances):
    """(n, k) log N(x_i; mu_j, Sigma_j) via Cholesky solves."""
    n = x.shape[0]
    k, d = means.shape
    out = np.empty((n, k))
    for j in range(k):
        chol = _cholesky(covariances[j], lower=True)
        diff = (x - means[j]).T
        sol = solve_triangular(chol, diff, lower=True)
        quad = np.sum(sol * sol, axis=0)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, j] = -0.5 * (d * _LOG_2PI + log_det + quad)
    return out


def _kmeans_init(x, k, rng):
    """k-means++ seeding followed by one hard assignment pass."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    dist2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = dist2.sum()
        if total > 0.0:
            probs = dist2 / total
            idx = int(rng.choice(n, p=probs))
        else:
            idx = j % n
        centers[j] = x[idx]
        dist2 = np.minimum(dist2, np.sum((x - centers[j]) ** 2, axis=1))
    d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def fit_gmm_em(
    embeddings,
    k: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-8,
    epsilon: float = DEFAULT_EPSILON,
) -> GmmFitResult:
    """Fit a k-component full-covariance mixture by EM.

    Deterministic given the seed. The training log-likelihood trace is
    returned; EM guarantees it is non-decreasing up to the covariance
    regularization applied each M-step.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if k < 1:
        raise DataError(f"component count must be >= 1, got {k}")
    if n < k:
        raise DataError(f"need at least k={k} embeddings, got {n}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite embedding value")

    rng = np.random.default_rng(seed)
    magnitude = float(np.mean(x * x))
    assign = _kmeans_init(x, k, rng)
    weights = np.empty(k)
    means = np.empty((k, d))
    covariances = np.empty((k, d, d))
    for j in range(k):
        members = x[assign == j]
        if members.shape[0] == 0:
            # empty seed cluster: fall back to the global moments
            members = x
        weights[j] = members.shape[0]
        means[j] = members.mean(axis=0)
        diff = members - means[j]
        covariances[j] = regularize_covariance(diff.T @ diff / members.shape[0], epsilon, magnitude)
    weights /= weights.sum()

    trace: list[float] = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # E-step
        log_joint = _component_log_densities(x, means, covariances) + np.log(weights)
        log_norm = logsumexp(log_joint, axis=1)
        ll = float(log_norm.sum())
        resp = np.exp(log_joint - log_norm[:, None])
        if trace and abs(ll - trace[-1]) <= tol * max(1.0, abs(ll)):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        # M-step (responsibility-weighted moments)
        mass = resp.sum(axis=0)
        for j in range(k):
            if mass[j] < 1e-10:
                # rebooted component: park it on the worst-explained point
                worst = int(np.argmin(log_norm))
                means[j] = x[worst]
                covariances[j] = regularize_covariance(np.zeros((d, d)), epsilon, magnitude)
                mass[j] = 1.0
                continue
            means[j] = resp[:, j] @ x / mass[j]
            diff = x - means[j]
            cov = (resp[:, j][:, None] * diff).T @ diff / mass[j]
            covariances[j] = regularize_covariance(cov, epsilon, magnitude)
        weights = mass / mass.sum()

    return GmmFitResult(weights, means, covariances, trace, n_iter, converged)


@dataclass
class ClassDensityModel:
    """Per-ID-class mixture parameters plus class priors.

    class_names follows the vocabulary order; priors sum to 1 over it.
    """

    class_names: tuple[str, ...]
    priors: np.ndarray               # (C,)
    weights: list[np.ndarray]        # per class (k_c,)
    means: list[np.ndarray]          # per class (k_c, d)
    covariances: list[np.ndarray]    # per class (k_c, d, d)
    epsilon: float = DEFAULT_EPSILON

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def embedding_dim(self) -> int:
        return self.means[0].shape[1]

    def validate(self):
        c = self.n_classes
        if not (len(self.weights) == len(self.means) == len(self.covariances) == c):
            raise DataError("density model: per-class parameter lists disagree in length")
        if self.priors.shape != (c,) or abs(float(self.priors.sum()) - 1.0) > 1e-9:
            raise DataError("density model: class priors must sum to 1")
        if np.any(self.priors <= 0.0):
            raise DataError("density model: class priors must be positive")
        d = self.embedding_dim
        for name, w, mu, cov in zip(self.class_names, self.weights, self.means, self.covariances):
            k = w.shape[0]
            if abs(float(w.sum()) - 1.0) > 1e-9 or np.any(w <= 0.0):
                raise DataError(f"density model: component weights of {name!r} must be a simplex")
            if mu.shape != (k, d) or cov.shape != (k, d, d):
                raise DataError(f"density model: shape mismatch for class {name!r}")
            for j in range(k):
                try:
                    _cholesky(cov[j], lower=True)
                except np.linalg.LinAlgError as exc:  # pragma: no cover
                    raise DataError(
                        f"density model: covariance of {name!r}[{j}] is not positive-definite"
                    ) from exc

    def to_payload(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "priors": [float(p) for p in self.priors],
            "classes": [
                {
                    "name": name,
                    "weights": self.weights[i].tolist(),
                    "means": self.means[i].tolist(),
                    "covariances": self.covariances[i].tolist(),
                }
                for i, name in enumerate(self.class_names)
            ],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "ClassDensityModel":
        try:
            classes = payload["classes"]
            model = cls(
                class_names=tuple(c["name"] for c in classes),
                priors=np.asarray(payload["priors"], dtype=np.float64),
                weights=[np.asarray(c["weights"], dtype=np.float64) for c in classes],
                means=[np.asarray(c["means"], dtype=np.float64) for c in classes],
                covariances=[np.asarray(c["covariances"], dtype=np.float64) for c in classes],
                epsilon=float(payload["epsilon"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed density model payload: {exc}") from exc
        model.validate()
        return model


def fit_density_model(
    labeled,
    vocabulary: ClassVocabulary,
    components: int = 1,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
) -> ClassDensityModel:
    """Fit one mixture per vocabulary class on TP-ID embeddings.

    components=1 uses the closed-form moment estimate; >1 runs EM with a
    per-class seed substream.
    """
    per_class: dict[str, list[np.ndarray]] = {name: [] for name in vocabulary.id_classes}
    for entry in labeled:
        if entry.label is MatchLabel.TP_ID:
            per_class[entry.matched_class].append(entry.record.embedding)

    counts = np.array([len(per_class[name]) for name in vocabulary.id_classes], dtype=np.float64)
    for name, count in zip(vocabulary.id_classes, counts):
        if count == 0:
            raise DataError(f"no TP-ID embeddings for class {name!r}; cannot fit its density")

    weights, means, covs = [], [], []
    for i, name in enumerate(vocabulary.id_classes):
        x = np.stack(per_class[name])
        if components == 1:
            mu, cov = fit_class_gaussian(x, epsilon)
            weights.append(np.array([1.0]))
            means.append(mu[None, :])
            covs.append(cov[None, :, :])
        else:
            fit = fit_gmm_em(x, components, seed=seed + i, epsilon=epsilon)
            weights.append(fit.weights)
            means.append(fit.means)
            covs.append(fit.covariances)

    model = ClassDensityModel(
        class_names=vocabulary.id_classes,
        priors=counts / counts.sum(),
        weights=weights,
        means=means,
        covariances=covs,
        epsilon=epsilon,
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# log-likelihood evaluation (hot kernel)
# ---------------------------------------------------------------------------


@maybe_njit
def _gmm_loglik_kernel(x, chols, means, comp_coef, class_starts, log_priors):
    n = x.shape[0]
    d = x.shape[1]
    n_classes = log_priors.shape[0]
    total = means.shape[0]
    out = np.empty((n, n_classes))
    y = np.empty(d)
    vals = np.empty(total)
    for i in range(n):
        for t in range(total):
            # forward substitution for L y = x - mu, then |y|^2
            quad = 0.0
            for r in range(d):
                s = x[i, r] - means[t, r]
                for q in range(r):
                    s -= chols[t, r, q] * y[q]
                y[r] = s / chols[t, r, r]
                quad += y[r] * y[r]
            vals[t] = comp_coef[t] - 0.5 * quad
        for c in range(n_classes):
            start = class_starts[c]
            end = class_starts[c + 1]
            best = vals[start]
            for t in range(start + 1, end):
                if vals[t] > best:
                    best = vals[t]
            acc = 0.0
            for t in range(start, end):
                acc += np.exp(vals[t] - best)
            out[i, c] = log_priors[c] + best + np.log(acc)
    return out


def _gmm_loglik_numpy(x, chols, means, comp_coef, class_starts, log_priors):
    n = x.shape[0]
    total = means.shape[0]
    vals = np.empty((n, total))
    d = x.shape[1]
    for t in range(total):
        diff = (x - means[t]).T
        sol = solve_triangular(chols[t], diff, lower=True)
        vals[:, t] = comp_coef[t] - 0.5 * np.sum(sol * sol, axis=0)
    n_classes = log_priors.shape[0]
    out = np.empty((n, n_classes))
    for c in range(n_classes):
        seg = vals[:, class_starts[c]:class_starts[c + 1]]
        out[:, c] = log_priors[c] + logsumexp(seg, axis=1)
    return out


class DensityEvaluator:
    """Precomputed Cholesky factors for repeated likelihood evaluation."""

    def __init__(self, model: ClassDensityModel):
        self.model = model
        d = model.embedding_dim
        chols, means, coefs, starts = [], [], [], [0]
        for i in range(model.n_classes):
            for j in range(model.weights[i].shape[0]):
                chol = _cholesky(model.covariances[i][j], lower=True)
                log_det = 2.0 * np.sum(np.log(np.diag(chol)))
                chols.append(chol)
                means.append(model.means[i][j])
                coefs.append(
                    float(np.log(model.weights[i][j]) - 0.5 * (d * _LOG_2PI + log_det))
                )
            starts.append(len(chols))
        self._chols = np.stack(chols)
        self._means = np.stack(means)
        self._coefs = np.asarray(coefs)
        self._starts = np.asarray(starts, dtype=np.int64)
        self._log_priors = np.log(model.priors)

    def log_likelihoods(self, embeddings: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(embeddings, dtype=np.float64)))
        if x.shape[1] != self.model.embedding_dim:
            raise DataError(
                f"embedding dimension {x.shape[1]} does not match model "
                f"({self.model.embedding_dim})"
            )
        if NUMBA_ENABLED:
            return _gmm_loglik_kernel(
                x, self._chols, self._means, self._coefs, self._starts, self._log_priors
            )
        return _gmm_loglik_numpy(
            x, self._chols, self._means, self._coefs, self._starts, self._log_priors
        )


def gmm_log_likelihoods(model: ClassDensityModel, embedding) -> np.ndarray:
    """Length-C vector of prior-weighted mixture log-likelihoods."""
    return DensityEvaluator(model).log_likelihoods(embedding)[0]


def gmm_log_likelihoods_batch(model: ClassDensityModel, embeddings) -> np.ndarray:
    """(N, C) matrix; prefer a shared DensityEvaluator for repeated calls."""
    return DensityEvaluator(model).log_likelihoods(embeddings)
