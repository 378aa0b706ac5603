"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to see them live). Tolerances are fixed here,
not configurable."""

import functools
import io
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from osdfusion.calibration import fit_temperature, nll_at_temperature
from osdfusion.density import fit_class_gaussian, fit_gmm_em
from osdfusion.features import prune, sigmoid
from osdfusion.fusion import (
    MlpParameters,
    TrainingConfig,
    decide,
    loss_and_grads,
    softmax,
    standardize,
    train_mlp,
    tune_thresholds,
    forward,
)
from osdfusion.interchange import (
    ClassVocabulary,
    DetectionRecord,
    GroundTruthObject,
    write_detections,
    write_ground_truth,
    write_vocabulary,
)
from osdfusion.matching import iou, solve_assignment
from osdfusion.metrics import auroc, average_precision, macro_average
from osdfusion.pipeline import (
    PipelineConfig,
    parse_flat_config,
    run_pipeline,
    synth_config_from_flat,
)
from osdfusion.synth import generate_synthetic

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def criterion(name):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException:
                print(f"FAIL  {name}")
                raise
            print(f"PASS  {name}" + (f"  [{detail}]" if detail else ""))

        return run

    return wrap


# ---------------------------------------------------------------------------


@criterion("AUROC oracle: sort-based equals pairwise enumeration, |diff| < 1e-12")
def test_auroc_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n_pos = int(rng.integers(1, 501))
        n_neg = int(rng.integers(1, 501))
        pos = rng.standard_normal(n_pos)
        neg = rng.standard_normal(n_neg) - 0.2
        if rng.uniform() < 0.5:  # inject ties
            pos = np.round(pos, 1)
            neg = np.round(neg, 1)
        fast = auroc(pos, neg)
        wins = np.sum(pos[:, None] > neg[None, :]) + 0.5 * np.sum(pos[:, None] == neg[None, :])
        slow = float(wins / (n_pos * n_neg))
        worst = max(worst, abs(fast - slow))
        assert abs(fast - slow) < 1e-12
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    return f"max |diff| {worst:.2e}, {elapsed:.1f}s"


@criterion("Analytic AUROC: two-normal scores within 0.02 of Phi(d/sqrt(2))")
def test_analytic_auroc():
    worst = 0.0
    for delta in (0.5, 1.0, 2.0):
        expected = float(norm.cdf(delta / np.sqrt(2.0)))
        for seed in range(10):
            rng = np.random.default_rng(1000 * seed + int(delta * 10))
            pos = rng.normal(delta, 1.0, 5000)
            neg = rng.normal(0.0, 1.0, 5000)
            err = abs(auroc(pos, neg) - expected)
            worst = max(worst, err)
            assert err <= 0.02
    return f"max error {worst:.4f}"


@criterion("Assignment oracle: exact cost equality with permutation minimum, n in 2..6")
def test_assignment_oracle():
    rng = np.random.default_rng(7)
    for n in range(2, 7):
        for _ in range(100):
            cost = rng.uniform(0.0, 1.0, (n, n))
            pairs = solve_assignment(cost)
            got = np.sum(cost[[r for r, _ in pairs], [c for _, c in pairs]])
            best = min(
                np.sum(cost[np.arange(n), list(perm)])
                for perm in itertools.permutations(range(n))
            )
            assert got == best
    return "500 instances, exact"


@criterion("EM: monotone log-likelihood, k=1 equals closed form, degenerate input safe")
def test_em_properties():
    rng = np.random.default_rng(99)
    for trial in range(50):
        n = int(rng.integers(20, 120))
        d = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        centers = rng.standard_normal((k, d)) * 3
        x = np.concatenate(
            [rng.standard_normal((n, d)) * rng.uniform(0.5, 1.5) + centers[j % k]
             for j in range(k)]
        )
        fit = fit_gmm_em(x, k=k, seed=trial)
        ll = np.asarray(fit.log_likelihoods)
        assert not np.any(np.diff(ll) < -1e-9 * np.abs(ll[:-1]))

    for trial in range(10):
        x = rng.standard_normal((int(rng.integers(10, 100)), int(rng.integers(1, 5))))
        n = x.shape[0]
        fit = fit_gmm_em(x, k=1, seed=trial)
        mu, cov = fit_class_gaussian(x)
        np.testing.assert_allclose(fit.means[0], mu, rtol=1e-6, atol=1e-12)
        np.testing.assert_allclose(fit.covariances[0] * n / (n - 1), cov, rtol=1e-6)

    x = np.tile(rng.standard_normal(3), (12, 1))
    for k in (1, 2, 3):
        fit = fit_gmm_em(x, k=k, seed=0)
        assert np.all(np.isfinite(fit.covariances))
        for cov in fit.covariances:
            np.linalg.cholesky(cov)
    return "50 runs monotone, k=1 reconciled, degenerate Cholesky ok"


@criterion("Temperature recovery: T in {0.5,1,2} within 5%, NLL(T*)<=NLL(1), argmax kept")
def test_temperature_recovery():
    for true_t in (0.5, 1.0, 2.0):
        rng = np.random.default_rng(int(true_t * 100))
        z = rng.standard_normal((10000, 5)) * 2.0
        probs = np.exp(z - z.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        labels = (probs.cumsum(axis=1) > rng.uniform(size=(10000, 1))).argmax(axis=1)
        logits = z * true_t
        fit = fit_temperature(logits, labels)
        assert abs(fit.value - true_t) <= 0.05 * true_t
        assert fit.calibration_nll <= nll_at_temperature(logits, labels, 1.0)
        scaled = logits / fit.value
        assert np.array_equal(np.argmax(scaled, axis=1), np.argmax(logits, axis=1))
    return "all three temperatures recovered"


@criterion("MLP: gradients vs finite differences, separable accuracy, determinism, speed")
def test_mlp_criteria():
    rng = np.random.default_rng(5)
    step = 1e-5
    worst = 0.0
    for _ in range(20):
        hidden = int(rng.integers(3, 8))
        n_in = int(rng.integers(2, 6))
        k = int(rng.integers(2, 4))
        params = MlpParameters(
            (n_in, hidden, k),
            [rng.standard_normal((n_in, hidden)) * 0.7, rng.standard_normal((hidden, k)) * 0.7],
            [rng.standard_normal(hidden) * 0.2, rng.standard_normal(k) * 0.2],
            np.zeros(n_in),
            np.ones(n_in),
        )
        x = rng.standard_normal((12, n_in))
        y = rng.integers(0, k, 12)
        weights = rng.uniform(0.5, 2.0, k)
        _, grads = loss_and_grads(params, x, y, weights)
        for layer, (dw, db) in enumerate(grads):
            for arr, grad in ((params.weights[layer], dw), (params.biases[layer], db)):
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    arr[idx] += step
                    up, _ = loss_and_grads(params, x, y, weights)
                    arr[idx] -= 2 * step
                    down, _ = loss_and_grads(params, x, y, weights)
                    arr[idx] += step
                    numeric = (up - down) / (2 * step)
                    rel = abs(grad[idx] - numeric) / max(1.0, abs(numeric))
                    worst = max(worst, rel)
                    assert rel < 1e-4

    # linearly separable two-class data trains to >= 99%
    rng = np.random.default_rng(0)
    half = 1000
    a = rng.uniform(-1, 1, (half, 2)) + np.array([2.0, 0.0])
    b = rng.uniform(-1, 1, (half, 2)) - np.array([2.0, 0.0])
    x = np.vstack([a, b])
    y = np.array([0] * half + [1] * half)
    params, _ = train_mlp(x, y, 2, TrainingConfig(epochs=200), seed=1)
    acc = float(np.mean(np.argmax(forward(params, standardize(params, x)), axis=1) == y))
    assert acc >= 0.99

    # fixed seed reproduces weights bit for bit
    p1, _ = train_mlp(x, y, 2, TrainingConfig(epochs=25), seed=9)
    p2, _ = train_mlp(x, y, 2, TrainingConfig(epochs=25), seed=9)
    for w1, w2 in zip(p1.weights + p1.biases, p2.weights + p2.biases):
        assert np.max(np.abs(w1 - w2)) <= 1e-12

    # 100k-sample training budget: two minutes of wall clock
    rng = np.random.default_rng(3)
    n = 100_000
    xb = rng.standard_normal((n, 15))
    yb = rng.integers(0, 3, n)
    xb[yb == 1] += 1.0
    xb[yb == 2] -= 1.0
    start = time.perf_counter()
    train_mlp(xb, yb, 3, TrainingConfig(), seed=2)
    elapsed = time.perf_counter() - start
    assert elapsed <= 120.0
    return f"grad rel err {worst:.2e}, acc {acc:.3f}, 100k train {elapsed:.1f}s"


@criterion("Threshold tuning: escape <= 20% and exhaustive-scan equality on every split")
def test_threshold_constraint():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = 300
        logits = rng.standard_normal((n, 3)) * 1.5
        labels = rng.integers(0, 3, n)
        logits[labels == 1, 1] += rng.uniform(0.5, 2.5)
        logits[labels == 0, 0] += rng.uniform(0.5, 2.5)
        th = tune_thresholds(logits, labels, 0.20)
        p = softmax(logits)
        decisions = decide(p, th.tau_ood)
        escape = float(np.mean(decisions[labels == 1] != 1))
        assert escape <= 0.20

        best = None
        for tau in np.unique(p[:, 1]):
            d = decide(p, tau)
            e = float(np.mean(d[labels == 1] != 1))
            if e > 0.20:
                continue
            tpr = float(np.mean(d[labels == 0] == 0))
            if best is None or tpr > best[0] or (tpr == best[0] and tau > best[1]):
                best = (tpr, float(tau))
        assert th.tau_ood == best[1]
        assert th.id_tpr == pytest.approx(best[0], abs=1e-12)
    return "10 splits, scan-optimal"


@criterion("Pruning boundary: raw sigmoid 0.19 dropped, 0.20 and 0.21 retained")
def test_pruning_boundary():
    def preimage(target, exact):
        z = math.log(target / (1 - target))
        best, err = z, math.inf
        for _ in range(200):
            s = float(sigmoid(np.array([z]))[0])
            if s == target:
                return z
            if abs(s - target) < err:
                best, err = z, abs(s - target)
            z = math.nextafter(z, math.inf if s < target else -math.inf)
        assert not exact and err < 1e-12
        return best

    def record(z):
        return DetectionRecord("i", np.array([0.0, 0, 1, 1]), np.array([z]), np.zeros(2))

    below = record(preimage(0.19, exact=False))
    at = record(preimage(0.20, exact=True))
    above = record(preimage(0.21, exact=False))
    assert prune([below, at, above], threshold=0.2) == [at, above]
    return "strict-less discard at 0.2"


@criterion("AP oracle: exact match with exhaustive PR enumeration on 50 micro-instances")
def test_ap_oracle():
    vocab = ClassVocabulary(("a", "b"))
    rng = np.random.default_rng(31)

    def oracle_ap(dets, gts, threshold=0.5):
        """Independent re-derivation: per-class greedy matching with scalar
        IoU calls, then brute-force all-point PR area."""
        per_class = {}
        for ci, cname in enumerate(vocab.id_classes):
            class_gts = [g for g in gts if g.class_name == cname]
            if not class_gts:
                continue
            cands = [d for d in dets if int(np.argmax(d.class_logits)) == ci]
            cands = sorted(
                range(len(cands)),
                key=lambda i: -float(sigmoid(np.max(cands[i].class_logits)))), cands
            order, cands = cands
            flags = []
            used = set()
            for i in order:
                det = cands[i]
                best_j, best_iou = -1, 0.0
                for j, gt in enumerate(class_gts):
                    if j in used or gt.image_id != det.image_id:
                        continue
                    v = iou(det.box, gt.box)
                    if v > best_iou:
                        best_j, best_iou = j, v
                if best_j >= 0 and best_iou >= threshold:
                    used.add(best_j)
                    flags.append(1)
                else:
                    flags.append(0)
            if not flags:
                per_class[cname] = 0.0
                continue
            points = []
            tp = fp = 0
            for hit in flags:
                tp += hit
                fp += 1 - hit
                points.append((tp / len(class_gts), tp / (tp + fp)))
            area, prev_r = 0.0, 0.0
            for r, _ in points:
                if r == prev_r:
                    continue
                area += (r - prev_r) * max(pp for rr, pp in points if rr >= r)
                prev_r = r
            per_class[cname] = area
        mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return per_class, mean

    for _ in range(50):
        n_det = int(rng.integers(1, 11))
        n_gt = int(rng.integers(1, 6))
        gts, dets = [], []
        for _ in range(n_gt):
            x, y = rng.uniform(0, 80, 2)
            w, h = rng.uniform(5, 20, 2)
            gts.append(
                GroundTruthObject("img", np.array([x, y, x + w, y + h]),
                                  vocab.id_classes[int(rng.integers(2))])
            )
        for _ in range(n_det):
            anchor = gts[int(rng.integers(n_gt))]
            jitter = rng.uniform(-4, 4, 4)
            box = anchor.box + jitter
            box[2] = max(box[2], box[0] + 1.0)
            box[3] = max(box[3], box[1] + 1.0)
            logits = rng.standard_normal(2) * 2
            dets.append(DetectionRecord("img", box, logits, np.zeros(1)))
        got = average_precision(dets, gts, vocab)
        want_classes, want_map = oracle_ap(dets, gts)
        assert got.per_class == want_classes
        assert got.mean_ap == want_map
    return "50 instances, exact"


@criterion("Macro arithmetic: mean of (0.722, 0.957, 0.951) is 0.8767 +/- 1e-4")
def test_macro_arithmetic():
    assert abs(macro_average((0.722, 0.957, 0.951)) - 0.8767) <= 1e-4
    return f"{macro_average((0.722, 0.957, 0.951)):.6f}"


def _bundled_pipeline_config(tmp_path, features="all"):
    data = tmp_path / "data"
    for name, tag in (
        ("synthetic_detector_train", "detector-train"),
        ("synthetic_calibration", "calibration"),
        ("synthetic_ood_test", "ood-test"),
    ):
        with open(CONFIG_DIR / f"{name}.cfg", "r", encoding="utf-8") as fh:
            synth_cfg = synth_config_from_flat(parse_flat_config(fh))
        bundle = generate_synthetic(synth_cfg)
        split_dir = data / tag
        split_dir.mkdir(parents=True, exist_ok=True)
        with open(split_dir / "detections.jsonl", "w") as fh:
            write_detections(bundle.detections, fh)
        with open(split_dir / "ground_truth.jsonl", "w") as fh:
            write_ground_truth(bundle.ground_truth, fh)
        if tag == "detector-train":
            with open(data / "vocabulary.txt", "w") as fh:
                write_vocabulary(bundle.vocabulary, fh)
    with open(CONFIG_DIR / "synthetic_pipeline.cfg", "r", encoding="utf-8") as fh:
        flat = parse_flat_config(fh)
    flat["output_dir"] = str(tmp_path / f"out_{features.replace(',', '_')}")
    flat["features"] = features
    return PipelineConfig.from_flat(flat, tmp_path)


@criterion("Fusion gain: bundled benchmark macro AUROC beats every single feature by 0.03")
def test_fusion_gain(tmp_path):
    fusion_report = run_pipeline(_bundled_pipeline_config(tmp_path, "all"))
    margins = {}
    for feature in ("score", "entropy", "density", "gmm_entropy", "gmm_density"):
        report = run_pipeline(_bundled_pipeline_config(tmp_path, feature))
        margins[feature] = fusion_report.macro_pairwise_auroc - report.macro_pairwise_auroc
        assert margins[feature] >= 0.03
    weakest = min(margins, key=margins.get)
    return (
        f"fusion {fusion_report.macro_pairwise_auroc:.3f}, "
        f"smallest margin {margins[weakest]:.3f} over {weakest}"
    )
