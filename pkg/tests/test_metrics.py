import numpy as np
import pytest

from osdfusion.errors import DataError
from osdfusion.interchange import ClassVocabulary, DetectionRecord, GroundTruthObject
from osdfusion.metrics import (
    auroc,
    auroc_bd,
    average_precision,
    macro_average,
    macro_pairwise_auroc,
    measure_throughput,
    roc_curve,
    tpr_at_osr,
)


def pairwise_auroc_oracle(pos, neg):
    """O(n^2) enumeration: wins count 1, ties 0.5."""
    pos = np.asarray(pos, float)[:, None]
    neg = np.asarray(neg, float)[None, :]
    wins = np.sum(pos > neg) + 0.5 * np.sum(pos == neg)
    return float(wins / (pos.size * neg.size))


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8], [0.2, 0.1]) == 1.0

    def test_all_ties(self):
        assert auroc([0.5, 0.5], [0.5, 0.5, 0.5]) == 0.5

    def test_hand_case(self):
        # pairs: (.9,.5)+, (.9,.1)+, (.4,.5)-, (.4,.1)+ -> 3/4
        assert auroc([0.9, 0.4], [0.5, 0.1]) == 0.75

    def test_matches_pairwise_oracle_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n_pos = int(rng.integers(1, 80))
            n_neg = int(rng.integers(1, 80))
            pos = np.round(rng.standard_normal(n_pos), 1)
            neg = np.round(rng.standard_normal(n_neg), 1)
            assert abs(auroc(pos, neg) - pairwise_auroc_oracle(pos, neg)) < 1e-12

    def test_complement_identity_tie_free(self):
        rng = np.random.default_rng(1)
        pos = rng.standard_normal(40)
        neg = rng.standard_normal(60) + 0.3
        assert auroc(pos, neg) + auroc(neg, pos) == pytest.approx(1.0, abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(2)
        pos = rng.standard_normal(30)
        neg = rng.standard_normal(30) - 1.0
        base = auroc(pos, neg)
        for transform in (np.exp, np.tanh, lambda v: 3 * v + 7):
            assert auroc(transform(pos), transform(neg)) == pytest.approx(base, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            auroc([], [0.1])


class TestRocCurve:
    def test_structure_and_area(self):
        rng = np.random.default_rng(3)
        pos = np.round(rng.standard_normal(50) + 0.5, 1)
        neg = np.round(rng.standard_normal(70), 1)
        curve = roc_curve(pos, neg)
        assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
        assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0
        assert np.all(np.diff(curve.fpr) >= 0)
        assert np.all(np.diff(curve.tpr) >= 0)
        assert abs(curve.area - auroc(pos, neg)) < 1e-12


class TestAurocBd:
    def test_collapses_without_bg(self):
        pos, neg = [0.9, 0.7], [0.2, 0.4]
        assert auroc_bd(pos, neg, []) == auroc(pos, neg)

    def test_trivial(self):
        assert auroc_bd([1.0], [0.0], [0.0]) == 1.0

    def test_matches_merged_oracle(self):
        rng = np.random.default_rng(4)
        ids = rng.standard_normal(25) + 1
        ood = rng.standard_normal(15)
        bg = rng.standard_normal(20) - 0.5
        want = pairwise_auroc_oracle(ids, np.concatenate([ood, bg]))
        assert abs(auroc_bd(ids, ood, bg) - want) < 1e-12


class TestMacroPairwise:
    def test_reported_triple_mean(self):
        assert macro_average((0.722, 0.957, 0.951)) == pytest.approx(0.8767, abs=1e-4)

    def test_identical_posteriors_are_chance(self):
        p = np.tile([0.4, 0.3, 0.3], (30, 1))
        labels = np.array([0, 1, 2] * 10)
        macro, pairs = macro_pairwise_auroc(p, labels)
        assert macro == 0.5
        assert all(v == 0.5 for v in pairs.values())

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((30, 3))
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        labels = np.array([0] * 10 + [1] * 10 + [2] * 10)
        macro, pairs = macro_pairwise_auroc(p, labels)
        for name, (a, b) in zip(("id/ood", "id/bg", "ood/bg"), ((0, 1), (0, 2), (1, 2))):
            score = p[:, a] - p[:, b]
            want = pairwise_auroc_oracle(score[labels == a], score[labels == b])
            assert pairs[name] == pytest.approx(want, abs=1e-12)
        assert macro == pytest.approx(np.mean(list(pairs.values())), abs=1e-15)

    def test_missing_class_rejected(self):
        p = np.tile([0.5, 0.3, 0.2], (4, 1))
        with pytest.raises(DataError):
            macro_pairwise_auroc(p, np.array([0, 0, 1, 1]))


class TestTprAtOsr:
    def test_perfect_separation(self):
        out = tpr_at_osr([0.9, 0.8, 0.7], [0.1, 0.2])
        assert all(v == 1.0 for v in out.values())

    def test_hand_case(self):
        out = tpr_at_osr([0.9, 0.8, 0.7, 0.6], [0.75, 0.1], levels=(0.20,))
        assert out[0.20] == 0.5

    def test_degenerate_level_one(self):
        out = tpr_at_osr([0.9, 0.1], [0.5], levels=(1.0,))
        assert out[1.0] == 1.0

    def test_monotone_in_level(self):
        rng = np.random.default_rng(6)
        ids = rng.standard_normal(200) + 1.0
        ood = rng.standard_normal(100)
        levels = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)
        out = tpr_at_osr(ids, ood, levels)
        values = [out[level] for level in levels]
        assert np.all(np.diff(values) >= 0)

    def test_osr_constraint_holds(self):
        rng = np.random.default_rng(7)
        ids = rng.standard_normal(100) + 0.5
        ood = rng.standard_normal(80)
        for level in (0.05, 0.1, 0.2):
            out = tpr_at_osr(ids, ood, (level,))
            # recompute the implied threshold and check the OSR it yields
            candidates = np.unique(np.concatenate([ids, ood]))
            threshold = next(
                t for t in candidates if np.mean(ood >= t) <= level
            )
            assert np.mean(ood >= threshold) <= level
            assert out[level] == pytest.approx(float(np.mean(ids >= threshold)), abs=1e-12)


VOCAB = ClassVocabulary(("plane", "bird"))


def _det(image_id, box, cls, conf_logit):
    logits = np.full(2, -10.0)
    logits[cls] = conf_logit
    return DetectionRecord(image_id, np.asarray(box, float), logits, np.zeros(2))


def pr_area_oracle(flags, n_gt):
    """Exhaustive all-point PR enumeration from an ordered hit/miss list."""
    best = 0.0
    area = 0.0
    tp = fp = 0
    points = []
    for hit in flags:
        tp += hit
        fp += 1 - hit
        points.append((tp / n_gt, tp / (tp + fp)))
    # all-point interpolation: integrate max precision at recall >= r
    area = 0.0
    prev_r = 0.0
    for i, (r, _) in enumerate(points):
        if r == prev_r:
            continue
        p_max = max(pp for rr, pp in points if rr >= r)
        area += (r - prev_r) * p_max
        prev_r = r
    return area


class TestAveragePrecision:
    def test_perfect_detections(self):
        gts = [GroundTruthObject("a", np.array([0.0, 0, 10, 10]), "plane"),
               GroundTruthObject("b", np.array([0.0, 0, 10, 10]), "bird")]
        dets = [_det("a", (0, 0, 10, 10), 0, 5.0), _det("b", (0, 0, 10, 10), 1, 5.0)]
        result = average_precision(dets, gts, VOCAB)
        assert result.mean_ap == 1.0
        assert result.per_class == {"plane": 1.0, "bird": 1.0}

    def test_zero_detections(self):
        gts = [GroundTruthObject("a", np.array([0.0, 0, 10, 10]), "plane")]
        assert average_precision([], gts, VOCAB).mean_ap == 0.0

    def test_hand_case_hit_miss_hit(self):
        gts = [GroundTruthObject("a", np.array([0.0, 0, 10, 10]), "plane"),
               GroundTruthObject("a", np.array([50.0, 0, 60, 10]), "plane")]
        dets = [
            _det("a", (0, 0, 10, 10), 0, 5.0),     # hit, highest confidence
            _det("a", (20, 20, 30, 30), 0, 4.0),   # miss
            _det("a", (50, 0, 60, 10), 0, 3.0),    # hit
        ]
        result = average_precision(dets, gts, VOCAB)
        want = pr_area_oracle([1, 0, 1], n_gt=2)
        assert result.per_class["plane"] == pytest.approx(want, abs=1e-15)

    def test_open_set_removes_ood_declared(self):
        gts = [GroundTruthObject("a", np.array([0.0, 0, 10, 10]), "plane")]
        dets = [
            _det("a", (0, 0, 10, 10), 0, 5.0),
            _det("a", (30, 30, 40, 40), 0, 6.0),   # confident false positive
        ]
        closed = average_precision(dets, gts, VOCAB)
        opened = average_precision(
            dets, gts, VOCAB, open_set=True, decisions=["ID", "OOD"]
        )
        assert closed.per_class["plane"] == pytest.approx(0.5)
        assert opened.per_class["plane"] == 1.0

    def test_ood_ground_truth_excluded_from_pools(self):
        gts = [GroundTruthObject("a", np.array([0.0, 0, 10, 10]), "zeppelin")]
        dets = [_det("a", (0, 0, 10, 10), 0, 5.0)]
        result = average_precision(dets, gts, VOCAB)
        assert result.per_class == {}
        assert result.mean_ap == 0.0

    def test_confidence_rescaling_invariance(self):
        rng = np.random.default_rng(8)
        gts, dets = [], []
        for i in range(6):
            x = 100.0 * i
            gts.append(GroundTruthObject("a", np.array([x, 0, x + 10, 10]), "plane"))
        for i in range(10):
            x = 100.0 * i
            dets.append(_det("a", (x + rng.uniform(0, 3), 0, x + 10, 10), 0,
                             float(rng.uniform(0.5, 4.0))))
        base = average_precision(dets, gts, VOCAB).mean_ap
        scaled = [
            DetectionRecord(d.image_id, d.box, d.class_logits * 2.0, d.embedding)
            for d in dets
        ]
        assert average_precision(scaled, gts, VOCAB).mean_ap == pytest.approx(base, abs=1e-12)

    def test_each_gt_matched_once(self):
        gts = [GroundTruthObject("a", np.array([0.0, 0, 10, 10]), "plane")]
        dets = [_det("a", (0, 0, 10, 10), 0, 5.0), _det("a", (0, 0, 10, 10), 0, 4.0)]
        result = average_precision(dets, gts, VOCAB)
        # second detection is a false positive: precision drops after rank 1
        assert result.per_class["plane"] == pytest.approx(1.0)


class TestThroughput:
    def test_rate_definition_and_determinism(self):
        seen = []

        def classify(records):
            seen.append(len(records))
            return ["ID"] * len(records)

        result = measure_throughput(classify, [object()] * 10, min_records=64, runs=2)
        assert result.n_records >= 64
        assert result.runs == 2
        assert result.detections_per_second > 0
        assert len(result.rates) == 2
        assert len(set(seen)) == 1  # same batch every run

    def test_empty_stream_rejected(self):
        with pytest.raises(DataError):
            measure_throughput(lambda r: r, [])
