import io
import math

import numpy as np
import pytest

from osdfusion.density import ClassDensityModel
from osdfusion.errors import DataError
from osdfusion.features import (
    FeatureConfig,
    FeatureRow,
    assemble_features,
    assemble_features_batch,
    energy_density,
    entropy,
    gmm_density,
    gmm_entropy,
    parse_feature_rows,
    prune,
    score,
    sigmoid,
    write_feature_rows,
)
from osdfusion.interchange import DetectionRecord


def _record(logits, embedding=(0.0, 0.0)):
    return DetectionRecord(
        "img", np.array([0.0, 0, 1, 1]), np.asarray(logits, float), np.asarray(embedding, float)
    )


def sigmoid_preimage(target, exact=False):
    """A logit whose stable sigmoid equals `target`; with exact=False the
    closest achievable float64 value on the correct side is acceptable."""
    z = math.log(target / (1.0 - target))
    best_z, best_err = z, math.inf
    for _ in range(200):
        s = float(sigmoid(np.array([z]))[0])
        if s == target:
            return z
        if abs(s - target) < best_err:
            best_z, best_err = z, abs(s - target)
        z = math.nextafter(z, math.inf if s < target else -math.inf)
    if exact:
        raise AssertionError(f"no float64 preimage found near logit({target})")
    assert best_err < 1e-12
    return best_z


class TestScalarFeatures:
    def test_score_of_zero_logit(self):
        assert float(score(np.array([0.0]))) == 0.5

    def test_score_saturates_low(self):
        assert float(score(np.array([-40.0, -40.0]))) < 1e-17

    def test_score_at_pruning_boundary_is_exact(self):
        z = sigmoid_preimage(0.2, exact=True)
        assert float(score(np.array([z, z - 5.0]))) == 0.2

    def test_entropy_uniform(self):
        for c in (2, 5, 11):
            assert float(entropy(np.zeros(c))) == pytest.approx(np.log(c), rel=1e-12)

    def test_entropy_two_zeros(self):
        assert float(entropy(np.array([0.0, 0.0]))) == pytest.approx(0.693147, abs=1e-6)

    def test_entropy_near_deterministic(self):
        assert float(entropy(np.array([100.0, 0.0, 0.0]))) < 1e-40

    def test_entropy_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            c = rng.integers(1, 8)
            h = float(entropy(rng.standard_normal(c) * 10))
            assert 0.0 <= h <= np.log(max(c, 2)) + 1e-12

    def test_energy_single_logit(self):
        assert float(energy_density(np.array([3.25]))) == 3.25

    def test_energy_two_equal(self):
        z = 1.7
        assert float(energy_density(np.array([z, z]))) == pytest.approx(z + np.log(2), rel=1e-14)

    def test_energy_matches_extended_precision_sum(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal(10) * 3
        direct = float(np.log(np.sum(np.exp(logits.astype(np.longdouble)))))
        assert float(energy_density(logits)) == pytest.approx(direct, rel=1e-12)

    def test_gmm_scalar_features(self):
        gl = np.full(4, -7.0)
        assert float(gmm_entropy(gl)) == pytest.approx(np.log(4), rel=1e-12)
        assert float(gmm_density(gl)) == pytest.approx(-7.0 + np.log(4), rel=1e-12)
        assert float(gmm_density(gl, use_max=True)) == -7.0
        assert float(gmm_entropy(np.array([0.0, -100.0]))) < 1e-40

    def test_shift_behavior(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal(5)
        shift = 3.7
        assert float(score(logits)) != float(score(logits + shift))  # score is not shift-invariant
        assert float(entropy(logits + shift)) == pytest.approx(float(entropy(logits)), abs=1e-12)
        assert float(energy_density(logits + shift)) == pytest.approx(
            float(energy_density(logits)) + shift, rel=1e-12
        )


class TestPrune:
    def test_boundary_cases(self):
        below = _record([sigmoid_preimage(0.19)])
        at = _record([sigmoid_preimage(0.2, exact=True)])
        above = _record([sigmoid_preimage(0.21)])
        retained = prune([below, at, above], threshold=0.2)
        assert retained == [at, above]

    def test_order_preserved_and_idempotent(self):
        rng = np.random.default_rng(3)
        records = [_record(rng.standard_normal(3)) for _ in range(50)]
        once = prune(records)
        twice = prune(once)
        assert once == twice
        assert len(once) <= len(records)
        positions = [records.index(r) for r in once]
        assert positions == sorted(positions)


def _density_model(c=2, d=2):
    return ClassDensityModel(
        class_names=tuple(f"c{i}" for i in range(c)),
        priors=np.full(c, 1.0 / c),
        weights=[np.array([1.0])] * c,
        means=[np.zeros((1, d)) + i for i in range(c)],
        covariances=[np.eye(d)[None]] * c,
    )


class TestAssemble:
    def test_three_feature_row(self):
        config = FeatureConfig.single("score")
        config = FeatureConfig(
            score=True, entropy=True, density=False,
            gmm_entropy=True, gmm_density=False, logits=False, gmm_logits=False,
        )
        vec = assemble_features(_record([1.0, 0.0]), config, _density_model())
        assert vec.shape == (3,)

    def test_all_features_length(self):
        config = FeatureConfig()
        record = _record(np.linspace(-1, 1, 5), np.zeros(2))
        vec = assemble_features(record, config, _density_model(c=5))
        assert vec.shape == (5 + 2 * 5,)
        assert config.feature_length(5) == 15
        assert len(config.feature_names(5)) == 15

    def test_empty_config_rejected(self):
        with pytest.raises(DataError):
            FeatureConfig(
                score=False, entropy=False, density=False,
                gmm_entropy=False, gmm_density=False, logits=False, gmm_logits=False,
            )

    def test_missing_density_model(self):
        with pytest.raises(DataError) as exc:
            assemble_features(_record([1.0]), FeatureConfig(), None)
        assert "density" in str(exc.value)

    def test_temperatures_are_applied(self):
        config = FeatureConfig(
            score=False, entropy=False, density=True,
            gmm_entropy=False, gmm_density=False, logits=True, gmm_logits=False,
        )
        record = _record([2.0, 4.0])
        hot = assemble_features(record, config, detector_temperature=2.0)
        cold = assemble_features(record, config, detector_temperature=1.0)
        np.testing.assert_allclose(hot[1:], np.array([1.0, 2.0]))
        np.testing.assert_allclose(cold[1:], np.array([2.0, 4.0]))
        assert hot[0] == pytest.approx(float(energy_density(np.array([1.0, 2.0]))))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(8)
        records = [_record(rng.standard_normal(2), rng.standard_normal(2)) for _ in range(12)]
        config = FeatureConfig()
        model = _density_model()
        batch = assemble_features_batch(records, config, model, 1.3, 0.8)
        for i, record in enumerate(records):
            np.testing.assert_allclose(
                batch[i], assemble_features(record, config, model, 1.3, 0.8), rtol=1e-12
            )

    def test_single_feature_configs(self):
        for name in ("score", "entropy", "density"):
            config = FeatureConfig.single(name)
            assert config.enabled() == (name,)
            assert not config.needs_density
        assert FeatureConfig.single("gmm_density").needs_density


def test_feature_file_round_trip():
    rng = np.random.default_rng(4)
    rows = [
        FeatureRow(i, rng.standard_normal(4), label, source)
        for i, (label, source) in enumerate(
            [("ID", None), ("OOD", "ood-test"), ("BG", "detector-train")]
        )
    ]
    buf = io.StringIO()
    write_feature_rows(rows, buf)
    parsed = parse_feature_rows(io.StringIO(buf.getvalue()))
    assert len(parsed) == 3
    for got, want in zip(parsed, rows):
        assert got.index == want.index
        assert got.label == want.label
        assert got.source == want.source
        np.testing.assert_array_equal(got.values, want.values)


def test_feature_file_width_mismatch():
    rows = [FeatureRow(0, np.zeros(3), "ID"), FeatureRow(1, np.zeros(4), "BG")]
    buf = io.StringIO()
    write_feature_rows(rows, buf)
    with pytest.raises(DataError):
        parse_feature_rows(io.StringIO(buf.getvalue()))
