import io
import json

import numpy as np
import pytest

from osdfusion.density import ClassDensityModel
from osdfusion.errors import DataError
from osdfusion.fusion import FusionModel, MlpParameters
from osdfusion.calibration import Temperature
from osdfusion.features import FeatureConfig
from osdfusion.interchange import (
    ClassVocabulary,
    DetectionRecord,
    GroundTruthObject,
    iter_detections,
    parse_detections,
    parse_ground_truth,
    parse_vocabulary,
    read_model,
    serialize_detection,
    serialize_ground_truth,
    write_detections,
    write_ground_truth,
    write_model,
    write_vocabulary,
)

GOOD_LINE = json.dumps(
    {
        "image_id": "img1",
        "box": [0.0, 1.0, 10.0, 12.0],
        "class_logits": [0.5, -1.0, 2.0],
        "embedding": [0.1, 0.2, 0.3, 0.4],
        "detector_score": 0.9,
    }
)


def test_parse_single_line():
    records = parse_detections(io.StringIO(GOOD_LINE + "\n"))
    assert len(records) == 1
    rec = records[0]
    assert rec.image_id == "img1"
    assert rec.class_logits.shape == (3,)
    assert rec.embedding.shape == (4,)
    assert rec.detector_score == 0.9


def test_missing_field_names_field_and_line():
    obj = json.loads(GOOD_LINE)
    del obj["embedding"]
    stream = io.StringIO(GOOD_LINE + "\n" + json.dumps(obj) + "\n")
    with pytest.raises(DataError) as exc:
        parse_detections(stream)
    assert "embedding" in str(exc.value)
    assert "line 2" in str(exc.value)


def test_dimension_mismatch_across_lines():
    obj = json.loads(GOOD_LINE)
    obj["class_logits"] = [0.0, 1.0, 2.0, 3.0]
    stream = io.StringIO(GOOD_LINE + "\n" + json.dumps(obj) + "\n")
    with pytest.raises(DataError) as exc:
        parse_detections(stream)
    assert "class_logits" in str(exc.value)


def test_non_finite_rejected():
    bad = GOOD_LINE.replace("0.5", "NaN")
    with pytest.raises(DataError):
        parse_detections(io.StringIO(bad))


def test_unknown_field_rejected():
    obj = json.loads(GOOD_LINE)
    obj["surprise"] = 1
    with pytest.raises(DataError) as exc:
        parse_detections(io.StringIO(json.dumps(obj)))
    assert "surprise" in str(exc.value)


def test_detector_score_range():
    obj = json.loads(GOOD_LINE)
    obj["detector_score"] = 1.5
    with pytest.raises(DataError):
        parse_detections(io.StringIO(json.dumps(obj)))


def test_ground_truth_parsing():
    line = json.dumps({"image_id": "a", "box": [0, 0, 5, 5], "class_name": "drone"})
    objs = parse_ground_truth(io.StringIO(line))
    assert objs[0].class_name == "drone"


def test_degenerate_gt_box():
    line = json.dumps({"image_id": "a", "box": [3, 0, 3, 5], "class_name": "drone"})
    with pytest.raises(DataError) as exc:
        parse_ground_truth(io.StringIO(line))
    assert "degenerate" in str(exc.value)


def test_gt_class_outside_vocabulary_is_accepted():
    # OOD-ness is a vocabulary property, never a parse-time flag
    line = json.dumps({"image_id": "a", "box": [0, 0, 5, 5], "class_name": "zeppelin"})
    objs = parse_ground_truth(io.StringIO(line))
    vocab = ClassVocabulary(("plane", "bird"))
    assert not vocab.contains(objs[0].class_name)


def test_empty_class_name_rejected():
    line = json.dumps({"image_id": "a", "box": [0, 0, 5, 5], "class_name": ""})
    with pytest.raises(DataError):
        parse_ground_truth(io.StringIO(line))


def test_detection_round_trip_is_exact():
    rng = np.random.default_rng(0)
    records = [
        DetectionRecord(
            f"img{i}",
            np.sort(rng.uniform(0, 100, 4).reshape(2, 2), axis=0).T.ravel()[[0, 2, 1, 3]],
            rng.standard_normal(5) * 37.1,
            rng.standard_normal(7) / 3.0,
            None if i % 2 else float(rng.uniform()),
        )
        for i in range(20)
    ]
    buf = io.StringIO()
    write_detections(records, buf)
    parsed = parse_detections(io.StringIO(buf.getvalue()))
    assert parsed == records


def test_ground_truth_round_trip():
    objs = [GroundTruthObject("i", np.array([0.0, 0.5, 1.25, 7.125]), "x")]
    buf = io.StringIO()
    write_ground_truth(objs, buf)
    assert parse_ground_truth(io.StringIO(buf.getvalue())) == objs


def test_vocabulary_round_trip_and_order():
    vocab = ClassVocabulary(("b", "a", "c"))
    buf = io.StringIO()
    write_vocabulary(vocab, buf)
    parsed = parse_vocabulary(io.StringIO(buf.getvalue()))
    assert parsed.id_classes == ("b", "a", "c")
    assert parsed.index_of("a") == 1
    assert parsed.index_of("zeppelin") is None


def test_vocabulary_duplicates_rejected():
    with pytest.raises(DataError):
        parse_vocabulary(io.StringIO("a\nb\na\n"))


def test_vocabulary_blank_line_rejected():
    with pytest.raises(DataError):
        parse_vocabulary(io.StringIO("a\n\nb\n"))


def _density_model():
    return ClassDensityModel(
        class_names=("a", "b"),
        priors=np.array([0.25, 0.75]),
        weights=[np.array([1.0]), np.array([0.5, 0.5])],
        means=[np.zeros((1, 3)), np.arange(6.0).reshape(2, 3)],
        covariances=[np.eye(3)[None], np.stack([np.eye(3) * 2.0, np.eye(3) * 0.5])],
        epsilon=1e-6,
    )


def _fusion_model():
    mlp = MlpParameters(
        layer_sizes=(4, 3, 2),
        weights=[np.arange(12.0).reshape(4, 3) / 10, np.arange(6.0).reshape(3, 2) / 5],
        biases=[np.zeros(3), np.array([0.1, -0.2])],
        feature_mean=np.array([0.0, 1.0, 2.0, 3.0]),
        feature_std=np.array([1.0, 2.0, 3.0, 4.0]),
    )
    return FusionModel(
        feature_config=FeatureConfig(),
        detector_temperature=Temperature(1.5, "detector_logits", 0.3),
        gmm_temperature=Temperature(0.7, "gmm_logits", 0.4),
        mlp=mlp,
        thresholds=None,
        seed=11,
        training_meta={"epochs_run": 3, "train_loss": [1.0, 0.5, 0.25]},
    )


@pytest.mark.parametrize("model_fn", [_density_model, _fusion_model])
def test_model_round_trip(model_fn):
    model = model_fn()
    buf = io.StringIO()
    write_model(model, buf)
    restored = read_model(io.StringIO(buf.getvalue()))
    assert type(restored) is type(model)
    assert json.dumps(restored.to_payload()) == json.dumps(model.to_payload())


def test_unknown_schema_version():
    model = _density_model()
    buf = io.StringIO()
    write_model(model, buf)
    text = buf.getvalue().replace('"schema_version": 1', '"schema_version": 99')
    with pytest.raises(DataError) as exc:
        read_model(io.StringIO(text))
    assert "99" in str(exc.value)


def test_truncated_model_stream():
    model = _density_model()
    buf = io.StringIO()
    write_model(model, buf)
    with pytest.raises(DataError):
        read_model(io.StringIO(buf.getvalue()[: len(buf.getvalue()) // 2]))


def test_streaming_parse_is_lazy():
    # malformed third line must not break consumption of the first two
    lines = [GOOD_LINE, GOOD_LINE, "{broken"]
    it = iter_detections(iter(line + "\n" for line in lines))
    assert next(it).image_id == "img1"
    assert next(it).image_id == "img1"
    with pytest.raises(DataError) as exc:
        next(it)
    assert "line 3" in str(exc.value)


def test_serialized_floats_round_trip_shortest_repr():
    rec = DetectionRecord(
        "i", np.array([0.1, 0.2, 0.30000000000000004, 0.4]),
        np.array([1.0 / 3.0]), np.array([2.0 / 3.0]), None,
    )
    line = serialize_detection(rec)
    again = parse_detections(io.StringIO(line))[0]
    assert again == rec
    assert serialize_detection(again) == line
