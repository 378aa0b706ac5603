"""End-to-end orchestration: flat config files, fusion train/validation
splits, pipeline stages with a hashed artifact manifest, and evaluation.

All randomness flows from one master seed through named substreams (stage
name -> seed), so editing one stage's inputs never perturbs another stage's
draws. Every artifact is a file; re-running with the same config and seed
reproduces every artifact bit for bit, which the manifest hashes verify.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import calibration_samples, fit_temperature
from .density import DensityEvaluator, fit_density_model
from .errors import DataError
from .features import (
    FEATURE_ORDER,
    FeatureConfig,
    FeatureRow,
    assemble_features_batch,
    feature_matrix,
    parse_feature_rows,
    prune,
    write_feature_rows,
)
from .fusion import (
    FusionModel,
    TrainingConfig,
    classify_records,
    forward,
    posterior,
    standardize,
    train_mlp,
    tune_thresholds,
)
from .interchange import (
    parse_detections,
    parse_ground_truth,
    parse_vocabulary,
    read_model_path,
    write_model_path,
)
from .matching import (
    COLLAPSED_ORDER,
    MatchLabel,
    label_detections,
    parse_labeled,
    write_labeled,
)
from .metrics import (
    DEFAULT_OSR_LEVELS,
    EvalReport,
    auroc,
    auroc_bd,
    average_precision,
    macro_pairwise_auroc,
    measure_throughput,
    render_report,
    roc_curve,
    tpr_at_osr,
    write_roc_csv,
)
from .synth import _SYNTH_DEFAULTS, SynthConfig, make_synth_config


def substream_seed(master_seed: int, name: str) -> int:
    """Stage-local seed derived from the master seed and the stage name."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------


def parse_flat_config(stream) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment line."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError("expected `key = value`", line_no)
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise DataError("empty key or value", line_no)
        if key in out:
            raise DataError(f"duplicate key {key!r}", line_no)
        out[key] = value
    return out


def _parse_bool(value: str, key: str) -> bool:
    low = value.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise DataError(f"config key {key!r} must be a boolean, got {value!r}")


def parse_ratio(text: str) -> tuple[float, float]:
    parts = text.split(":")
    if len(parts) != 2:
        raise DataError(f"ratio must look like `3:1`, got {text!r}")
    try:
        a, b = float(parts[0]), float(parts[1])
    except ValueError:
        raise DataError(f"ratio must be numeric, got {text!r}") from None
    if a <= 0 or b <= 0:
        raise DataError(f"ratio parts must be positive, got {text!r}")
    return a, b


def feature_config_from_names(names: str) -> FeatureConfig:
    if names.strip().lower() == "all":
        return FeatureConfig()
    wanted = [n.strip() for n in names.split(",") if n.strip()]
    unknown = [n for n in wanted if n not in FEATURE_ORDER]
    if unknown:
        raise DataError(f"unknown feature name(s): {unknown}")
    return FeatureConfig(**{name: name in wanted for name in FEATURE_ORDER})


def synth_config_from_flat(flat: dict[str, str]) -> SynthConfig:
    required = ("embedding_dim", "id_classes", "n_tp_id", "n_fp_id", "n_ood", "n_bg")
    missing = [k for k in required if k not in flat]
    if missing:
        raise DataError(f"synthetic config missing keys: {missing}")
    known = set(required) | {"seed", "split_tag"} | set(_SYNTH_DEFAULTS)
    unknown = set(flat) - known
    if unknown:
        raise DataError(f"unknown synthetic config keys: {sorted(unknown)}")
    overrides = {k: float(flat[k]) for k in _SYNTH_DEFAULTS if k in flat}
    return make_synth_config(
        embedding_dim=int(flat["embedding_dim"]),
        id_classes=tuple(n.strip() for n in flat["id_classes"].split(",") if n.strip()),
        n_tp_id=int(flat["n_tp_id"]),
        n_fp_id=int(flat["n_fp_id"]),
        n_ood=int(flat["n_ood"]),
        n_bg=int(flat["n_bg"]),
        seed=int(flat.get("seed", "0")),
        split_tag=flat.get("split_tag", "ood-test"),
        **overrides,
    )


@dataclass
class PipelineConfig:
    vocabulary: Path
    output_dir: Path
    detections: dict[str, Path]
    ground_truth: dict[str, Path]
    seed: int = 0
    iou_threshold: float = 0.5
    components: int = 1
    epsilon: float = 1e-6
    prune_threshold: float = 0.2
    features: FeatureConfig = field(default_factory=FeatureConfig)
    classes: int = 3
    fold_bg: bool = False
    id_ratio: tuple[float, float] = (1.0, 1.0)
    test_train_fraction: float = 0.5
    escape_bound: float = 0.2
    training: TrainingConfig = field(default_factory=TrainingConfig)
    osr_levels: tuple[float, ...] = DEFAULT_OSR_LEVELS
    measure_fps: bool = False

    @classmethod
    def from_flat(cls, flat: dict[str, str], base_dir: Path | None = None) -> "PipelineConfig":
        base = Path(base_dir) if base_dir else Path(".")

        def path_of(key):
            if key not in flat:
                raise DataError(f"pipeline config missing key {key!r}")
            p = Path(flat[key])
            return p if p.is_absolute() else base / p

        detections, ground_truth = {}, {}
        for tag, suffix in (
            ("detector-train", "detector_train"),
            ("calibration", "calibration"),
            ("ood-test", "ood_test"),
        ):
            detections[tag] = path_of(f"detections_{suffix}")
            ground_truth[tag] = path_of(f"ground_truth_{suffix}")

        known = {
            "vocabulary", "output_dir", "seed", "iou_threshold", "components",
            "epsilon", "prune_threshold", "features", "classes", "fold_bg",
            "id_ratio", "test_train_fraction", "escape_bound", "hidden",
            "learning_rate", "momentum", "batch_size", "epochs", "patience",
            "osr_levels", "measure_fps",
        } | {f"detections_{s}" for s in ("detector_train", "calibration", "ood_test")} \
          | {f"ground_truth_{s}" for s in ("detector_train", "calibration", "ood_test")}
        unknown = set(flat) - known
        if unknown:
            raise DataError(f"unknown pipeline config keys: {sorted(unknown)}")

        training = TrainingConfig(
            hidden=tuple(int(h) for h in flat.get("hidden", "32,32").split(",")),
            learning_rate=float(flat.get("learning_rate", "0.01")),
            momentum=float(flat.get("momentum", "0.9")),
            batch_size=int(flat.get("batch_size", "256")),
            epochs=int(flat.get("epochs", "200")),
            patience=int(flat.get("patience", "20")),
        )
        return cls(
            vocabulary=path_of("vocabulary"),
            output_dir=path_of("output_dir"),
            detections=detections,
            ground_truth=ground_truth,
            seed=int(flat.get("seed", "0")),
            iou_threshold=float(flat.get("iou_threshold", "0.5")),
            components=int(flat.get("components", "1")),
            epsilon=float(flat.get("epsilon", "1e-6")),
            prune_threshold=float(flat.get("prune_threshold", "0.2")),
            features=feature_config_from_names(flat.get("features", "all")),
            classes=int(flat.get("classes", "3")),
            fold_bg=_parse_bool(flat.get("fold_bg", "false"), "fold_bg"),
            id_ratio=parse_ratio(flat.get("id_ratio", "1:1")),
            test_train_fraction=float(flat.get("test_train_fraction", "0.5")),
            escape_bound=float(flat.get("escape_bound", "0.2")),
            training=training,
            osr_levels=tuple(
                float(x) for x in flat.get("osr_levels", "0.05,0.1,0.2").split(",")
            ),
            measure_fps=_parse_bool(flat.get("measure_fps", "false"), "measure_fps"),
        )


# ---------------------------------------------------------------------------
# fusion dataset split
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    """How to mix the detector-train source with the OOD-test source.

    id_ratio is train-source : test-source for both the ID and BG roles; OOD
    rows come from the test source only, and the validation split contains
    only test-source rows (test_train_fraction controls how much of the test
    source is available to training, the remainder validates).
    """

    id_ratio: tuple[float, float] = (1.0, 1.0)
    test_train_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.id_ratio[0] <= 0 or self.id_ratio[1] <= 0:
            raise DataError("split ratio must be positive")
        if not 0.0 < self.test_train_fraction < 1.0:
            raise DataError("test_train_fraction must lie in (0, 1)")


def _take(rows, count, rng, counts, role, source):
    """Deterministically subsample `count` of `rows`, recording usage."""
    picked = list(rows)
    if count < len(rows):
        order = rng.permutation(len(rows))[:count]
        picked = [rows[i] for i in sorted(order)]
        print(
            f"warning: downsampled {role} from {source} source "
            f"({len(rows)} -> {count}) to satisfy the ratio",
            file=sys.stderr,
        )
    counts[f"{role}/{source}/used"] = len(picked)
    counts[f"{role}/{source}/unused"] = len(rows) - len(picked)
    return picked


def build_fusion_dataset(train_source_rows, test_source_rows, plan: SplitPlan):
    """Mix the two sources into (train rows, validation rows, counts).

    Rows are FeatureRows; the returned rows carry their source tag.
    """
    rng = np.random.default_rng(plan.seed)
    train_source_rows = list(train_source_rows)
    test_source_rows = list(test_source_rows)
    for row in train_source_rows:
        row.source = "detector-train"
    for row in test_source_rows:
        row.source = "ood-test"

    # stratified test-source partition: a share for training, the rest for
    # validation (validation therefore holds only test-source rows)
    test_pool: list[FeatureRow] = []
    val_rows: list[FeatureRow] = []
    for label in COLLAPSED_ORDER:
        rows = [r for r in test_source_rows if r.label == label]
        if not rows:
            continue
        order = rng.permutation(len(rows))
        n_train = int(round(plan.test_train_fraction * len(rows)))
        chosen = set(order[:n_train].tolist())
        test_pool.extend(rows[i] for i in range(len(rows)) if i in chosen)
        val_rows.extend(rows[i] for i in range(len(rows)) if i not in chosen)

    counts: dict[str, int] = {}
    a, b = plan.id_ratio
    train_rows: list[FeatureRow] = []
    for role in ("ID", "BG"):
        from_train = [r for r in train_source_rows if r.label == role]
        from_test = [r for r in test_pool if r.label == role]
        if not from_train:
            raise DataError(f"required source empty: no {role} rows in the detector-train source")
        if not from_test:
            raise DataError(f"required source empty: no {role} rows in the test source")
        scale = min(len(from_train) / a, len(from_test) / b)
        n_train = int(scale * a)
        n_test = int(scale * b)
        train_rows.extend(_take(from_train, n_train, rng, counts, role, "detector-train"))
        train_rows.extend(_take(from_test, n_test, rng, counts, role, "ood-test"))

    ood_rows = [r for r in test_pool if r.label == "OOD"]
    if not ood_rows:
        raise DataError("required source empty: no OOD rows in the test source")
    counts["OOD/ood-test/used"] = len(ood_rows)
    counts["OOD/ood-test/unused"] = 0
    train_rows.extend(ood_rows)

    stray_ood = [r for r in train_source_rows if r.label == "OOD"]
    if stray_ood:
        counts["OOD/detector-train/used"] = 0
        counts["OOD/detector-train/unused"] = len(stray_ood)

    order = rng.permutation(len(train_rows))
    train_rows = [train_rows[i] for i in order]
    for label in COLLAPSED_ORDER:
        counts[f"{label}/validation"] = sum(1 for r in val_rows if r.label == label)
    return train_rows, val_rows, counts


# ---------------------------------------------------------------------------
# pipeline stages (path level, shared by the CLI and `run`)
# ---------------------------------------------------------------------------


def _read_vocabulary(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_vocabulary(fh)


def _read_labeled(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_labeled(fh)


def _read_features(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_feature_rows(fh)


def stage_match(detections_path, gt_path, vocabulary_path, iou_threshold, output_path):
    with open(detections_path, "r", encoding="utf-8") as fh:
        detections = parse_detections(fh)
    with open(gt_path, "r", encoding="utf-8") as fh:
        ground_truth = parse_ground_truth(fh)
    vocabulary = _read_vocabulary(vocabulary_path)
    labeled = label_detections(detections, ground_truth, vocabulary, iou_threshold)
    with open(output_path, "w", encoding="utf-8") as fh:
        write_labeled(labeled, fh)
    counts = {label.value: 0 for label in MatchLabel}
    for entry in labeled:
        counts[entry.label.value] += 1
    return counts


def stage_fit_gmm(labeled_path, vocabulary_path, components, epsilon, seed, output_path):
    labeled = _read_labeled(labeled_path)
    vocabulary = _read_vocabulary(vocabulary_path)
    model = fit_density_model(labeled, vocabulary, components, epsilon, seed)
    write_model_path(model, output_path)
    return model


def _load_or_new_fusion(model_path) -> FusionModel:
    path = Path(model_path)
    if path.exists():
        model = read_model_path(path)
        if not isinstance(model, FusionModel):
            raise DataError(f"{path} does not contain a fusion model")
        return model
    return FusionModel()


def stage_calibrate(labeled_path, vocabulary_path, density_path, model_in, model_out):
    labeled = _read_labeled(labeled_path)
    vocabulary = _read_vocabulary(vocabulary_path)
    logits, labels = calibration_samples(labeled, vocabulary)
    model = _load_or_new_fusion(model_in)
    model.detector_temperature = fit_temperature(logits, labels, "detector_logits")
    if density_path is not None:
        density = read_model_path(density_path)
        evaluator = DensityEvaluator(density)
        embeddings = np.stack(
            [e.record.embedding for e in labeled if e.label is MatchLabel.TP_ID]
        )
        gmm_logits = evaluator.log_likelihoods(embeddings)
        model.gmm_temperature = fit_temperature(gmm_logits, labels, "gmm_logits")
    write_model_path(model, model_out)
    return model


def stage_build_features(
    labeled_path,
    model_in,
    model_out,
    density_path,
    output_path,
    feature_config: FeatureConfig | None = None,
    prune_threshold: float | None = None,
):
    labeled = _read_labeled(labeled_path)
    model = _load_or_new_fusion(model_in)
    if feature_config is not None:
        model.feature_config = feature_config
    elif model.feature_config is None:
        model.feature_config = FeatureConfig()
    if prune_threshold is not None:
        model.prune_threshold = prune_threshold
    config = model.feature_config

    evaluator = None
    if config.needs_density:
        if density_path is None:
            raise DataError(
                "feature configuration requires GMM features; pass the density model artifact"
            )
        evaluator = DensityEvaluator(read_model_path(density_path))

    retained = prune(labeled, model.prune_threshold)
    kept = {id(entry) for entry in retained}
    retained_idx = [i for i, entry in enumerate(labeled) if id(entry) in kept]
    matrix = assemble_features_batch(
        [e.record for e in retained],
        config,
        evaluator,
        model.detector_temperature,
        model.gmm_temperature,
    )
    rows = [
        FeatureRow(idx, matrix[k], entry.collapsed_label)
        for k, (idx, entry) in enumerate(zip(retained_idx, retained))
    ]
    with open(output_path, "w", encoding="utf-8") as fh:
        write_feature_rows(rows, fh)
    if model_out is not None:
        write_model_path(model, model_out)
    return rows


def stage_split(
    train_features_path, test_features_path, plan: SplitPlan,
    train_out, val_out, counts_out=None,
):
    train_rows = _read_features(train_features_path)
    test_rows = _read_features(test_features_path)
    fused_train, fused_val, counts = build_fusion_dataset(train_rows, test_rows, plan)
    with open(train_out, "w", encoding="utf-8") as fh:
        write_feature_rows(fused_train, fh)
    with open(val_out, "w", encoding="utf-8") as fh:
        write_feature_rows(fused_val, fh)
    if counts_out is not None:
        with open(counts_out, "w", encoding="utf-8") as fh:
            json.dump(counts, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return counts


def _rows_for_k(rows, n_classes, fold_bg):
    """Map collapsed rows to K-class training arrays. K=2 drops BG rows
    unless fold_bg, which relabels them OOD."""
    if n_classes == 3:
        kept = rows
    elif fold_bg:
        kept = rows
    else:
        kept = [r for r in rows if r.label != "BG"]
    if not kept:
        raise DataError("no rows left for training after class filtering")
    x = np.stack([r.values for r in kept])
    y = []
    for r in kept:
        idx = COLLAPSED_ORDER.index(r.label)
        if n_classes == 2 and idx == 2:
            idx = 1
        y.append(idx)
    return x, np.asarray(y, dtype=np.int64)


def stage_train(
    train_features_path, model_in, model_out, n_classes, training: TrainingConfig,
    seed, fold_bg=False, val_features_path=None,
):
    rows = _read_features(train_features_path)
    x, y = _rows_for_k(rows, n_classes, fold_bg)
    validation = None
    if val_features_path is not None:
        val_rows = _read_features(val_features_path)
        validation = _rows_for_k(val_rows, n_classes, fold_bg)
    model = _load_or_new_fusion(model_in)
    params, meta = train_mlp(x, y, n_classes, training, seed, validation)
    model.mlp = params
    model.seed = seed
    model.training_meta = meta
    write_model_path(model, model_out)
    return model


def stage_tune(model_in, model_out, val_features_path, escape_bound, fold_bg=False):
    model = _load_or_new_fusion(model_in)
    if model.mlp is None:
        raise DataError("tune-thresholds needs a trained fusion model")
    rows = _read_features(val_features_path)
    x, y = _rows_for_k(rows, model.mlp.n_classes, fold_bg)
    logits = forward(model.mlp, standardize(model.mlp, x))
    model.thresholds = tune_thresholds(logits, y, escape_bound)
    write_model_path(model, model_out)
    return model.thresholds


def evaluate_run(
    model: FusionModel,
    density,
    labeled_test,
    ground_truth,
    vocabulary,
    val_rows,
    iou_threshold: float = 0.5,
    osr_levels=DEFAULT_OSR_LEVELS,
    measure_fps: bool = False,
):
    """EvalReport plus ROC curves for one trained model."""
    model.require_complete()
    evaluator = DensityEvaluator(density) if density is not None else None

    _, x, y = feature_matrix(val_rows)
    p = posterior(model.mlp, standardize(model.mlp, x))
    id_scores = p[y == 0, 0]
    ood_scores = p[y == 1, 0]
    bg_scores = p[y == 2, 0]
    if id_scores.size == 0 or ood_scores.size == 0:
        raise DataError("validation split must contain ID and OOD rows")

    report_auroc = auroc(id_scores, ood_scores)
    report_bd = auroc_bd(id_scores, ood_scores, bg_scores)
    curves = {
        "id_ood": roc_curve(id_scores, ood_scores),
        "id_oodbg": roc_curve(id_scores, np.concatenate([ood_scores, bg_scores])),
    }
    macro = per_pair = None
    if model.mlp.n_classes == 3 and bg_scores.size:
        macro, per_pair = macro_pairwise_auroc(p, y)

    counts: dict[str, int] = {label.value: 0 for label in MatchLabel}
    for row in val_rows:
        counts[labeled_test[row.index].label.value] += 1

    records = [entry.record for entry in labeled_test]
    decisions = classify_records(model, records, evaluator)
    closed = average_precision(records, ground_truth, vocabulary, iou_threshold, open_set=False)
    opened = average_precision(
        records, ground_truth, vocabulary, iou_threshold, open_set=True, decisions=decisions
    )

    fps = None
    if measure_fps:
        fps = measure_throughput(
            lambda recs: classify_records(model, recs, evaluator), records
        ).to_payload()

    report = EvalReport(
        auroc=report_auroc,
        auroc_bd=report_bd,
        tpr_at_osr=tpr_at_osr(id_scores, ood_scores, osr_levels),
        macro_pairwise_auroc=macro,
        per_pair_auroc=per_pair,
        closed_set_map=closed.mean_ap,
        open_set_map=opened.mean_ap,
        fps=fps,
        counts=counts,
    )
    return report, curves


def stage_evaluate(
    model_path, density_path, labeled_path, gt_path, vocabulary_path,
    val_features_path, output_dir, iou_threshold=0.5, osr_levels=DEFAULT_OSR_LEVELS,
    measure_fps=False,
):
    model = read_model_path(model_path)
    density = read_model_path(density_path) if density_path else None
    labeled = _read_labeled(labeled_path)
    with open(gt_path, "r", encoding="utf-8") as fh:
        ground_truth = parse_ground_truth(fh)
    vocabulary = _read_vocabulary(vocabulary_path)
    val_rows = _read_features(val_features_path)

    report, curves = evaluate_run(
        model, density, labeled, ground_truth, vocabulary, val_rows,
        iou_threshold, osr_levels, measure_fps,
    )
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_payload(), fh, indent=1)
        fh.write("\n")
    for name, curve in curves.items():
        with open(out / f"roc_{name}.csv", "w", encoding="utf-8") as fh:
            write_roc_csv(curve, fh)
    with open(out / "tables.txt", "w", encoding="utf-8") as fh:
        fh.write(render_report(report))
    return report


# ---------------------------------------------------------------------------
# full pipeline with manifest
# ---------------------------------------------------------------------------


def run_pipeline(config: PipelineConfig, resume: bool = False) -> EvalReport:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    config_sha = hashlib.sha256(
        json.dumps(_config_fingerprint(config), sort_keys=True).encode()
    ).hexdigest()

    manifest = {"config_sha": config_sha, "stages": {}, "counts": {}}
    prior = {}
    if resume and manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as fh:
            prior = json.load(fh)
        if prior.get("config_sha") != config_sha:
            raise DataError("manifest belongs to a different config; cannot resume")
        manifest["counts"] = prior.get("counts", {})

    chain_intact = resume

    def save_manifest():
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def run_stage(name, outputs, fn):
        nonlocal chain_intact
        outputs = [Path(p) for p in outputs]
        recorded = prior.get("stages", {}).get(name)
        if chain_intact and recorded:
            ok = True
            for p in outputs:
                key = p.name
                if key not in recorded:
                    ok = False
                    break
                if not p.exists():
                    ok = False
                    break
                if sha256_file(p) != recorded[key]:
                    raise DataError(f"hash mismatch on resume for artifact {p}")
            if ok:
                manifest["stages"][name] = recorded
                save_manifest()
                print(f"[{name}] resumed from existing artifacts", file=sys.stderr)
                return False
        chain_intact = False
        fn()
        manifest["stages"][name] = {p.name: sha256_file(p) for p in outputs}
        save_manifest()
        print(f"[{name}] done", file=sys.stderr)
        return True

    labeled_paths = {tag: out / f"labeled_{tag}.jsonl" for tag in config.detections}
    density_path = out / "density.json"
    fusion_calibrated = out / "fusion_calibrated.json"
    fusion_featured = out / "fusion_featured.json"
    fusion_trained = out / "fusion_trained.json"
    fusion_final = out / "fusion.json"
    features_train = out / "features_detector-train.jsonl"
    features_test = out / "features_ood-test.jsonl"
    fused_train = out / "fusion_train.jsonl"
    fused_val = out / "fusion_val.jsonl"
    split_counts = out / "split_counts.json"

    for tag in ("detector-train", "calibration", "ood-test"):
        def do_match(tag=tag):
            counts = stage_match(
                config.detections[tag],
                config.ground_truth[tag],
                config.vocabulary,
                config.iou_threshold,
                labeled_paths[tag],
            )
            manifest["counts"][f"match/{tag}"] = counts

        run_stage(f"match-{tag}", [labeled_paths[tag]], do_match)

    run_stage(
        "fit-gmm",
        [density_path],
        lambda: stage_fit_gmm(
            labeled_paths["detector-train"],
            config.vocabulary,
            config.components,
            config.epsilon,
            substream_seed(config.seed, "fit-gmm"),
            density_path,
        ),
    )

    run_stage(
        "calibrate",
        [fusion_calibrated],
        lambda: stage_calibrate(
            labeled_paths["calibration"],
            config.vocabulary,
            density_path if config.features.needs_density else None,
            fusion_calibrated,
            fusion_calibrated,
        ),
    )

    run_stage(
        "build-features-detector-train",
        [features_train, fusion_featured],
        lambda: stage_build_features(
            labeled_paths["detector-train"],
            fusion_calibrated,
            fusion_featured,
            density_path,
            features_train,
            config.features,
            config.prune_threshold,
        ),
    )
    run_stage(
        "build-features-ood-test",
        [features_test],
        lambda: stage_build_features(
            labeled_paths["ood-test"],
            fusion_featured,
            None,
            density_path,
            features_test,
        ),
    )

    def do_split():
        counts = stage_split(
            features_train,
            features_test,
            SplitPlan(
                config.id_ratio,
                config.test_train_fraction,
                substream_seed(config.seed, "split"),
            ),
            fused_train,
            fused_val,
            split_counts,
        )
        manifest["counts"]["split"] = counts

    run_stage("split", [fused_train, fused_val, split_counts], do_split)

    run_stage(
        "train-mlp",
        [fusion_trained],
        lambda: stage_train(
            fused_train,
            fusion_featured,
            fusion_trained,
            config.classes,
            config.training,
            substream_seed(config.seed, "train-mlp"),
            config.fold_bg,
            fused_val,
        ),
    )

    run_stage(
        "tune-thresholds",
        [fusion_final],
        lambda: stage_tune(
            fusion_trained, fusion_final, fused_val, config.escape_bound, config.fold_bg
        ),
    )

    report_files = [out / "report.json", out / "roc_id_ood.csv", out / "roc_id_oodbg.csv",
                    out / "tables.txt"]
    run_stage(
        "evaluate",
        report_files,
        lambda: stage_evaluate(
            fusion_final,
            density_path if config.features.needs_density else None,
            labeled_paths["ood-test"],
            config.ground_truth["ood-test"],
            config.vocabulary,
            fused_val,
            out,
            config.iou_threshold,
            config.osr_levels,
            config.measure_fps,
        ),
    )

    with open(out / "report.json", "r", encoding="utf-8") as fh:
        return EvalReport.from_payload(json.load(fh))


def _config_fingerprint(config: PipelineConfig) -> dict:
    return {
        "vocabulary": str(config.vocabulary),
        "detections": {k: str(v) for k, v in config.detections.items()},
        "ground_truth": {k: str(v) for k, v in config.ground_truth.items()},
        "seed": config.seed,
        "iou_threshold": config.iou_threshold,
        "components": config.components,
        "epsilon": config.epsilon,
        "prune_threshold": config.prune_threshold,
        "features": config.features.to_payload(),
        "classes": config.classes,
        "fold_bg": config.fold_bg,
        "id_ratio": list(config.id_ratio),
        "test_train_fraction": config.test_train_fraction,
        "escape_bound": config.escape_bound,
        "training": vars(config.training) | {"hidden": list(config.training.hidden)},
        "osr_levels": list(config.osr_levels),
    }
