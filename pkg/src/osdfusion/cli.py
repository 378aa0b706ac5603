"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 infeasible constraint.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import DataError, InfeasibleError
from .features import FEATURE_ORDER, FeatureConfig
from .fusion import TrainingConfig, classify_records
from .interchange import (
    parse_detections,
    read_model_path,
    write_detections,
    write_ground_truth,
    write_vocabulary,
)
from .metrics import EvalReport, measure_throughput, render_report
from .synth import generate_synthetic


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _add_feature_flags(parser):
    for name in FEATURE_ORDER:
        parser.add_argument(
            f"--{name.replace('_', '-')}",
            dest=f"feat_{name}",
            action=argparse.BooleanOptionalAction,
            default=True,
            help=f"include the {name} feature",
        )


def _feature_config(args) -> FeatureConfig:
    return FeatureConfig(**{name: getattr(args, f"feat_{name}") for name in FEATURE_ORDER})


def _training_config(args) -> TrainingConfig:
    return TrainingConfig(
        hidden=tuple(int(h) for h in args.hidden.split(",") if h.strip()),
        learning_rate=args.learning_rate,
        momentum=args.momentum,
        batch_size=args.batch_size,
        epochs=args.epochs,
        patience=args.patience,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="osdfusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", parents=[], help="label detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--vocabulary", required=True)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--output", required=True)

    p = sub.add_parser("fit-gmm", help="fit per-class embedding densities on TP-ID detections")
    p.add_argument("--labeled", required=True)
    p.add_argument("--vocabulary", required=True)
    p.add_argument("--components", type=int, default=1)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)

    p = sub.add_parser("calibrate", help="fit detector and GMM temperatures")
    p.add_argument("--labeled", required=True, help="labeled calibration detections")
    p.add_argument("--vocabulary", required=True)
    p.add_argument("--density-model", default=None)
    p.add_argument("--model", required=True, help="fusion model file to create or update")

    p = sub.add_parser("build-features", help="assemble fusion feature vectors")
    p.add_argument("--labeled", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--density-model", default=None)
    p.add_argument("--output", required=True)
    p.add_argument("--prune-threshold", type=float, default=None)
    p.add_argument("--keep-config", action="store_true",
                   help="reuse the feature switches already stored in the model")
    _add_feature_flags(p)

    p = sub.add_parser("split", help="mix sources into fusion train/validation sets")
    p.add_argument("--train-features", required=True)
    p.add_argument("--test-features", required=True)
    p.add_argument("--ratio", default="1:1")
    p.add_argument("--test-train-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-output", required=True)
    p.add_argument("--val-output", required=True)
    p.add_argument("--counts-output", default=None)

    p = sub.add_parser("train-mlp", help="train the fusion classifier")
    p.add_argument("--features", required=True)
    p.add_argument("--classes", type=int, choices=(2, 3), default=3)
    p.add_argument("--model", required=True)
    p.add_argument("--val-features", default=None)
    p.add_argument("--fold-bg", action="store_true",
                   help="two-class mode: count BG rows as OOD instead of dropping them")
    p.add_argument("--hidden", default="32,32")
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("tune-thresholds", help="tune the OOD decision threshold")
    p.add_argument("--model", required=True)
    p.add_argument("--val-features", required=True)
    p.add_argument("--escape-bound", type=float, default=0.2)
    p.add_argument("--fold-bg", action="store_true")

    p = sub.add_parser("classify", help="classify raw detections")
    p.add_argument("--model", required=True)
    p.add_argument("--density-model", default=None)
    p.add_argument("--detections", required=True, help="detections file, or - for stdin")
    p.add_argument("--output", default="-")
    p.add_argument("--measure-fps", action="store_true")

    p = sub.add_parser("evaluate", help="compute the full evaluation report")
    p.add_argument("--model", required=True)
    p.add_argument("--density-model", default=None)
    p.add_argument("--labeled", required=True, help="labeled ood-test detections")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--vocabulary", required=True)
    p.add_argument("--val-features", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--osr-levels", default="0.05,0.1,0.2")
    p.add_argument("--measure-fps", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic dataset bundle")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("report", help="render tables from a stored report")
    p.add_argument("--report", required=True)
    p.add_argument("--output", default="-")

    return parser


def _open_out(path):
    if path == "-":
        return sys.stdout
    return open(path, "w", encoding="utf-8")


def _cmd_match(args):
    counts = pipeline.stage_match(
        args.detections, args.ground_truth, args.vocabulary, args.iou_threshold, args.output
    )
    print(json.dumps(counts))


def _cmd_fit_gmm(args):
    pipeline.stage_fit_gmm(
        args.labeled, args.vocabulary, args.components, args.epsilon, args.seed, args.output
    )


def _cmd_calibrate(args):
    model = pipeline.stage_calibrate(
        args.labeled, args.vocabulary, args.density_model, args.model, args.model
    )
    out = {"detector_temperature": model.detector_temperature.value}
    if model.gmm_temperature is not None:
        out["gmm_temperature"] = model.gmm_temperature.value
    print(json.dumps(out))


def _cmd_build_features(args):
    config = None if args.keep_config else _feature_config(args)
    rows = pipeline.stage_build_features(
        args.labeled, args.model, args.model, args.density_model, args.output,
        config, args.prune_threshold,
    )
    print(json.dumps({"rows": len(rows)}))


def _cmd_split(args):
    plan = pipeline.SplitPlan(
        pipeline.parse_ratio(args.ratio), args.test_train_fraction, args.seed
    )
    counts = pipeline.stage_split(
        args.train_features, args.test_features, plan,
        args.train_output, args.val_output, args.counts_output,
    )
    print(json.dumps(counts, sort_keys=True))


def _cmd_train(args):
    model = pipeline.stage_train(
        args.features, args.model, args.model, args.classes,
        _training_config(args), args.seed, args.fold_bg, args.val_features,
    )
    meta = model.training_meta
    print(json.dumps({"epochs_run": meta["epochs_run"], "final_loss": meta["train_loss"][-1]}))


def _cmd_tune(args):
    thresholds = pipeline.stage_tune(
        args.model, args.model, args.val_features, args.escape_bound, args.fold_bg
    )
    print(json.dumps(thresholds.to_payload()))


def _cmd_classify(args):
    model = read_model_path(args.model)
    density = read_model_path(args.density_model) if args.density_model else None
    if args.detections == "-":
        records = parse_detections(sys.stdin)
    else:
        with open(args.detections, "r", encoding="utf-8") as fh:
            records = parse_detections(fh)
    decisions, posteriors = classify_records(model, records, density, return_posteriors=True)
    out = _open_out(args.output)
    try:
        for record, decision, post in zip(records, decisions, posteriors):
            obj = {"image_id": record.image_id, "decision": decision}
            if decision != "SUPPRESSED":
                obj["posterior"] = [float(v) for v in post]
            out.write(json.dumps(obj) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if args.measure_fps:
        result = measure_throughput(lambda recs: classify_records(model, recs, density), records)
        print(
            json.dumps(
                {
                    "detections_per_second": result.detections_per_second,
                    "rates": result.rates,
                    "n_records": result.n_records,
                    "runs": result.runs,
                }
            ),
            file=sys.stderr,
        )


def _cmd_evaluate(args):
    report = pipeline.stage_evaluate(
        args.model, args.density_model, args.labeled, args.ground_truth, args.vocabulary,
        args.val_features, args.output_dir, args.iou_threshold,
        tuple(float(x) for x in args.osr_levels.split(",")), args.measure_fps,
    )
    print(render_report(report), end="")


def _cmd_synth(args):
    with open(args.config, "r", encoding="utf-8") as fh:
        config = pipeline.synth_config_from_flat(pipeline.parse_flat_config(fh))
    bundle = generate_synthetic(config)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "detections.jsonl", "w", encoding="utf-8") as fh:
        write_detections(bundle.detections, fh)
    with open(out / "ground_truth.jsonl", "w", encoding="utf-8") as fh:
        write_ground_truth(bundle.ground_truth, fh)
    with open(out / "vocabulary.txt", "w", encoding="utf-8") as fh:
        write_vocabulary(bundle.vocabulary, fh)
    print(json.dumps({
        "detections": len(bundle.detections),
        "ground_truth": len(bundle.ground_truth),
        "split_tag": bundle.split_tag,
    }))


def _cmd_run(args):
    config_path = Path(args.config)
    with open(config_path, "r", encoding="utf-8") as fh:
        config = pipeline.PipelineConfig.from_flat(
            pipeline.parse_flat_config(fh), config_path.parent
        )
    report = pipeline.run_pipeline(config, resume=args.resume)
    print(render_report(report), end="")


def _cmd_report(args):
    with open(args.report, "r", encoding="utf-8") as fh:
        report = EvalReport.from_payload(json.load(fh))
    out = _open_out(args.output)
    try:
        out.write(render_report(report))
    finally:
        if out is not sys.stdout:
            out.close()


_COMMANDS = {
    "match": _cmd_match,
    "fit-gmm": _cmd_fit_gmm,
    "calibrate": _cmd_calibrate,
    "build-features": _cmd_build_features,
    "split": _cmd_split,
    "train-mlp": _cmd_train,
    "tune-thresholds": _cmd_tune,
    "classify": _cmd_classify,
    "evaluate": _cmd_evaluate,
    "synth": _cmd_synth,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
