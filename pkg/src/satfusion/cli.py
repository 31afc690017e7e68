"""Command-line pipeline driver.

Exit codes are a stable contract: 0 success, 1 usage error, 2 data error
(unreadable/invalid input, failed joins), 3 internal error.  Every subcommand
writes a run manifest recording the resolved configuration, input and output
paths, seed, tool version, and wall-clock duration — enough to reproduce the
run exactly.  All randomness enters through explicit seeds.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .ensemble import (
    PredictionRecord,
    aggregate_sequence,
    classify_matrix,
    ensemble_by_image,
    group_into_sequences,
    read_predictions_jsonl,
    write_classification_csv,
    write_predictions_jsonl,
)
from .errors import DataError, ParseError, SatFusionError, SchemaError, ValidationError
from .evaluation import (
    evaluate_pairs,
    format_report_text,
    label_maps,
    read_labels_csv,
    write_confusion_csv,
    write_report_json,
)
from .features import (
    MetadataFeatureExtractor,
    N_FEATURES,
    NormalizationSpec,
    read_features_csv,
    write_features_csv,
)
from .fusion import (
    FusionNetClassifier,
    N_INPUTS,
    forward,
    load_weights,
    save_weights,
    write_history_csv,
)
from .image import plan_prep, apply_prep, read_raster, write_raster
from .metadata import (
    ClassRegistry,
    N_CLASSES,
    default_registry,
    load_class_registry,
    parse_metadata,
)
from .synth import SynthConfig, generate_dataset, write_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

RASTER_SUFFIX = ".ras"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the exit-code contract."""

    def error(self, message):
        raise _UsageError(message)


@dataclass
class RunManifest:
    """Everything needed to reproduce one CLI run."""

    subcommand: str
    config: dict
    inputs: list[str]
    outputs: list[str]
    seed: int | None
    version: str
    duration_s: float

    def write(self, path: str | Path) -> None:
        obj = {
            "subcommand": self.subcommand,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "version": self.version,
            "duration_s": self.duration_s,
        }
        Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _manifest_path(args, primary_out: str | Path) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    primary = Path(primary_out)
    if primary.is_dir():
        return primary / "run_manifest.json"
    return Path(str(primary) + ".run.json")


def _finish(args, subcommand: str, config: dict, inputs: Iterable[str | Path],
            outputs: Iterable[str | Path], seed: int | None, started: float,
            primary_out: str | Path) -> None:
    manifest = RunManifest(
        subcommand=subcommand,
        config=config,
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        seed=seed,
        version=__version__,
        duration_s=time.monotonic() - started,
    )
    manifest.write(_manifest_path(args, primary_out))


def _load_registry(classes_path: str | None, weights_path: str | None) -> ClassRegistry:
    if classes_path is not None:
        return load_class_registry(classes_path, weights_path)
    registry = default_registry()
    if weights_path is None:
        return registry
    try:
        mapping = json.loads(Path(weights_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{weights_path}: malformed weights JSON: {e.msg}", offset=e.pos) from None
    if not isinstance(mapping, dict):
        raise SchemaError("class weights file must map label -> weight")
    unknown = sorted(set(mapping) - set(registry.labels))
    if unknown:
        raise ValidationError(f"class weights name unknown labels: {unknown}")
    return ClassRegistry(
        labels=registry.labels,
        weights=tuple(float(mapping.get(label, 1.0)) for label in registry.labels),
    )


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    started = time.monotonic()
    config = SynthConfig.from_json_file(args.config)
    if args.seed is not None:
        config = SynthConfig.from_dict({**config.to_dict(), "seed": args.seed})
    dataset = generate_dataset(config)
    paths = write_dataset(dataset, args.out_dir)
    print(f"wrote {len(dataset.records)} records, {len(dataset.model_ids)} models "
          f"to {args.out_dir}")
    _finish(args, "synth", config.to_dict(), [args.config], sorted(paths.values()),
            config.seed, started, args.out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract


def cmd_extract(args) -> int:
    started = time.monotonic()
    spec = (NormalizationSpec.from_json_file(args.norm_spec)
            if args.norm_spec else NormalizationSpec.default())
    extractor = MetadataFeatureExtractor(
        norm_spec=spec, box_mode=args.box_mode, context_factor=args.context_factor
    )
    rejected = 0

    def rows():
        nonlocal rejected
        with open(args.metadata, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    meta = parse_metadata(line)
                    vec = extractor.transform([meta])[0]
                except SatFusionError as e:
                    if args.strict:
                        raise type(e)(f"{args.metadata}:{lineno}: {e}") from None
                    print(f"{args.metadata}:{lineno}: rejected: {e}", file=sys.stderr)
                    rejected += 1
                    continue
                yield meta.image_id, vec

    written = write_features_csv(args.out, rows())
    _finish(args, "extract",
            {"norm_spec": args.norm_spec, "box_mode": args.box_mode,
             "context_factor": args.context_factor, "strict": args.strict,
             "written": written, "rejected": rejected},
            [args.metadata] + ([args.norm_spec] if args.norm_spec else []),
            [args.out], None, started, args.out)
    if rejected:
        print(f"rejected {rejected} records", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# prep


def cmd_prep(args) -> int:
    started = time.monotonic()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rasters_dir = Path(args.rasters_dir)
    failures: list[dict] = []
    outputs: list[str] = []
    prepared = 0

    with open(args.metadata, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            meta = parse_metadata(line)
            src = rasters_dir / (meta.image_id + RASTER_SUFFIX)
            try:
                raster = read_raster(src)
                plan = plan_prep(meta.box, args.mode, args.context_factor,
                                 args.target_size, meta.img_width_px, meta.img_height_px)
                prepped = apply_prep(raster, plan)
            except (OSError, SatFusionError) as e:
                failures.append({"image_id": meta.image_id, "reason": str(e)})
                continue
            out_raster = out_dir / (meta.image_id + RASTER_SUFFIX)
            out_plan = out_dir / (meta.image_id + ".plan.json")
            write_raster(out_raster, prepped)
            out_plan.write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")
            outputs.extend([str(out_raster), str(out_plan)])
            prepared += 1

    failures_path = out_dir / "failures.jsonl"
    with open(failures_path, "w", encoding="utf-8") as fh:
        for entry in failures:
            fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
    _finish(args, "prep",
            {"mode": args.mode, "context_factor": args.context_factor,
             "target_size": args.target_size, "prepared": prepared,
             "failed": len(failures)},
            [args.metadata, args.rasters_dir], outputs + [str(failures_path)],
            None, started, out_dir)
    if failures:
        print(f"{len(failures)} records failed (see {failures_path})", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / predict


_TRAIN_CONFIG_KEYS = {
    "hidden_units", "dropout_rate", "learning_rate", "batch_size", "max_epochs",
    "patience", "min_delta", "validation_fraction", "seed",
}


def _load_train_params(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: malformed train config: {e.msg}", offset=e.pos) from None
    if not isinstance(obj, dict):
        raise SchemaError("train config must be a JSON object")
    unknown = sorted(set(obj) - _TRAIN_CONFIG_KEYS)
    if unknown:
        raise SchemaError(f"train config has unknown fields: {unknown}")
    return obj


def _feature_index(ids: Sequence[str]) -> dict[str, int]:
    index: dict[str, int] = {}
    for i, image_id in enumerate(ids):
        if image_id in index:
            raise DataError(f"duplicate feature row for image {image_id!r}")
        index[image_id] = i
    return index


def _fusion_matrix(records: Sequence[PredictionRecord], feat_index: dict[str, int],
                   F: np.ndarray) -> np.ndarray:
    missing = sorted({r.image_id for r in records if r.image_id not in feat_index})
    if missing:
        shown = ", ".join(missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        raise DataError(f"{len(missing)} prediction image_ids missing from features: {shown}{more}")
    X = np.empty((len(records), N_INPUTS), dtype=np.float64)
    for i, rec in enumerate(records):
        X[i, :N_CLASSES] = rec.probs
        X[i, N_CLASSES:] = F[feat_index[rec.image_id]]
    return X


def _group_by_model(records: Iterable[PredictionRecord]) -> dict[str, list[PredictionRecord]]:
    groups: dict[str, list[PredictionRecord]] = {}
    for rec in records:
        groups.setdefault(rec.model_id, []).append(rec)
    return groups


def cmd_train(args) -> int:
    started = time.monotonic()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = _load_train_params(args.config)
    if args.seed is not None:
        params["seed"] = args.seed

    feature_ids, F = read_features_csv(args.features)
    feat_index = _feature_index(feature_ids)
    class_of, _, _ = label_maps(read_labels_csv(args.labels))

    groups: dict[str, list[PredictionRecord]] = {}
    for path in args.predictions:
        for model_id, recs in _group_by_model(read_predictions_jsonl(path)).items():
            groups.setdefault(model_id, []).extend(recs)

    outputs: list[str] = []
    for model_id, records in groups.items():
        unlabeled = sorted({r.image_id for r in records if r.image_id not in class_of})
        if unlabeled:
            shown = ", ".join(unlabeled[:10])
            more = "" if len(unlabeled) <= 10 else f" (+{len(unlabeled) - 10} more)"
            raise DataError(
                f"model {model_id!r}: {len(unlabeled)} image_ids missing from labels: {shown}{more}"
            )
        X = _fusion_matrix(records, feat_index, F)
        y = np.array([class_of[r.image_id] for r in records], dtype=np.int64)
        clf = FusionNetClassifier(**params)
        clf.fit(X, y)
        weights_path = out_dir / f"weights_{model_id}.bin"
        history_path = out_dir / f"history_{model_id}.csv"
        save_weights(clf.net_, weights_path)
        write_history_csv(history_path, clf.history_)
        outputs.extend([str(weights_path), str(history_path)])
        last = clf.history_[-1]
        print(f"{model_id}: {len(records)} records, {len(clf.history_)} epochs, "
              f"best val loss {min(h.val_loss for h in clf.history_):.6f}, "
              f"final val acc {last.val_acc:.4f}")

    _finish(args, "train",
            {"config_file": args.config, "params": params, "models": sorted(groups)},
            [args.features, args.labels, *args.predictions], outputs,
            params.get("seed"), started, out_dir)
    return EXIT_OK


def cmd_predict(args) -> int:
    started = time.monotonic()
    net = load_weights(args.weights)
    feature_ids, F = read_features_csv(args.features)
    feat_index = _feature_index(feature_ids)
    records = read_predictions_jsonl(args.predictions)
    if not records:
        raise DataError(f"{args.predictions}: no prediction records")
    models = sorted({r.model_id for r in records})
    if len(models) > 1:
        raise DataError(f"{args.predictions} mixes models {models}; one model per file")
    X = _fusion_matrix(records, feat_index, F)
    fused = forward(net, X, mode="infer")
    out_model_id = args.out_model_id or records[0].model_id
    write_predictions_jsonl(
        args.out,
        (PredictionRecord(rec.image_id, out_model_id, fused[i])
         for i, rec in enumerate(records)),
    )
    _finish(args, "predict",
            {"weights": args.weights, "out_model_id": out_model_id, "n_records": len(records)},
            [args.features, args.predictions, args.weights], [args.out],
            None, started, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ensemble / evaluate


def cmd_ensemble(args) -> int:
    started = time.monotonic()
    registry = _load_registry(args.classes, None)
    records: list[PredictionRecord] = []
    for path in args.predictions:
        records.extend(read_predictions_jsonl(path))
    image_ids, mat, model_ids = ensemble_by_image(records)

    outputs: list[str] = []
    if args.out_probs:
        write_predictions_jsonl(
            args.out_probs,
            (PredictionRecord(image_id, "ensemble", mat[i])
             for i, image_id in enumerate(image_ids)),
        )
        outputs.append(args.out_probs)

    if args.sequences:
        _, sequence_of, _ = label_maps(read_labels_csv(args.sequences))
        seqs = group_into_sequences(image_ids, mat, sequence_of)
        rows = []
        for seq in seqs:
            avg = np.stack(seq.vectors).mean(axis=0)
            cls = int(classify_matrix(avg[None, :], args.threshold)[0])
            rows.append((seq.sequence_id, cls, registry.labels[cls], float(avg.max())))
    else:
        classes = classify_matrix(mat, args.threshold)
        rows = [
            (image_id, int(classes[i]), registry.labels[int(classes[i])], float(mat[i].max()))
            for i, image_id in enumerate(image_ids)
        ]
    write_classification_csv(args.out_csv, rows)
    outputs.append(args.out_csv)

    _finish(args, "ensemble",
            {"threshold": args.threshold, "sequences": args.sequences,
             "models": list(model_ids), "n_images": len(image_ids)},
            list(args.predictions) + ([args.sequences] if args.sequences else []),
            outputs, None, started, args.out_csv)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.monotonic()
    registry = _load_registry(args.classes, args.class_weights)
    records = read_predictions_jsonl(args.probs)
    if not records:
        raise DataError(f"{args.probs}: no prediction records")
    seen: set[str] = set()
    for rec in records:
        if rec.image_id in seen:
            raise DataError(f"{args.probs}: image {rec.image_id!r} appears more than once")
        seen.add(rec.image_id)
    class_of, sequence_of, seq_class = label_maps(read_labels_csv(args.labels))
    unlabeled = sorted(seen - set(class_of))
    if unlabeled:
        shown = ", ".join(unlabeled[:10])
        more = "" if len(unlabeled) <= 10 else f" (+{len(unlabeled) - 10} more)"
        raise DataError(f"{len(unlabeled)} image_ids missing from labels: {shown}{more}")

    if args.sequences:
        image_ids = [rec.image_id for rec in records]
        mat = np.stack([rec.probs for rec in records])
        seqs = group_into_sequences(image_ids, mat, sequence_of)
        pairs = []
        for seq in seqs:
            avg = np.stack(seq.vectors).mean(axis=0)
            predicted = int(classify_matrix(avg[None, :], args.threshold)[0])
            pairs.append((seq_class[seq.sequence_id], predicted))
    else:
        mat = np.stack([rec.probs for rec in records])
        classes = classify_matrix(mat, args.threshold)
        pairs = [(class_of[rec.image_id], int(classes[i])) for i, rec in enumerate(records)]

    report, confusion = evaluate_pairs(pairs, weights=registry.weights)
    write_report_json(args.out_report, report)
    outputs = [args.out_report]
    if args.out_text:
        Path(args.out_text).write_text(
            format_report_text(report, registry.labels), encoding="utf-8"
        )
        outputs.append(args.out_text)
    if args.out_confusion:
        write_confusion_csv(args.out_confusion, confusion, registry.labels)
        outputs.append(args.out_confusion)
    print(f"records {report.n_records}  accuracy {report.accuracy:.4f}  "
          f"weighted F1 {report.weighted_f1:.4f}  score {report.score}")

    _finish(args, "evaluate",
            {"threshold": args.threshold, "sequences": args.sequences,
             "classes": args.classes, "class_weights": args.class_weights},
            [args.probs, args.labels], outputs, None, started, args.out_report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="satfusion",
                     description="Satellite scene classification pipeline tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic dataset", parents=[])
    p.add_argument("--config", required=True, help="SynthConfig JSON file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="metadata JSONL -> 27-feature CSV")
    p.add_argument("--metadata", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--norm-spec", default=None, help="normalization ranges JSON")
    p.add_argument("--box-mode", choices=("enlarge", "square"), default="enlarge")
    p.add_argument("--context-factor", type=float, default=0.5)
    p.add_argument("--strict", action="store_true",
                   help="abort on the first bad record instead of skipping")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("prep", help="crop/resize rasters per metadata boxes")
    p.add_argument("--metadata", required=True)
    p.add_argument("--rasters-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("enlarge", "square"), default="enlarge")
    p.add_argument("--context-factor", type=float, default=0.5)
    p.add_argument("--target-size", type=int, default=224)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train one fusion net per CNN model")
    p.add_argument("--features", required=True)
    p.add_argument("--predictions", required=True, nargs="+")
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None, help="training hyperparameter JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="apply a fusion net to one model's predictions")
    p.add_argument("--features", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--out-model-id", default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="average predictions across models")
    p.add_argument("--predictions", required=True, nargs="+")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-probs", default=None, help="write averaged vectors as JSONL")
    p.add_argument("--threshold", type=float, default=None,
                   help="route max <= threshold to the false-detection class")
    p.add_argument("--sequences", default=None, metavar="LABELS_CSV",
                   help="aggregate by sequence using this labels file")
    p.add_argument("--classes", default=None, help="class label file")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    p.add_argument("--probs", required=True, help="per-image probability JSONL")
    p.add_argument("--labels", required=True)
    p.add_argument("--out-report", required=True)
    p.add_argument("--out-text", default=None)
    p.add_argument("--out-confusion", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--sequences", action="store_true",
                   help="score sequences instead of single images")
    p.add_argument("--classes", default=None)
    p.add_argument("--class-weights", default=None, help="label -> weight JSON")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except SatFusionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # pragma: no cover - defensive: contract demands exit 3
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
