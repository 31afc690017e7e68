"""Synthetic dataset generator and the independent brute-force oracle.

The generator fabricates metadata records plus per-model CNN probability
vectors with controllable label noise, pairwise class confusions, and an
optional metadata signal that makes sun elevation separate a confused pair.
All randomness comes from one :class:`~satfusion.rng.Pcg32` stream in a fixed
documented draw order, so a (config, seed) pair regenerates byte-identical
datasets on any platform.

:func:`brute_force_pipeline` recomputes ensembling, sequence aggregation, and
every metric with plain Python loops — no numpy, no code shared with the main
modules — so equivalence tests have a genuinely independent reference.

Draw order per sequence group: group size (multi-image groups only); true
class; then per image: gsd, cloud, off-nadir, zone, band, year, month, day,
hour, minute, second, sun azimuth, sun elevation, target azimuth, image
width, image height, box width, box height, box x, box y; then per model:
flip uniform, flip target (only when the flip fires), one confusion uniform
per matching pair, 63 logit uniforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .ensemble import PredictionRecord, write_predictions_jsonl
from .errors import DataError, ParseError, SchemaError, ValidationError
from .evaluation import write_labels_csv
from .metadata import (
    UTM_BAND_LETTERS,
    BoundingBox,
    ImageMetadata,
    N_CLASSES,
    write_metadata_jsonl,
)
from .rng import ALGORITHM_ID, Pcg32

DATASET_MANIFEST_NAME = "manifest.json"
METADATA_FILE_NAME = "metadata.jsonl"
LABELS_FILE_NAME = "labels.csv"

_SUN_ELEV_DEFAULT_RANGE = (5.0, 85.0)


@dataclass(frozen=True)
class MetadataSignal:
    """Make sun elevation separate two (typically confused) classes.

    Records of ``class_a`` draw sun elevation from ``a_range`` and records of
    ``class_b`` from ``b_range``; everything else uses the default range.
    With disjoint ranges the feature fully disambiguates the pair.
    """

    class_a: int
    class_b: int
    feature: str = "sun_elevation_deg"
    a_range: tuple[float, float] = (55.0, 85.0)
    b_range: tuple[float, float] = (5.0, 35.0)

    def __post_init__(self):
        if self.feature != "sun_elevation_deg":
            raise ValidationError(
                f"only the sun_elevation_deg signal is supported, got {self.feature!r}"
            )
        for name in ("class_a", "class_b"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v < N_CLASSES:
                raise ValidationError(f"{name} must be a class index in 0..{N_CLASSES - 1}, got {v!r}")
        if self.class_a == self.class_b:
            raise ValidationError("signal classes must differ")
        for name in ("a_range", "b_range"):
            lo, hi = getattr(self, name)
            if not -90.0 <= lo < hi <= 90.0:
                raise ValidationError(f"{name} must satisfy -90 <= lo < hi <= 90, got ({lo}, {hi})")

    def to_dict(self) -> dict:
        return {
            "class_a": self.class_a,
            "class_b": self.class_b,
            "feature": self.feature,
            "a_range": list(self.a_range),
            "b_range": list(self.b_range),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetadataSignal":
        if not isinstance(obj, dict):
            raise SchemaError("metadata_signal must be an object")
        known = {"class_a", "class_b", "feature", "a_range", "b_range"}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise SchemaError(f"metadata_signal has unknown fields: {unknown}")
        for key in ("class_a", "class_b"):
            if key not in obj:
                raise SchemaError(f"metadata_signal missing field {key!r}", field=key)
        kwargs: dict = {"class_a": obj["class_a"], "class_b": obj["class_b"]}
        if "feature" in obj:
            kwargs["feature"] = obj["feature"]
        for key in ("a_range", "b_range"):
            if key in obj:
                pair = obj[key]
                if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                    raise SchemaError(f"metadata_signal {key} must be [lo, hi]", field=key)
                kwargs[key] = (float(pair[0]), float(pair[1]))
        return cls(**kwargs)


@dataclass(frozen=True)
class SynthConfig:
    """Full recipe for one synthetic dataset; serialized into its manifest."""

    n_records: int
    n_models: int = 1
    n_classes: int = N_CLASSES
    label_noise_rate: float = 0.0
    confusion_pairs: tuple[tuple[int, int, float], ...] = ()
    temperature: float = 0.1
    logit_noise: float = 0.05
    sequence_fraction: float = 0.0
    class_pool: tuple[int, ...] | None = None
    metadata_signal: MetadataSignal | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_records < 1:
            raise ValidationError(f"n_records must be >= 1, got {self.n_records}")
        if self.n_models < 1:
            raise ValidationError(f"n_models must be >= 1, got {self.n_models}")
        if self.n_classes != N_CLASSES:
            raise ValidationError(
                f"only the {N_CLASSES}-class configuration is supported, got {self.n_classes}"
            )
        if not 0.0 <= self.label_noise_rate <= 1.0:
            raise ValidationError(
                f"label_noise_rate must be in [0, 1], got {self.label_noise_rate}"
            )
        pairs = tuple((int(a), int(b), float(p)) for a, b, p in self.confusion_pairs)
        object.__setattr__(self, "confusion_pairs", pairs)
        for a, b, p in pairs:
            if not (0 <= a < self.n_classes and 0 <= b < self.n_classes):
                raise ValidationError(f"confusion pair ({a}, {b}) outside 0..{self.n_classes - 1}")
            if a == b:
                raise ValidationError(f"confusion pair classes must differ, got ({a}, {b})")
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"confusion probability must be in [0, 1], got {p}")
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")
        if self.logit_noise < 0:
            raise ValidationError(f"logit_noise must be >= 0, got {self.logit_noise}")
        if not 0.0 <= self.sequence_fraction <= 1.0:
            raise ValidationError(
                f"sequence_fraction must be in [0, 1], got {self.sequence_fraction}"
            )
        if self.class_pool is not None:
            pool = tuple(int(c) for c in self.class_pool)
            object.__setattr__(self, "class_pool", pool)
            if not pool:
                raise ValidationError("class_pool must be nonempty when given")
            if len(set(pool)) != len(pool):
                raise ValidationError("class_pool entries must be unique")
            for c in pool:
                if not 0 <= c < self.n_classes:
                    raise ValidationError(f"class_pool entry {c} outside 0..{self.n_classes - 1}")

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_models": self.n_models,
            "n_classes": self.n_classes,
            "label_noise_rate": self.label_noise_rate,
            "confusion_pairs": [list(p) for p in self.confusion_pairs],
            "temperature": self.temperature,
            "logit_noise": self.logit_noise,
            "sequence_fraction": self.sequence_fraction,
            "class_pool": list(self.class_pool) if self.class_pool is not None else None,
            "metadata_signal": self.metadata_signal.to_dict() if self.metadata_signal else None,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        if not isinstance(obj, dict):
            raise SchemaError("synth config must be a JSON object")
        known = {
            "n_records", "n_models", "n_classes", "label_noise_rate", "confusion_pairs",
            "temperature", "logit_noise", "sequence_fraction", "class_pool",
            "metadata_signal", "seed",
        }
        unknown = sorted(set(obj) - known)
        if unknown:
            raise SchemaError(f"synth config has unknown fields: {unknown}")
        if "n_records" not in obj:
            raise SchemaError("synth config missing field 'n_records'", field="n_records")
        kwargs = {k: obj[k] for k in known & set(obj)}
        if kwargs.get("confusion_pairs") is not None:
            pairs = kwargs["confusion_pairs"]
            if not isinstance(pairs, (list, tuple)):
                raise SchemaError("confusion_pairs must be an array of [a, b, p] triples")
            kwargs["confusion_pairs"] = tuple(tuple(p) for p in pairs)
        else:
            kwargs.pop("confusion_pairs", None)
        if kwargs.get("class_pool") is not None:
            kwargs["class_pool"] = tuple(kwargs["class_pool"])
        if kwargs.get("metadata_signal") is not None:
            kwargs["metadata_signal"] = MetadataSignal.from_dict(kwargs["metadata_signal"])
        elif "metadata_signal" in kwargs:
            kwargs.pop("metadata_signal")
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "SynthConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: malformed synth config: {e.msg}", offset=e.pos) from None
        return cls.from_dict(obj)


@dataclass(frozen=True)
class SynthRecord:
    """One generated image: its metadata, label, and per-model probabilities."""

    metadata: ImageMetadata
    true_class: int
    model_probs: tuple[tuple[float, ...], ...]

    @property
    def image_id(self) -> str:
        return self.metadata.image_id

    @property
    def sequence_id(self) -> str:
        return self.metadata.sequence_id


@dataclass(frozen=True)
class SynthDataset:
    config: SynthConfig
    records: tuple[SynthRecord, ...]
    model_ids: tuple[str, ...]


def _softmax_list(z: list[float]) -> list[float]:
    zmax = max(z)
    exps = [math.exp(v - zmax) for v in z]
    total = math.fsum(exps)
    return [e / total for e in exps]


def _sample_metadata(rng: Pcg32, config: SynthConfig, true_class: int,
                     image_id: str, sequence_id: str) -> ImageMetadata:
    gsd = rng.uniform(0.3, 5.0)
    cloud = rng.uniform(0.0, 35.0)
    off_nadir = rng.uniform(0.0, 45.0)
    zone = rng.randint(1, 60)
    band = UTM_BAND_LETTERS[rng.randrange(len(UTM_BAND_LETTERS))]
    ts = datetime(
        rng.randint(2002, 2017), rng.randint(1, 12), rng.randint(1, 28),
        rng.randint(0, 23), rng.randint(0, 59), rng.randint(0, 59),
        tzinfo=timezone.utc,
    )
    sun_az = rng.uniform(0.0, 360.0)
    signal = config.metadata_signal
    if signal is not None and true_class == signal.class_a:
        sun_elev = rng.uniform(*signal.a_range)
    elif signal is not None and true_class == signal.class_b:
        sun_elev = rng.uniform(*signal.b_range)
    else:
        sun_elev = rng.uniform(*_SUN_ELEV_DEFAULT_RANGE)
    tgt_az = rng.uniform(0.0, 360.0)
    img_w = rng.randint(500, 2000)
    img_h = rng.randint(500, 2000)
    box_w = rng.randint(10, 300)
    box_h = rng.randint(10, 300)
    box_x = rng.randint(0, img_w - box_w)
    box_y = rng.randint(0, img_h - box_h)
    return ImageMetadata(
        image_id=image_id,
        sequence_id=sequence_id,
        gsd_m=gsd,
        cloud_cover_pct=cloud,
        off_nadir_deg=off_nadir,
        utm=f"{zone}{band}",
        timestamp_utc=ts,
        sun_azimuth_deg=sun_az,
        sun_elevation_deg=sun_elev,
        target_azimuth_deg=tgt_az,
        img_width_px=img_w,
        img_height_px=img_h,
        boxes=(BoundingBox(box_x, box_y, box_w, box_h),),
        box_index=0,
    )


def _sample_model_probs(rng: Pcg32, config: SynthConfig, true_class: int) -> tuple[float, ...]:
    chosen = true_class
    if rng.random() < config.label_noise_rate:
        alt = rng.randrange(config.n_classes - 1)
        chosen = alt + 1 if alt >= chosen else alt
    for a, b, p in config.confusion_pairs:
        if chosen == a and rng.random() < p:
            chosen = b
    logits = rng.uniform_block(config.n_classes, 0.0, config.logit_noise)
    logits[chosen] += 1.0
    inv_t = 1.0 / config.temperature
    return tuple(_softmax_list([v * inv_t for v in logits]))


def generate_dataset(config: SynthConfig) -> SynthDataset:
    """Deterministically generate the full dataset described by ``config``.

    ``sequence_fraction`` is the approximate share of images placed in
    multi-image sequences (2-6 images sharing a true class, independent noise
    per image); all other images form single-image sequences.
    """
    rng = Pcg32(config.seed)
    pool = config.class_pool if config.class_pool is not None else tuple(range(config.n_classes))
    multi_target = round(config.sequence_fraction * config.n_records)

    records: list[SynthRecord] = []
    img_counter = 0
    seq_counter = 0
    multi_placed = 0
    while img_counter < config.n_records:
        remaining = config.n_records - img_counter
        if multi_placed < multi_target and remaining >= 2:
            group_size = min(rng.randint(2, 6), remaining)
            multi_placed += group_size
        else:
            group_size = 1
        true_class = pool[rng.randrange(len(pool))]
        sequence_id = f"seq_{seq_counter:06d}"
        seq_counter += 1
        for _ in range(group_size):
            image_id = f"img_{img_counter:06d}"
            img_counter += 1
            meta = _sample_metadata(rng, config, true_class, image_id, sequence_id)
            probs = tuple(
                _sample_model_probs(rng, config, true_class) for _ in range(config.n_models)
            )
            records.append(SynthRecord(metadata=meta, true_class=true_class, model_probs=probs))
    model_ids = tuple(f"model_{k}" for k in range(config.n_models))
    return SynthDataset(config=config, records=tuple(records), model_ids=model_ids)


def prediction_file_name(model_id: str) -> str:
    return f"predictions_{model_id}.jsonl"


def write_dataset(dataset: SynthDataset, out_dir: str | Path) -> dict[str, str]:
    """Write metadata, per-model predictions, labels, and the dataset manifest.

    Returns a name -> path mapping (keys: metadata, labels, manifest, and one
    per model id).  Output is byte-identical for identical datasets.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, str] = {}

    metadata_path = out / METADATA_FILE_NAME
    write_metadata_jsonl(metadata_path, (rec.metadata for rec in dataset.records))
    paths["metadata"] = str(metadata_path)

    for k, model_id in enumerate(dataset.model_ids):
        pred_path = out / prediction_file_name(model_id)
        write_predictions_jsonl(
            pred_path,
            (
                PredictionRecord(rec.image_id, model_id, list(rec.model_probs[k]))
                for rec in dataset.records
            ),
        )
        paths[model_id] = str(pred_path)

    labels_path = out / LABELS_FILE_NAME
    write_labels_csv(
        labels_path,
        ((rec.image_id, rec.sequence_id, rec.true_class) for rec in dataset.records),
    )
    paths["labels"] = str(labels_path)

    manifest = {
        "generator": "satfusion.synth",
        "algorithm": ALGORITHM_ID,
        "seed": dataset.config.seed,
        "config": dataset.config.to_dict(),
        "n_records": len(dataset.records),
        "model_ids": list(dataset.model_ids),
        "files": {
            "metadata": METADATA_FILE_NAME,
            "labels": LABELS_FILE_NAME,
            "predictions": {m: prediction_file_name(m) for m in dataset.model_ids},
        },
    }
    manifest_path = out / DATASET_MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    paths["manifest"] = str(manifest_path)
    return paths


@dataclass(frozen=True)
class BruteForceResult:
    """Everything the oracle recomputes, image- and sequence-level."""

    image_predictions: dict[str, int]
    sequence_predictions: dict[str, int]
    image_accuracy: float
    sequence_accuracy: float
    per_model_accuracy: tuple[float, ...]
    confusion: tuple[tuple[int, ...], ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    macro_f1: float
    weighted_f1: float
    score: int


def brute_force_pipeline(dataset: SynthDataset, threshold: float | None = None,
                         class_weights: Sequence[float] | None = None) -> BruteForceResult:
    """Recompute the whole downstream pipeline with plain loops.

    Image-level: average the per-model vectors, argmax (lowest index wins),
    optionally apply the threshold rule.  Sequence-level: average the
    per-image averaged vectors over each sequence, then classify the same
    way.  All metrics are accumulated by direct summation.
    """
    if not dataset.records:
        raise DataError("dataset has no records")
    n = dataset.config.n_classes
    if class_weights is not None and len(class_weights) != n:
        raise ValidationError(f"{len(class_weights)} weights for {n} classes")

    def classify_list(avg: list[float]) -> int:
        best = 0
        for i in range(1, n):
            if avg[i] > avg[best]:
                best = i
        if threshold is not None and not avg[best] > threshold:
            return n - 1
        return best

    image_predictions: dict[str, int] = {}
    seq_sums: dict[str, list[float]] = {}
    seq_counts: dict[str, int] = {}
    seq_true: dict[str, int] = {}
    confusion = [[0] * n for _ in range(n)]
    image_hits = 0
    n_models = len(dataset.model_ids)
    model_hits = [0] * n_models

    for rec in dataset.records:
        if len(rec.model_probs) != n_models:
            raise DataError(f"record {rec.image_id!r} has {len(rec.model_probs)} model vectors")
        sums = [0.0] * n
        for k, probs in enumerate(rec.model_probs):
            best_k = 0
            for i in range(n):
                sums[i] += probs[i]
                if probs[i] > probs[best_k]:
                    best_k = i
            if best_k == rec.true_class:
                model_hits[k] += 1
        avg = [s / n_models for s in sums]
        predicted = classify_list(avg)
        image_predictions[rec.image_id] = predicted
        confusion[rec.true_class][predicted] += 1
        if predicted == rec.true_class:
            image_hits += 1

        acc = seq_sums.get(rec.sequence_id)
        if acc is None:
            seq_sums[rec.sequence_id] = list(avg)
            seq_counts[rec.sequence_id] = 1
            seq_true[rec.sequence_id] = rec.true_class
        else:
            for i in range(n):
                acc[i] += avg[i]
            seq_counts[rec.sequence_id] += 1
            if seq_true[rec.sequence_id] != rec.true_class:
                raise DataError(f"sequence {rec.sequence_id!r} mixes true classes")

    sequence_predictions: dict[str, int] = {}
    seq_hits = 0
    for sid, sums in seq_sums.items():
        avg = [s / seq_counts[sid] for s in sums]
        predicted = classify_list(avg)
        sequence_predictions[sid] = predicted
        if predicted == seq_true[sid]:
            seq_hits += 1

    total = len(dataset.records)
    precision = [0.0] * n
    recall = [0.0] * n
    f1 = [0.0] * n
    for c in range(n):
        col = sum(confusion[r][c] for r in range(n))
        row = sum(confusion[c])
        diag = confusion[c][c]
        precision[c] = diag / col if col > 0 else 0.0
        recall[c] = diag / row if row > 0 else 0.0
        denom = precision[c] + recall[c]
        f1[c] = 2.0 * precision[c] * recall[c] / denom if denom > 0 else 0.0
    macro = math.fsum(f1) / n
    if class_weights is None:
        weighted = macro
    else:
        weighted = math.fsum(w * v for w, v in zip(class_weights, f1)) / math.fsum(class_weights)

    return BruteForceResult(
        image_predictions=image_predictions,
        sequence_predictions=sequence_predictions,
        image_accuracy=image_hits / total,
        sequence_accuracy=seq_hits / len(seq_sums),
        per_model_accuracy=tuple(h / total for h in model_hits),
        confusion=tuple(tuple(row) for row in confusion),
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        macro_f1=macro,
        weighted_f1=weighted,
        score=int(math.floor(weighted * 10 ** 6 + 0.5)),
    )
