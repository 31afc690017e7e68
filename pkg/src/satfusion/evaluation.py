"""Confusion matrices, per-class metrics, the competition score, and corpus rules.

Conventions fixed here and relied on by the rest of the package:

- Confusion matrix rows are true classes, columns are predicted classes.
- Precision/recall/F1 with an empty denominator are 0, never NaN.
- The competition score is round(1e6 * weighted F1) with half-up rounding;
  class weights default to uniform because the official ones are not public.
- Training-corpus filter: drop records with cloud cover strictly above 40%
  or a box whose smaller side is strictly below 5 px (boundaries are kept).
- False-detection records are split 90/10 by a seeded shuffle, first
  ceil(0.9 n) to training.
"""

from __future__ import annotations

import csv
import json
import math
import operator
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ParseError, SchemaError, ValidationError
from .metadata import ImageMetadata, N_CLASSES
from .rng import Pcg32

CLOUD_COVER_LIMIT_PCT = 40.0
MIN_BOX_DIM_PX = 5
TRAIN_SPLIT_FRACTION = 0.9
SCORE_SCALE = 10 ** 6

DROP_REASON_CLOUD = "cloud_cover"
DROP_REASON_BOX = "box_size"


def _class_index(value, n_classes: int, what: str) -> int:
    try:
        idx = operator.index(value)
    except TypeError:
        raise ValidationError(f"{what} must be an integer class index, got {value!r}") from None
    if not 0 <= idx < n_classes:
        raise ValidationError(f"{what} {idx} outside 0..{n_classes - 1}")
    return idx


def confusion_matrix(pairs: Iterable[tuple[int, int]], n_classes: int = N_CLASSES) -> np.ndarray:
    """Accumulate (true, predicted) pairs into an (n, n) integer count matrix."""
    if n_classes < 1:
        raise ValidationError(f"n_classes must be >= 1, got {n_classes}")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for pos, (t, p) in enumerate(pairs):
        ti = _class_index(t, n_classes, f"record {pos}: true class")
        pi = _class_index(p, n_classes, f"record {pos}: predicted class")
        m[ti, pi] += 1
    return m


def _check_confusion(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise ValidationError(f"confusion matrix must be square, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ValidationError("confusion matrix entries must be integers")
        arr = arr.astype(np.int64)
    if np.any(arr < 0):
        raise ValidationError("confusion matrix entries must be non-negative")
    return arr


def per_class_metrics(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(precision, recall, F1) per class; empty denominators yield 0."""
    arr = _check_confusion(m)
    diag = np.diag(arr).astype(np.float64)
    col = arr.sum(axis=0).astype(np.float64)
    row = arr.sum(axis=1).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    pr = precision + recall
    f1 = np.divide(2.0 * precision * recall, pr, out=np.zeros_like(diag), where=pr > 0)
    return precision, recall, f1


def accuracy(m) -> float:
    arr = _check_confusion(m)
    total = int(arr.sum())
    if total == 0:
        raise DataError("cannot compute accuracy of an empty confusion matrix")
    return float(np.trace(arr) / total)


def macro_f1(f1: Sequence[float]) -> float:
    f1 = np.asarray(f1, dtype=np.float64)
    if f1.size == 0:
        raise DataError("macro F1 of zero classes is undefined")
    return float(f1.mean())


def weighted_f1(f1: Sequence[float], weights: Sequence[float] | None = None) -> float:
    """Weighted mean of per-class F1 values; uniform weights equal macro F1."""
    f1 = np.asarray(f1, dtype=np.float64)
    if weights is None:
        return macro_f1(f1)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != f1.shape:
        raise ValidationError(f"{w.size} weights for {f1.size} classes")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValidationError("class weights must be positive and finite")
    return float((w * f1).sum() / w.sum())


def score(weighted: float) -> int:
    """Competition score: weighted F1 scaled by 1e6, rounded half-up."""
    if not 0.0 <= weighted <= 1.0:
        raise ValidationError(f"weighted F1 must be in [0, 1], got {weighted}")
    return int(math.floor(weighted * SCORE_SCALE + 0.5))


@dataclass(frozen=True)
class EvalReport:
    """All headline metrics for one evaluation run."""

    n_records: int
    accuracy: float
    macro_f1: float
    weighted_f1: float
    score: int
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "score": self.score,
            "per_class": {
                "precision": list(self.precision),
                "recall": list(self.recall),
                "f1": list(self.f1),
            },
        }


def evaluate_pairs(pairs: Iterable[tuple[int, int]], n_classes: int = N_CLASSES,
                   weights: Sequence[float] | None = None) -> tuple[EvalReport, np.ndarray]:
    """Full report plus the confusion matrix for a stream of (true, predicted)."""
    m = confusion_matrix(pairs, n_classes)
    return evaluate_confusion(m, weights), m


def evaluate_confusion(m, weights: Sequence[float] | None = None) -> EvalReport:
    arr = _check_confusion(m)
    precision, recall, f1 = per_class_metrics(arr)
    wf1 = weighted_f1(f1, weights)
    return EvalReport(
        n_records=int(arr.sum()),
        accuracy=accuracy(arr),
        macro_f1=macro_f1(f1),
        weighted_f1=wf1,
        score=score(wf1),
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
    )


def write_report_json(path: str | Path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def format_report_text(report: EvalReport, class_labels: Sequence[str] | None = None) -> str:
    """Human-readable report; one row per class after the headline block."""
    n = len(report.f1)
    if class_labels is not None and len(class_labels) != n:
        raise ValidationError(f"{len(class_labels)} labels for {n} classes")
    lines = [
        f"records      {report.n_records}",
        f"accuracy     {report.accuracy:.6f}",
        f"macro F1     {report.macro_f1:.6f}",
        f"weighted F1  {report.weighted_f1:.6f}",
        f"score        {report.score}",
        "",
        "class  precision  recall     f1         label",
    ]
    for c in range(n):
        label = class_labels[c] if class_labels is not None else ""
        lines.append(
            f"{c:<5d}  {report.precision[c]:<9.6f}  {report.recall[c]:<9.6f}  "
            f"{report.f1[c]:<9.6f}  {label}".rstrip()
        )
    return "\n".join(lines) + "\n"


def write_confusion_csv(path: str | Path, m, class_labels: Sequence[str] | None = None) -> None:
    """Counts as CSV: one header row of predicted classes, one row per true class."""
    arr = _check_confusion(m)
    n = arr.shape[0]
    names = list(class_labels) if class_labels is not None else [str(i) for i in range(n)]
    if len(names) != n:
        raise ValidationError(f"{len(names)} labels for {n} classes")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted"] + names)
        for i in range(n):
            writer.writerow([names[i]] + [int(v) for v in arr[i]])


def filter_training_records(records: Iterable[ImageMetadata]) -> tuple[list[ImageMetadata], list[tuple[ImageMetadata, str]]]:
    """Apply the training-corpus filter; returns (kept, dropped with reasons).

    Cloud cover strictly above 40% drops a record; otherwise a box whose
    smaller side is strictly below 5 px does.  Records on either boundary
    stay.  The cloud reason wins when both rules apply.
    """
    kept: list[ImageMetadata] = []
    dropped: list[tuple[ImageMetadata, str]] = []
    for rec in records:
        if rec.cloud_cover_pct > CLOUD_COVER_LIMIT_PCT:
            dropped.append((rec, DROP_REASON_CLOUD))
        elif rec.box.min_dim < MIN_BOX_DIM_PX:
            dropped.append((rec, DROP_REASON_BOX))
        else:
            kept.append(rec)
    return kept, dropped


def split_false_detections(records: Sequence, seed: int) -> tuple[list, list]:
    """Deterministic 90/10 split: seeded shuffle, first ceil(0.9 n) to train."""
    items = list(records)
    Pcg32(seed).shuffle(items)
    n_train = math.ceil(TRAIN_SPLIT_FRACTION * len(items))
    return items[:n_train], items[n_train:]


def read_labels_csv(path: str | Path) -> list[tuple[str, str, int]]:
    """Ground-truth table: rows of (image_id, sequence_id, true_class)."""
    rows: list[tuple[str, str, int]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", "sequence_id", "true_class"]:
            raise SchemaError(f"{path}: unexpected labels CSV header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise SchemaError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            image_id, sequence_id, raw_cls = row
            try:
                cls = int(raw_cls)
            except ValueError:
                raise ParseError(f"{path}: true_class not an integer: {raw_cls!r}",
                                 line=lineno) from None
            if not 0 <= cls < N_CLASSES:
                raise ValidationError(f"{path}:{lineno}: true_class {cls} outside 0..{N_CLASSES - 1}")
            rows.append((image_id, sequence_id, cls))
    if not rows:
        raise DataError(f"{path}: no label rows")
    return rows


def write_labels_csv(path: str | Path, rows: Iterable[tuple[str, str, int]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "sequence_id", "true_class"])
        for image_id, sequence_id, cls in rows:
            writer.writerow([image_id, sequence_id, int(cls)])
            n += 1
    return n


def label_maps(rows: Sequence[tuple[str, str, int]]) -> tuple[dict[str, int], dict[str, str], dict[str, int]]:
    """(image -> class, image -> sequence, sequence -> class) with consistency checks."""
    class_of: dict[str, int] = {}
    sequence_of: dict[str, str] = {}
    seq_class: dict[str, int] = {}
    for image_id, sequence_id, cls in rows:
        if image_id in class_of:
            raise DataError(f"duplicate label row for image {image_id!r}")
        class_of[image_id] = cls
        sequence_of[image_id] = sequence_id
        prior = seq_class.get(sequence_id)
        if prior is None:
            seq_class[sequence_id] = cls
        elif prior != cls:
            raise DataError(
                f"sequence {sequence_id!r} carries conflicting classes {prior} and {cls}"
            )
    return class_of, sequence_of, seq_class
