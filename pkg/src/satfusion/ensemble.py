"""Ensembling across models, argmax classification, and sequence aggregation.

Per-model probability vectors for the same image are combined by unweighted
componentwise averaging; a temporal sequence of images of one site is
classified by averaging its per-image vectors and taking the argmax.  The
optional threshold rule reroutes low-confidence predictions to the
false-detection class; it is off by default because hard thresholding
measured worse than learning the false-detection class directly.

All functions are pure, so batch classification can fan out freely.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._validation import PROB_SUM_TOL, check_probability_matrix
from .errors import DataError, ParseError, SchemaError, ValidationError
from .metadata import FALSE_DETECTION_INDEX, N_CLASSES


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    """One model's class-probability vector for one image."""

    image_id: str
    model_id: str
    probs: np.ndarray  # (63,), non-negative, sums to 1 within 1e-6

    def __post_init__(self):
        if not self.image_id or not self.model_id:
            raise ValidationError("image_id and model_id must be non-empty")
        arr = check_probability_matrix(
            self.probs, name=f"probs for image {self.image_id!r}"
        )[0]
        arr.flags.writeable = False
        object.__setattr__(self, "probs", arr)


def _as_vector(v, name: str = "prediction vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValidationError(f"{name} must be a nonempty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    if np.any(arr < 0):
        raise ValidationError(f"{name} contains negative components")
    return arr


def average_predictions(vectors) -> np.ndarray:
    """Componentwise arithmetic mean of probability vectors.

    Every input must be a valid probability vector (sum 1 within 1e-6); the
    mean of valid vectors is again valid up to accumulated roundoff.
    """
    rows = [_as_vector(v, f"vector {i}") for i, v in enumerate(vectors)]
    if not rows:
        raise DataError("average_predictions requires at least one vector")
    if len({r.size for r in rows}) != 1:
        raise ValidationError("vectors to average differ in length")
    stack = np.stack(rows)
    sums = stack.sum(axis=1)
    off = np.abs(sums - 1.0)
    if np.any(off > PROB_SUM_TOL):
        i = int(np.argmax(off))
        raise ValidationError(f"vector {i} sums to {sums[i]!r}, not 1 within {PROB_SUM_TOL}")
    return stack.mean(axis=0)


def classify(v) -> int:
    """Index of the maximum component; ties go to the lowest index.

    Only shape, finiteness, and non-negativity are checked, so the argmax's
    invariance under positive scaling is directly usable.
    """
    return int(np.argmax(_as_vector(v)))


def classify_with_threshold(v, tau: float, false_detection_index: int | None = None) -> int:
    """Argmax if it strictly exceeds ``tau``, else the false-detection class.

    "Failed to exceed" makes the boundary strict: max exactly equal to tau is
    a false detection.  The false-detection class defaults to the last index
    (62 for the canonical 63-vector).
    """
    arr = _as_vector(v)
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"threshold must be in [0, 1], got {tau}")
    fd = arr.size - 1 if false_detection_index is None else false_detection_index
    if not 0 <= fd < arr.size:
        raise ValidationError(f"false_detection_index {fd} out of range for {arr.size} classes")
    return int(np.argmax(arr)) if float(arr.max()) > tau else fd


@dataclass(frozen=True, eq=False)
class SequenceRecord:
    """One site's temporal sequence: the per-image vectors after ensembling."""

    sequence_id: str
    vectors: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.vectors:
            raise DataError(f"sequence {self.sequence_id!r} has no images")
        object.__setattr__(
            self,
            "vectors",
            tuple(_as_vector(v, f"sequence {self.sequence_id!r} vector {i}")
                  for i, v in enumerate(self.vectors)),
        )


def aggregate_sequence(seq: "SequenceRecord | Sequence") -> int:
    """Average the per-image vectors over the sequence, then argmax."""
    vectors = seq.vectors if isinstance(seq, SequenceRecord) else seq
    return classify(average_predictions(vectors))


def classify_matrix(P: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Row-wise classification of an (n, k) probability matrix."""
    arr = np.asarray(P, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got shape {arr.shape}")
    idx = arr.argmax(axis=1)
    if threshold is not None:
        if not 0.0 <= threshold <= 1.0:
            raise ValidationError(f"threshold must be in [0, 1], got {threshold}")
        idx = np.where(arr.max(axis=1) > threshold, idx, arr.shape[1] - 1)
    return idx.astype(np.int64)


def ensemble_by_image(records: Iterable[PredictionRecord]) -> tuple[list[str], np.ndarray, tuple[str, ...]]:
    """Average each image's vectors across models.

    Every image must be scored by exactly the same model set; a record whose
    support differs is rejected rather than silently averaged, which keeps
    image-then-sequence averaging equal to the flattened model-by-image mean.

    Returns (image ids in first-seen order, (n, 63) averaged matrix, sorted
    model ids).
    """
    by_image: dict[str, dict[str, np.ndarray]] = {}
    order: list[str] = []
    for rec in records:
        slot = by_image.get(rec.image_id)
        if slot is None:
            slot = by_image[rec.image_id] = {}
            order.append(rec.image_id)
        if rec.model_id in slot:
            raise DataError(
                f"duplicate prediction for image {rec.image_id!r}, model {rec.model_id!r}"
            )
        slot[rec.model_id] = rec.probs
    if not order:
        raise DataError("no prediction records to ensemble")

    model_set = frozenset(by_image[order[0]])
    for image_id in order:
        models = frozenset(by_image[image_id])
        if models != model_set:
            raise DataError(
                f"image {image_id!r} scored by models {sorted(models)}; "
                f"expected {sorted(model_set)}"
            )
    model_ids = tuple(sorted(model_set))
    mat = np.empty((len(order), N_CLASSES), dtype=np.float64)
    for i, image_id in enumerate(order):
        mat[i] = np.stack([by_image[image_id][m] for m in model_ids]).mean(axis=0)
    return order, mat, model_ids


def group_into_sequences(image_ids: Sequence[str], matrix: np.ndarray,
                         sequence_of: Mapping[str, str]) -> list[SequenceRecord]:
    """Bundle per-image vectors into sequences, preserving first-seen order."""
    groups: dict[str, list[np.ndarray]] = {}
    order: list[str] = []
    for i, image_id in enumerate(image_ids):
        sid = sequence_of.get(image_id)
        if sid is None:
            raise DataError(f"image {image_id!r} has no sequence assignment")
        if sid not in groups:
            groups[sid] = []
            order.append(sid)
        groups[sid].append(np.asarray(matrix[i], dtype=np.float64))
    return [SequenceRecord(sid, tuple(groups[sid])) for sid in order]


def read_predictions_jsonl(path: str | Path) -> list[PredictionRecord]:
    """Load {image_id, model_id, probs[63]} records, validating each line."""
    records: list[PredictionRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: malformed JSON: {e.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise SchemaError(f"{path}:{lineno}: record must be a JSON object")
            for key in ("image_id", "model_id", "probs"):
                if key not in obj:
                    raise SchemaError(f"{path}:{lineno}: missing field {key!r}", field=key)
            probs = obj["probs"]
            if not isinstance(probs, list) or len(probs) != N_CLASSES:
                raise SchemaError(
                    f"{path}:{lineno}: probs must be an array of {N_CLASSES} numbers",
                    field="probs",
                )
            try:
                records.append(
                    PredictionRecord(str(obj["image_id"]), str(obj["model_id"]),
                                     np.asarray(probs, dtype=np.float64))
                )
            except ValidationError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from None
    return records


def write_predictions_jsonl(path: str | Path, records: Iterable[PredictionRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "image_id": rec.image_id,
                "model_id": rec.model_id,
                "probs": [float(p) for p in rec.probs],
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
            n += 1
    return n


def write_classification_csv(path: str | Path,
                             rows: Iterable[tuple[str, int, str, float]]) -> int:
    """Rows of (record id, predicted class index, predicted label, max probability)."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "predicted_class", "predicted_label", "max_prob"])
        for rid, cls, label, max_prob in rows:
            writer.writerow([rid, cls, label, repr(float(max_prob))])
            n += 1
    return n
