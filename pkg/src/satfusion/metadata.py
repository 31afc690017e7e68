"""Satellite acquisition metadata records and the 63-class registry.

A metadata corpus is JSONL: one flat JSON object per line, snake_case keys
matching :class:`ImageMetadata` field names.  Parsing is pure and the parsed
records are immutable, so corpora can be processed concurrently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ParseError, SchemaError, ValidationError

N_CLASSES = 63
FALSE_DETECTION_INDEX = 62

# MGRS latitude bands run C..X south to north, skipping I and O.
UTM_BAND_LETTERS = "CDEFGHJKLMNPQRSTUVWX"


@dataclass(frozen=True)
class BoundingBox:
    """Pixel-space box: (x, y) is the top-left corner, w/h the extent."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not isinstance(v, int):
                raise ValidationError(f"box {name} must be an integer, got {v!r}", field=name)
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"box corner must be non-negative, got ({self.x}, {self.y})", field="x")
        if self.w < 1 or self.h < 1:
            raise ValidationError(f"box dimensions must be >= 1, got {self.w}x{self.h}", field="w")

    @property
    def min_dim(self) -> int:
        return min(self.w, self.h)

    def clamped(self, img_w: int, img_h: int) -> "BoundingBox":
        """Intersect with the image; raises if nothing is left."""
        x0 = max(0, self.x)
        y0 = max(0, self.y)
        x1 = min(img_w, self.x + self.w)
        y1 = min(img_h, self.y + self.h)
        if x1 - x0 < 1 or y1 - y0 < 1:
            raise ValidationError(
                f"box ({self.x},{self.y},{self.w},{self.h}) lies outside a {img_w}x{img_h} image"
            )
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


def split_utm(utm: str) -> tuple[int, str]:
    """Split a zone string like ``"31U"`` into (zone number, band letter)."""
    if not isinstance(utm, str) or len(utm) < 2:
        raise ValidationError(f"utm zone string malformed: {utm!r}", field="utm")
    zone_part, band = utm[:-1], utm[-1].upper()
    try:
        zone = int(zone_part)
    except ValueError:
        raise ValidationError(f"utm zone number malformed: {utm!r}", field="utm") from None
    if not 1 <= zone <= 60:
        raise ValidationError(f"utm zone number {zone} outside 1..60", field="utm")
    if band not in UTM_BAND_LETTERS:
        raise ValidationError(
            f"utm band letter {band!r} invalid (must be one of {UTM_BAND_LETTERS})", field="utm"
        )
    return zone, band


# JSONL schema: field name -> (required, parser)
_OPTIONAL_DEFAULTS = {"cloud_cover_pct": 0.0, "target_azimuth_deg": 0.0}


@dataclass(frozen=True)
class ImageMetadata:
    """One acquisition record: the image, its boxes, and the box to classify.

    ``defaulted_fields`` names optional keys that were absent in the source
    record and filled with documented defaults, so downstream reporting can
    count default usage instead of silently absorbing gaps.
    """

    image_id: str
    sequence_id: str
    gsd_m: float
    cloud_cover_pct: float
    off_nadir_deg: float
    utm: str
    timestamp_utc: datetime
    sun_azimuth_deg: float
    sun_elevation_deg: float
    target_azimuth_deg: float
    img_width_px: int
    img_height_px: int
    boxes: tuple[BoundingBox, ...]
    box_index: int
    defaulted_fields: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        _check(self.gsd_m > 0, "gsd_m", f"must be > 0, got {self.gsd_m}")
        _check(0 <= self.cloud_cover_pct <= 100, "cloud_cover_pct",
               f"must be in [0, 100], got {self.cloud_cover_pct}")
        _check(-90 <= self.sun_elevation_deg <= 90, "sun_elevation_deg",
               f"must be in [-90, 90], got {self.sun_elevation_deg}")
        _check(0 <= self.sun_azimuth_deg <= 360, "sun_azimuth_deg",
               f"must be in [0, 360], got {self.sun_azimuth_deg}")
        _check(0 <= self.target_azimuth_deg <= 360, "target_azimuth_deg",
               f"must be in [0, 360], got {self.target_azimuth_deg}")
        _check(self.off_nadir_deg >= 0, "off_nadir_deg", f"must be >= 0, got {self.off_nadir_deg}")
        _check(self.img_width_px >= 1 and self.img_height_px >= 1, "img_width_px",
               f"image dims must be >= 1, got {self.img_width_px}x{self.img_height_px}")
        split_utm(self.utm)
        if self.timestamp_utc.tzinfo is None or self.timestamp_utc.utcoffset() != timezone.utc.utcoffset(None):
            raise ValidationError("timestamp_utc must be timezone-aware UTC", field="timestamp_utc")
        if not self.boxes:
            raise ValidationError("record must carry at least one box", field="boxes")
        if not 0 <= self.box_index < len(self.boxes):
            raise ValidationError(
                f"box_index {self.box_index} out of range for {len(self.boxes)} boxes",
                field="box_index",
            )
        for b in self.boxes:
            if b.x + b.w > self.img_width_px or b.y + b.h > self.img_height_px:
                raise ValidationError(
                    f"box ({b.x},{b.y},{b.w},{b.h}) exceeds image "
                    f"{self.img_width_px}x{self.img_height_px}",
                    field="boxes",
                )

    @property
    def box(self) -> BoundingBox:
        """The box this record classifies."""
        return self.boxes[self.box_index]

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "sequence_id": self.sequence_id,
            "gsd_m": self.gsd_m,
            "cloud_cover_pct": self.cloud_cover_pct,
            "off_nadir_deg": self.off_nadir_deg,
            "utm": self.utm,
            "timestamp_utc": format_timestamp(self.timestamp_utc),
            "sun_azimuth_deg": self.sun_azimuth_deg,
            "sun_elevation_deg": self.sun_elevation_deg,
            "target_azimuth_deg": self.target_azimuth_deg,
            "img_width_px": self.img_width_px,
            "img_height_px": self.img_height_px,
            "boxes": [b.to_dict() for b in self.boxes],
            "box_index": self.box_index,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _check(cond: bool, fieldname: str, msg: str) -> None:
    if not cond:
        raise ValidationError(f"{fieldname} {msg}", field=fieldname)


def parse_timestamp(text: str) -> datetime:
    """ISO-8601 date-time; a trailing Z or explicit offset marks UTC."""
    if not isinstance(text, str):
        raise ValidationError(f"timestamp_utc must be a string, got {text!r}", field="timestamp_utc")
    normalized = text[:-1] + "+00:00" if text.endswith("Z") else text
    try:
        ts = datetime.fromisoformat(normalized)
    except ValueError:
        raise ValidationError(f"timestamp_utc not ISO-8601: {text!r}", field="timestamp_utc") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    base = ts.strftime("%Y-%m-%dT%H:%M:%S")
    if ts.microsecond:
        base += f".{ts.microsecond:06d}"
    return base + "Z"


_REQUIRED_NUMERIC = {
    "gsd_m": float,
    "off_nadir_deg": float,
    "sun_azimuth_deg": float,
    "sun_elevation_deg": float,
    "img_width_px": int,
    "img_height_px": int,
    "box_index": int,
}


def parse_metadata(raw: str) -> ImageMetadata:
    """Parse one JSON record into a validated :class:`ImageMetadata`.

    Boxes extending past the image are clamped to its bounds before the size
    invariants are checked.  Missing ``cloud_cover_pct`` / ``target_azimuth_deg``
    default to 0 and are listed in ``defaulted_fields``.
    """
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e.msg}", offset=e.pos) from None
    if not isinstance(obj, dict):
        raise SchemaError(f"record must be a JSON object, got {type(obj).__name__}")

    def require(name):
        if name not in obj:
            raise SchemaError(f"missing required field {name!r}", field=name)
        return obj[name]

    fields: dict = {}
    for name in ("image_id", "sequence_id", "utm"):
        value = require(name)
        if not isinstance(value, str) or not value:
            raise ValidationError(f"{name} must be a non-empty string, got {value!r}", field=name)
        fields[name] = value

    for name, caster in _REQUIRED_NUMERIC.items():
        value = require(name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{name} must be a number, got {value!r}", field=name)
        if caster is int and float(value) != int(value):
            raise ValidationError(f"{name} must be an integer, got {value!r}", field=name)
        fields[name] = caster(value)

    defaulted = []
    for name, default in _OPTIONAL_DEFAULTS.items():
        if name in obj:
            value = obj[name]
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValidationError(f"{name} must be a number, got {value!r}", field=name)
            fields[name] = float(value)
        else:
            fields[name] = default
            defaulted.append(name)

    fields["timestamp_utc"] = parse_timestamp(require("timestamp_utc"))

    raw_boxes = require("boxes")
    if not isinstance(raw_boxes, list) or not raw_boxes:
        raise SchemaError("boxes must be a non-empty array", field="boxes")
    img_w, img_h = fields["img_width_px"], fields["img_height_px"]
    boxes = []
    for i, rb in enumerate(raw_boxes):
        if not isinstance(rb, dict):
            raise SchemaError(f"boxes[{i}] must be an object", field="boxes")
        try:
            box = BoundingBox(
                int(rb["x"]), int(rb["y"]), int(rb["w"]), int(rb["h"])
            )
        except KeyError as e:
            raise SchemaError(f"boxes[{i}] missing key {e.args[0]!r}", field="boxes") from None
        except (TypeError, ValueError):
            raise ValidationError(f"boxes[{i}] has non-integer coordinates", field="boxes") from None
        boxes.append(box.clamped(img_w, img_h))
    fields["boxes"] = tuple(boxes)
    fields["defaulted_fields"] = tuple(defaulted)

    if not math.isfinite(fields["gsd_m"]):
        raise ValidationError("gsd_m must be finite", field="gsd_m")
    return ImageMetadata(**fields)


def read_metadata_jsonl(path: str | Path) -> Iterator[ImageMetadata]:
    """Stream records from a JSONL corpus; errors carry the line number."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield parse_metadata(line)
            except (ParseError, SchemaError, ValidationError) as e:
                raise type(e)(f"{path}:{lineno}: {e}") from None


def write_metadata_jsonl(path: str | Path, records: Iterable[ImageMetadata]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            n += 1
    return n


@dataclass(frozen=True)
class ClassRegistry:
    """The ordered 63-class label set, index 62 reserved for false detections.

    ``weights`` are the per-class weights used by the weighted-F1 score;
    uniform by default because the competition's official weights are not
    public.
    """

    labels: tuple[str, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.labels) != N_CLASSES:
            raise ValidationError(f"expected {N_CLASSES} class labels, found {len(self.labels)}")
        seen = set()
        for label in self.labels:
            if label in seen:
                raise ValidationError(f"duplicate class label {label!r}")
            seen.add(label)
        if len(self.weights) != N_CLASSES:
            raise ValidationError(
                f"expected {N_CLASSES} class weights, found {len(self.weights)}"
            )
        for label, w in zip(self.labels, self.weights):
            if not (w > 0 and math.isfinite(w)):
                raise ValidationError(f"weight for {label!r} must be positive, got {w}")

    def index_of(self, label: str) -> int:
        return self.labels.index(label)

    @property
    def false_detection_label(self) -> str:
        return self.labels[FALSE_DETECTION_INDEX]


def load_class_registry(path: str | Path, weights_path: str | Path | None = None) -> ClassRegistry:
    """Load labels (one per line, or a JSON array) plus optional weights JSON."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            labels = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON label array: {e.msg}", offset=e.pos) from None
        if not all(isinstance(x, str) for x in labels):
            raise ValidationError("label array must contain only strings")
    else:
        labels = [line.strip() for line in text.splitlines() if line.strip()]
    labels = tuple(labels)

    weights = (1.0,) * len(labels)
    if weights_path is not None:
        try:
            mapping = json.loads(Path(weights_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed weights JSON: {e.msg}", offset=e.pos) from None
        if not isinstance(mapping, dict):
            raise SchemaError("weights file must map label -> weight")
        unknown = sorted(set(mapping) - set(labels))
        if unknown:
            raise ValidationError(f"weights name unknown labels: {unknown}")
        weights = tuple(float(mapping.get(label, 1.0)) for label in labels)

    return ClassRegistry(labels=labels, weights=weights)


def default_registry() -> ClassRegistry:
    """Registry backed by the packaged default label file."""
    from importlib.resources import files

    path = files("satfusion").joinpath("data/default_classes.txt")
    labels = tuple(
        line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()
    )
    return ClassRegistry(labels=labels, weights=(1.0,) * len(labels))
