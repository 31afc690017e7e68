"""The 27 metadata features and their normalization into [-1, 1].

Feature values derive only from the acquisition record and the box geometry,
never from pixel content, and all normalization ranges are fixed documented
constants, so extraction is corpus-independent: the same record always yields
the same vector.

Longitude/latitude are approximated from the UTM zone string alone: the
zone's central meridian stands in for longitude and the MGRS band's center
latitude for latitude.  Angles enter as (cos, sin) pairs so the wrap-around
at 360 degrees costs nothing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, fields
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DataError, ParseError, SchemaError, ValidationError
from .image import enlarge_box, square_box
from .metadata import BoundingBox, ImageMetadata, split_utm

N_FEATURES = 27

# MGRS band letter -> center latitude in degrees.  Bands span 8 degrees from
# 80S to 72N; band X is the 12-degree exception (72N..84N, center 78N).
_BAND_CENTER_LAT = {
    "C": -76.0, "D": -68.0, "E": -60.0, "F": -52.0, "G": -44.0,
    "H": -36.0, "J": -28.0, "K": -20.0, "L": -12.0, "M": -4.0,
    "N": 4.0, "P": 12.0, "Q": 20.0, "R": 28.0, "S": 36.0,
    "T": 44.0, "U": 52.0, "V": 60.0, "W": 68.0, "X": 78.0,
}


def zone_central_meridian(zone: int) -> float:
    """Central meridian of a UTM zone in degrees east: 6*zone - 183."""
    return 6.0 * zone - 183.0


def band_center_latitude(band: str) -> float:
    try:
        return _BAND_CENTER_LAT[band.upper()]
    except KeyError:
        raise ValidationError(f"unknown MGRS band letter {band!r}", field="utm") from None


def utm_to_direction_components(utm: str) -> tuple[float, float, float]:
    """(cos lon, sin lon, sin lat) from the zone approximation."""
    zone, band = split_utm(utm)
    lon = math.radians(zone_central_meridian(zone))
    lat = math.radians(band_center_latitude(band))
    return math.cos(lon), math.sin(lon), math.sin(lat)


def local_solar_hour(timestamp_utc: datetime, utm: str) -> float:
    """(hour + minute/60 + longitude/15) mod 24, longitude from the zone."""
    zone, _ = split_utm(utm)
    lon = zone_central_meridian(zone)
    return (timestamp_utc.hour + timestamp_utc.minute / 60.0 + lon / 15.0) % 24.0


def week_day(timestamp_utc: datetime) -> int:
    """Day of week, 0 = Monday through 6 = Sunday."""
    return timestamp_utc.weekday()


@dataclass(frozen=True)
class RawFeatures:
    """The 27 features before normalization, in canonical column order."""

    gsd: float
    cloud_cover: float
    off_nadir: float
    lon_x: float
    lon_y: float
    lat_z: float
    year: float
    month: float
    day: float
    hour_minute: float
    sun_az_x: float
    sun_az_y: float
    sun_elev: float
    tgt_az_x: float
    tgt_az_y: float
    local_hour: float
    week_day: float
    n_boxes: float
    log_orig_box_w: float
    log_orig_box_h: float
    log_adj_box_w: float
    log_adj_box_h: float
    log_aspect: float
    aspect_minmax: float
    box_img_w_ratio: float
    box_img_h_ratio: float
    box_img_minmax_ratio: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64)


FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in fields(RawFeatures))

# Fixed normalization ranges (lo, hi).  Trig components map through the
# identity via (-1, 1); month is stored 0-based so 0..11 covers the year;
# hour_minute tops out just shy of 24:00; log box dimensions cover 1 px to
# 100,000 px, which bounds even the largest facilities.
DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "gsd": (0.0, 10.0),
    "cloud_cover": (0.0, 100.0),
    "off_nadir": (0.0, 60.0),
    "lon_x": (-1.0, 1.0),
    "lon_y": (-1.0, 1.0),
    "lat_z": (-1.0, 1.0),
    "year": (2000.0, 2020.0),
    "month": (0.0, 11.0),
    "day": (0.0, 31.0),
    "hour_minute": (0.0, 23.999),
    "sun_az_x": (-1.0, 1.0),
    "sun_az_y": (-1.0, 1.0),
    "sun_elev": (-90.0, 90.0),
    "tgt_az_x": (-1.0, 1.0),
    "tgt_az_y": (-1.0, 1.0),
    "local_hour": (0.0, 24.0),
    "week_day": (0.0, 6.0),
    "n_boxes": (0.0, 100.0),
    "log_orig_box_w": (0.0, 5.0),
    "log_orig_box_h": (0.0, 5.0),
    "log_adj_box_w": (0.0, 5.0),
    "log_adj_box_h": (0.0, 5.0),
    "log_aspect": (-3.0, 3.0),
    "aspect_minmax": (0.0, 1.0),
    "box_img_w_ratio": (0.0, 1.0),
    "box_img_h_ratio": (0.0, 1.0),
    "box_img_minmax_ratio": (0.0, 1.0),
}


def extract_raw_features(meta: ImageMetadata, adjusted_box: BoundingBox) -> RawFeatures:
    """Compute the 27 features for one record.

    ``adjusted_box`` is the post-enlargement/squaring box from image
    preparation; "original" rows use the record's own box, aspect and
    box-to-image ratios included.
    """
    orig = meta.box
    ts = meta.timestamp_utc
    lon_x, lon_y, lat_z = utm_to_direction_components(meta.utm)
    sun_az = math.radians(meta.sun_azimuth_deg)
    tgt_az = math.radians(meta.target_azimuth_deg)
    rw = orig.w / meta.img_width_px
    rh = orig.h / meta.img_height_px
    return RawFeatures(
        gsd=meta.gsd_m,
        cloud_cover=meta.cloud_cover_pct,
        off_nadir=meta.off_nadir_deg,
        lon_x=lon_x,
        lon_y=lon_y,
        lat_z=lat_z,
        year=float(ts.year),
        month=float(ts.month - 1),
        day=float(ts.day),
        hour_minute=ts.hour + ts.minute / 60.0 + ts.second / 3600.0,
        sun_az_x=math.cos(sun_az),
        sun_az_y=math.sin(sun_az),
        sun_elev=meta.sun_elevation_deg,
        tgt_az_x=math.cos(tgt_az),
        tgt_az_y=math.sin(tgt_az),
        local_hour=local_solar_hour(ts, meta.utm),
        week_day=float(week_day(ts)),
        n_boxes=float(len(meta.boxes)),
        log_orig_box_w=math.log10(orig.w),
        log_orig_box_h=math.log10(orig.h),
        log_adj_box_w=math.log10(adjusted_box.w),
        log_adj_box_h=math.log10(adjusted_box.h),
        log_aspect=math.log10(orig.w / orig.h),
        aspect_minmax=min(orig.w, orig.h) / max(orig.w, orig.h),
        box_img_w_ratio=rw,
        box_img_h_ratio=rh,
        box_img_minmax_ratio=min(rw, rh) / max(rw, rh),
    )


class NormalizationSpec:
    """Per-feature affine map v -> 2*(v - lo)/(hi - lo) - 1, clamped to [-1, 1]."""

    def __init__(self, ranges: dict[str, tuple[float, float]] | None = None):
        ranges = dict(DEFAULT_RANGES if ranges is None else ranges)
        missing = [n for n in FEATURE_NAMES if n not in ranges]
        if missing:
            raise SchemaError(f"normalization spec missing features: {missing}")
        extra = sorted(set(ranges) - set(FEATURE_NAMES))
        if extra:
            raise SchemaError(f"normalization spec names unknown features: {extra}")
        for name in FEATURE_NAMES:
            lo, hi = ranges[name]
            if not hi > lo:
                raise ValidationError(f"range for {name!r} must satisfy hi > lo, got ({lo}, {hi})")
        self.ranges = {n: (float(ranges[n][0]), float(ranges[n][1])) for n in FEATURE_NAMES}
        self.lo = np.array([self.ranges[n][0] for n in FEATURE_NAMES])
        self.hi = np.array([self.ranges[n][1] for n in FEATURE_NAMES])

    @classmethod
    def default(cls) -> "NormalizationSpec":
        return cls(DEFAULT_RANGES)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "NormalizationSpec":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed normalization spec: {e.msg}", offset=e.pos) from None
        if not isinstance(obj, dict):
            raise SchemaError("normalization spec must be an object of feature -> {lo, hi}")
        ranges = {}
        for name, entry in obj.items():
            if not isinstance(entry, dict) or "lo" not in entry or "hi" not in entry:
                raise SchemaError(f"entry for {name!r} must be an object with lo and hi")
            ranges[name] = (float(entry["lo"]), float(entry["hi"]))
        return cls(ranges)

    def to_json_file(self, path: str | Path) -> None:
        obj = {n: {"lo": lo, "hi": hi} for n, (lo, hi) in self.ranges.items()}
        Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")

    def apply(self, raw: "RawFeatures | np.ndarray") -> np.ndarray:
        """Normalize one vector or a (n, 27) matrix; output clamped to [-1, 1]."""
        arr = raw.as_array() if isinstance(raw, RawFeatures) else np.asarray(arr_f64(raw))
        scaled = 2.0 * (arr - self.lo) / (self.hi - self.lo) - 1.0
        return np.clip(scaled, -1.0, 1.0)


def arr_f64(a) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if out.shape[-1] != N_FEATURES:
        raise ValidationError(f"expected {N_FEATURES} feature columns, got {out.shape[-1]}")
    return out


def normalize(raw: RawFeatures | np.ndarray, spec: NormalizationSpec | None = None) -> np.ndarray:
    spec = spec or NormalizationSpec.default()
    return spec.apply(raw)


def default_norm_spec_path() -> Path:
    from importlib.resources import files

    return Path(str(files("satfusion").joinpath("data/default_norm_spec.json")))


class MetadataFeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer: metadata records -> (n, 27) normalized features.

    The adjusted box is derived per record with the configured preparation
    mode, matching what the image pipeline would feed the CNNs.

    Parameters
    ----------
    norm_spec : NormalizationSpec or None
        Feature ranges; None selects the documented defaults.
    box_mode : {"enlarge", "square"}
        How the adjusted box is derived from the record's box.
    context_factor : float
        Proportional enlargement used in "enlarge" mode.
    """

    def __init__(self, norm_spec: NormalizationSpec | None = None,
                 box_mode: str = "enlarge", context_factor: float = 0.5):
        self.norm_spec = norm_spec
        self.box_mode = box_mode
        self.context_factor = context_factor

    def fit(self, X: Sequence[ImageMetadata], y=None):
        self._resolve()
        return self

    def _resolve(self) -> NormalizationSpec:
        if self.box_mode not in ("enlarge", "square"):
            raise ValidationError(f"box_mode must be 'enlarge' or 'square', got {self.box_mode!r}")
        if self.context_factor < 0:
            raise ValidationError(f"context_factor must be >= 0, got {self.context_factor}")
        return self.norm_spec or NormalizationSpec.default()

    def adjusted_box(self, meta: ImageMetadata) -> BoundingBox:
        if self.box_mode == "square":
            return square_box(meta.box, meta.img_width_px, meta.img_height_px)
        return enlarge_box(meta.box, self.context_factor, meta.img_width_px, meta.img_height_px)

    def transform(self, X: Sequence[ImageMetadata]) -> np.ndarray:
        spec = self._resolve()
        rows = np.empty((len(X), N_FEATURES), dtype=np.float64)
        for i, meta in enumerate(X):
            rows[i] = extract_raw_features(meta, self.adjusted_box(meta)).as_array()
        return spec.apply(rows)


def write_features_csv(path: str | Path, rows: Iterable[tuple[str, np.ndarray]]) -> int:
    """One row per (image, box): image_id column then the 27 features."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("image_id",) + FEATURE_NAMES)
        for image_id, vec in rows:
            writer.writerow([image_id] + [repr(float(v)) for v in vec])
            n += 1
    return n


def read_features_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["image_id", *FEATURE_NAMES]:
            raise SchemaError(f"{path}: unexpected feature CSV header")
        ids: list[str] = []
        values: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != N_FEATURES + 1:
                raise SchemaError(f"{path}:{lineno}: expected {N_FEATURES + 1} columns, got {len(row)}")
            ids.append(row[0])
            values.append([float(v) for v in row[1:]])
    if not ids:
        raise DataError(f"{path}: no feature rows")
    return ids, np.array(values, dtype=np.float64)
