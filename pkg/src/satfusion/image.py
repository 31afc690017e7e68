"""Image preparation geometry: box enlargement/squaring, crop, resize, augment.

Rasters are multi-band float32 grids stored (height, width, bands).  All
operations are pure; the container format is a one-line JSON header followed
by raw little-endian float32 samples, row-major and band-interleaved by
pixel, so it parses trivially in any language.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError, TruncatedFileError, ValidationError
from .metadata import BoundingBox

RASTER_DTYPE = "f32le"
N_AUGMENTS = 8


def _round_half_up(v: float) -> int:
    # round() would round halves to even; pixel geometry wants a fixed direction
    return math.floor(v + 0.5)


@dataclass(frozen=True)
class Raster:
    """Immutable multi-band image; ``samples`` has shape (height, width, bands)."""

    samples: np.ndarray

    def __post_init__(self):
        a = self.samples
        if a.ndim != 3:
            raise ValidationError(f"raster samples must be (h, w, bands), got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1 or a.shape[2] < 1:
            raise ValidationError(f"raster dims must be >= 1, got {a.shape}")
        if a.dtype != np.float32:
            object.__setattr__(self, "samples", a.astype(np.float32))
        self.samples.setflags(write=False)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def bands(self) -> int:
        return self.samples.shape[2]


def enlarge_box(box: BoundingBox, context_factor: float, img_w: int, img_h: int) -> BoundingBox:
    """Grow both dimensions by (1 + 2c) about the box center, then clamp.

    The enlarged box is intersected with the image; dimensions round half-up
    to whole pixels with a 1 px floor.
    """
    if context_factor < 0:
        raise ValidationError(f"context_factor must be >= 0, got {context_factor}")
    cx = box.x + box.w / 2.0
    cy = box.y + box.h / 2.0
    new_w = max(1, _round_half_up(box.w * (1.0 + 2.0 * context_factor)))
    new_h = max(1, _round_half_up(box.h * (1.0 + 2.0 * context_factor)))
    x0 = _round_half_up(cx - new_w / 2.0)
    y0 = _round_half_up(cy - new_h / 2.0)
    x_lo, y_lo = max(0, x0), max(0, y0)
    x_hi = min(img_w, x0 + new_w)
    y_hi = min(img_h, y0 + new_h)
    if x_hi - x_lo < 1 or y_hi - y_lo < 1:
        # unreachable for boxes that start inside the image
        raise ValidationError(
            f"enlarged box ({x0},{y0},{new_w},{new_h}) misses a {img_w}x{img_h} image"
        )
    return BoundingBox(x_lo, y_lo, x_hi - x_lo, y_hi - y_lo)


def square_box(box: BoundingBox, img_w: int, img_h: int) -> BoundingBox:
    """Grow the smaller dimension about the center until the box is square.

    If the square leaks past an edge it is shifted back into bounds; only
    when the image itself is too small is the side shrunk to fit.
    """
    side = max(box.w, box.h)
    side = min(side, img_w, img_h)
    cx = box.x + box.w / 2.0
    cy = box.y + box.h / 2.0
    x0 = _round_half_up(cx - side / 2.0)
    y0 = _round_half_up(cy - side / 2.0)
    x0 = min(max(x0, 0), img_w - side)
    y0 = min(max(y0, 0), img_h - side)
    return BoundingBox(x0, y0, side, side)


def crop(raster: Raster, box: BoundingBox) -> Raster:
    """Copy the boxed region, all bands."""
    if box.x + box.w > raster.width or box.y + box.h > raster.height:
        raise ValidationError(
            f"crop box ({box.x},{box.y},{box.w},{box.h}) exceeds "
            f"{raster.width}x{raster.height} raster"
        )
    region = raster.samples[box.y : box.y + box.h, box.x : box.x + box.w, :]
    return Raster(region.copy())


def resize(raster: Raster, target: int) -> Raster:
    """Bilinear resample to target x target, half-pixel-center alignment.

    Source coordinate of output pixel i is (i + 0.5) * (src/target) - 0.5,
    clamped at the borders.  Interpolation runs in float64 and casts back to
    float32; outputs stay within each band's [min, max] by convexity.
    """
    if target < 1:
        raise ValidationError(f"resize target must be >= 1, got {target}")
    src = raster.samples.astype(np.float64)

    def axis_coords(n_src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(target) + 0.5) * (n_src / target) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1.0)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_src - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis_coords(raster.height)
    x0, x1, fx = axis_coords(raster.width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bottom = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bottom * fy
    return Raster(out.astype(np.float32))


def augment(raster: Raster, transform_id: int) -> Raster:
    """One of the 8 square symmetries.

    ids 0-3: counterclockwise rotation by 0/90/180/270 degrees;
    ids 4-7: horizontal (left-right) flip followed by those rotations.
    """
    if not 0 <= transform_id < N_AUGMENTS:
        raise ValidationError(f"transform_id must be in 0..7, got {transform_id}")
    if raster.width != raster.height:
        raise ValidationError(
            f"augmentation requires a square raster, got {raster.width}x{raster.height}"
        )
    a = raster.samples
    if transform_id >= 4:
        a = a[:, ::-1, :]
    k = transform_id % 4
    if k:
        a = np.rot90(a, k=k, axes=(0, 1))
    return Raster(np.ascontiguousarray(a))


@dataclass(frozen=True)
class PrepPlan:
    """Serializable record of one preparation: source box -> adjusted box -> resize."""

    source_box: BoundingBox
    adjusted_box: BoundingBox
    mode: str
    target_size: int

    def to_dict(self) -> dict:
        return {
            "source_box": self.source_box.to_dict(),
            "adjusted_box": self.adjusted_box.to_dict(),
            "mode": self.mode,
            "target_size": self.target_size,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PrepPlan":
        try:
            sb, ab = obj["source_box"], obj["adjusted_box"]
            return cls(
                source_box=BoundingBox(sb["x"], sb["y"], sb["w"], sb["h"]),
                adjusted_box=BoundingBox(ab["x"], ab["y"], ab["w"], ab["h"]),
                mode=obj["mode"],
                target_size=int(obj["target_size"]),
            )
        except KeyError as e:
            raise SchemaError(f"prep plan missing key {e.args[0]!r}") from None


def plan_prep(box: BoundingBox, mode: str, context_factor: float, target_size: int,
              img_w: int, img_h: int) -> PrepPlan:
    """Compose the box adjustment with crop/resize parameters."""
    if mode == "enlarge":
        adjusted = enlarge_box(box, context_factor, img_w, img_h)
    elif mode == "square":
        adjusted = square_box(box, img_w, img_h)
    else:
        raise ValidationError(f"mode must be 'enlarge' or 'square', got {mode!r}")
    if target_size < 1:
        raise ValidationError(f"target_size must be >= 1, got {target_size}")
    return PrepPlan(source_box=box, adjusted_box=adjusted, mode=mode, target_size=target_size)


def apply_prep(raster: Raster, plan: PrepPlan) -> Raster:
    return resize(crop(raster, plan.adjusted_box), plan.target_size)


def write_raster(path: str | Path, raster: Raster) -> None:
    header = {
        "width": raster.width,
        "height": raster.height,
        "bands": raster.bands,
        "dtype": RASTER_DTYPE,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(raster.samples, dtype="<f4").tobytes())


def read_raster(path: str | Path) -> Raster:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ParseError(f"{path}: malformed raster header") from None
        for key in ("width", "height", "bands", "dtype"):
            if key not in header:
                raise SchemaError(f"{path}: raster header missing {key!r}", field=key)
        if header["dtype"] != RASTER_DTYPE:
            raise ValidationError(f"{path}: unsupported dtype {header['dtype']!r}")
        w, h, b = int(header["width"]), int(header["height"]), int(header["bands"])
        expected = w * h * b * 4
        payload = fh.read(expected)
        if len(payload) < expected:
            raise TruncatedFileError(
                f"{path}: expected {expected} sample bytes, found {len(payload)}"
            )
    samples = np.frombuffer(payload, dtype="<f4").reshape(h, w, b)
    return Raster(samples.copy())
