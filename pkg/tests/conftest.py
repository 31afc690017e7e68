"""Shared fixtures and record factories for the test suite."""

from __future__ import annotations

import os
from datetime import datetime, timezone

import pytest

from satfusion import BoundingBox, ImageMetadata

# Environment for subprocess runs that must be bit-reproducible: BLAS thread
# counts pinned so float64 matmul reductions happen in a fixed order.
PINNED_ENV = {
    **os.environ,
    "OPENBLAS_NUM_THREADS": "1",
    "OMP_NUM_THREADS": "1",
    "MKL_NUM_THREADS": "1",
    "VECLIB_MAXIMUM_THREADS": "1",
    "NUMEXPR_NUM_THREADS": "1",
    "PYTHONHASHSEED": "0",
}


def make_metadata(**overrides) -> ImageMetadata:
    """A valid record with every field overridable."""
    fields = dict(
        image_id="img_0",
        sequence_id="seq_0",
        gsd_m=0.5,
        cloud_cover_pct=10.0,
        off_nadir_deg=12.0,
        utm="31U",
        timestamp_utc=datetime(2016, 7, 1, 12, 0, 0, tzinfo=timezone.utc),
        sun_azimuth_deg=135.0,
        sun_elevation_deg=45.0,
        target_azimuth_deg=200.0,
        img_width_px=1000,
        img_height_px=800,
        boxes=(BoundingBox(100, 100, 40, 20),),
        box_index=0,
    )
    fields.update(overrides)
    return ImageMetadata(**fields)


@pytest.fixture
def metadata_record() -> ImageMetadata:
    return make_metadata()
