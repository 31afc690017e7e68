"""Input validation helpers shared by the estimators and pipeline functions."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .metadata import N_CLASSES

PROB_SUM_TOL = 1e-6


def as_2d(X, n_cols: int, name: str) -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != n_cols:
        raise ValidationError(f"{name} must have {n_cols} columns, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_probability_matrix(P, n_classes: int = N_CLASSES, *, tol: float = PROB_SUM_TOL,
                             name: str = "probabilities") -> np.ndarray:
    """(n, n_classes) rows of non-negative entries summing to 1 within tol."""
    arr = as_2d(P, n_classes, name)
    if np.any(arr < 0):
        i, j = np.argwhere(arr < 0)[0]
        raise ValidationError(f"{name}[{i},{j}] is negative: {arr[i, j]}")
    sums = arr.sum(axis=1)
    bad = np.argwhere(np.abs(sums - 1.0) > tol)
    if bad.size:
        i = int(bad[0][0])
        raise ValidationError(f"{name} row {i} sums to {sums[i]!r}, expected 1 within {tol}")
    return arr


def check_feature_matrix(F, n_features: int, *, name: str = "features") -> np.ndarray:
    """(n, n_features) rows with every component in [-1, 1]."""
    arr = as_2d(F, n_features, name)
    if np.any(arr < -1.0) or np.any(arr > 1.0):
        i, j = np.argwhere((arr < -1.0) | (arr > 1.0))[0]
        raise ValidationError(f"{name}[{i},{j}] = {arr[i, j]} outside [-1, 1]")
    return arr


def check_labels(y, n_classes: int = N_CLASSES, *, name: str = "labels") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size and (not np.issubdtype(arr.dtype, np.integer)):
        as_int = arr.astype(np.int64)
        if np.any(as_int != arr):
            raise ValidationError(f"{name} must be integer class ids")
        arr = as_int
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        bad = int(np.argwhere((arr < 0) | (arr >= n_classes))[0][0])
        raise ValidationError(f"{name}[{bad}] = {arr[bad]} outside 0..{n_classes - 1}")
    return arr
