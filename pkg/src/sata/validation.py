"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError


def as_sample_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite float64 (n_samples, n_features) matrix."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-d (samples, features), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} has no samples")
    if not np.isfinite(arr).all():
        raise NumericError(f"{name} contains non-finite values")
    return arr


def as_label_vector(y, n_rows: int | None = None, name: str = "y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-d, got shape {arr.shape}")
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ShapeError(f"{name} has {arr.shape[0]} entries for {n_rows} samples")
    return arr.astype(np.int64)


def check_feature_dim(X: np.ndarray, expected: int, name: str = "X") -> None:
    if X.shape[1] != expected:
        raise ShapeError(f"{name} has {X.shape[1]} features, model expects {expected}")
