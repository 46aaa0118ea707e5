"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .exceptions import ArgumentError, DataError, DimensionError


def check_cloud(points, name: str = "points", min_points: int = 1) -> np.ndarray:
    """Validate one cloud and return it as float64 (N, 3)."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise DataError(f"{name} needs at least {min_points} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains NaN or infinite coordinates")
    return arr


def check_clouds(X, n_points: Optional[int] = None, name: str = "X") -> np.ndarray:
    """Validate a batch of equally sized clouds; returns float64 (B, N, 3).

    A single (N, 3) cloud is promoted to a batch of one.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"{name} must have shape (B, N, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError(f"{name} is empty")
    if n_points is not None and arr.shape[1] != n_points:
        raise DimensionError(f"{name} clouds have {arr.shape[1]} points; expected {n_points}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains NaN or infinite coordinates")
    return arr


def check_labels(y, shape: tuple, n_labels: Optional[int] = None, name: str = "y") -> np.ndarray:
    """Validate integer labels of an exact shape, optionally within [0, n_labels)."""
    arr = np.asarray(y)
    if arr.shape != tuple(shape):
        raise DimensionError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DataError(f"{name} must hold integer labels")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise DataError(f"{name} holds negative labels")
    if n_labels is not None and arr.size and arr.max() >= n_labels:
        raise DataError(f"{name} holds label {arr.max()} but only {n_labels} are configured")
    return arr


def check_sample_count(m: int, n: int) -> int:
    if isinstance(m, bool) or int(m) != m:
        raise ArgumentError(f"sample count must be an integer, got {m!r}")
    m = int(m)
    if not 1 <= m <= n:
        raise ArgumentError(f"sample count m={m} must lie in [1, N={n}]")
    return m


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ArgumentError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
