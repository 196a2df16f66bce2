"""Input validation helpers used at public API boundaries."""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    """Return ``arr`` as a float64 array, rejecting NaN/inf values."""
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_2d(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2D field, got shape {arr.shape}")
    return arr


def check_same_shape(a, b, name_a: str, name_b: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ValidationError(
            f"{name_a} shape {np.shape(a)} does not match {name_b} shape {np.shape(b)}"
        )


def check_in_unit_interval(arr: np.ndarray, name: str) -> np.ndarray:
    arr = check_finite(arr, name)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value}")
    return value


def check_nonnegative(value: float, name: str) -> float:
    value = float(value)
    if not value >= 0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return value
