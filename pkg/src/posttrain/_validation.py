"""Input validation helpers and the package's exception types."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """A configuration value is missing, malformed or out of range."""


class StructureError(ValueError):
    """A conversation violates the role-sequence rules.

    ``index`` is the position of the offending message (or ``None`` when the
    problem is not attributable to one message, e.g. an empty conversation).
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"message {index}: {message}")
        self.index = index


class CoverageError(ValueError):
    """Pairwise verdicts do not cover each response exactly twice."""


class FrozenStateError(RuntimeError):
    """A mutation was attempted on a frozen router view."""


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive(value: float, name: str, *, allow_zero: bool = False) -> float:
    if allow_zero:
        if not value >= 0:
            raise ConfigError(f"{name} must be >= 0, got {value}")
    elif not value > 0:
        raise ConfigError(f"{name} must be > 0, got {value}")
    return value


def check_in_range(value: float, lo: float, hi: float, name: str) -> float:
    if not lo <= value <= hi:
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return value


def check_vector(values: Iterable[float], name: str, *, min_len: int = 1, dtype=float) -> np.ndarray:
    """Return ``values`` as a 1-d array, rejecting wrong rank, NaN and short input."""
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.shape[0] < min_len:
        raise ValueError(f"{name} needs at least {min_len} entries, got {arr.shape[0]}")
    if arr.dtype.kind == "f" and np.isnan(arr).any():
        raise ValueError(f"{name} contains NaN")
    return arr


def check_matrix(values, name: str, *, n_cols: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise ValueError(f"{name} must have {n_cols} columns, got {arr.shape[1]}")
    return arr


def check_lengths(values: Sequence[int], name: str, *, min_len: int = 1) -> np.ndarray:
    arr = check_vector(values, name, min_len=min_len)
    if (arr < 0).any():
        raise ValueError(f"{name} must be non-negative")
    return arr
