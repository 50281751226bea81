"""Input checks applied before any pipeline does work.

Every check raises ``ValueError`` with a message naming the offending
argument and, where it applies, the first offending index.
"""
from typing import Sequence

import numpy as np


def finite_vector(values: Sequence[float], name: str) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if array.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {array.shape}")
    if array.size == 0:
        raise ValueError(f"{name} must not be empty")
    bad = np.flatnonzero(~np.isfinite(array))
    if bad.size:
        raise ValueError(
            f"{name} contains a non-finite value {array[bad[0]]!r} at index {int(bad[0])}"
        )
    return array


def finite_matrix(samples, name: str, min_rows: int = 1) -> np.ndarray:
    """Coerce samples to an (n, d) float array; a 1-D input becomes one column."""
    array = np.asarray(samples, dtype=float)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2:
        raise ValueError(f"{name} must be a list of vectors, got shape {array.shape}")
    if array.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {array.shape[0]}")
    if array.shape[1] == 0:
        raise ValueError(f"{name} has zero columns")
    bad = np.argwhere(~np.isfinite(array))
    if bad.size:
        row, col = (int(i) for i in bad[0])
        raise ValueError(f"{name} contains a non-finite value at row {row}, column {col}")
    return array


def same_dimension(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> None:
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"{name_a} has dimension {a.shape[1]} but {name_b} has dimension {b.shape[1]}"
        )


def positive_count(value: int, name: str, minimum: int = 1) -> int:
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
