"""Small input-checking helpers shared by the estimators and model types."""

import numbers

import numpy as np


class DomainError(ValueError):
    """A parameter value lies outside the domain of a curve or signal."""


class SolverDivergenceError(RuntimeError):
    """An iterate of the MAP solver became non-finite."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite iterate at iteration {iteration}")


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


def check_positive(value, name, allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")
    return float(value)


def check_int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_vector(x, name, length=None, nonnegative=False, dtype=float):
    """Return ``x`` as a finite 1-D array, optionally of fixed length."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1:
        arr = arr.ravel()
    if length is not None and arr.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if nonnegative and np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")
    return arr


def check_point(p, name):
    arr = np.asarray(p, dtype=float)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be a finite 3-vector, got {p!r}")
    return arr
