"""Small input-validation helpers shared by the estimators and core ops."""

import numpy as np

from .exceptions import DimensionMismatch, ValidationError


def as_float_array(values, name="values"):
    """Coerce to a float64 ndarray, rejecting non-finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_vector(values, size, name="values"):
    arr = as_float_array(values, name)
    if arr.shape != (size,):
        raise DimensionMismatch(f"{name} must have shape ({size},), got {arr.shape}")
    return arr


def check_square_frame(values, name="frame"):
    """Accept an (n, n) or (n*n,) array; return it flattened with its side n."""
    arr = as_float_array(values, name)
    if arr.ndim == 2:
        if arr.shape[0] != arr.shape[1]:
            raise DimensionMismatch(f"{name} must be square, got {arr.shape}")
        return arr.reshape(-1), arr.shape[0]
    if arr.ndim == 1:
        side = int(round(np.sqrt(arr.size)))
        if side * side != arr.size:
            raise DimensionMismatch(
                f"{name} length {arr.size} is not a perfect square"
            )
        return arr, side
    raise DimensionMismatch(f"{name} must be 1-D or 2-D, got ndim={arr.ndim}")


def check_same_grid(a, b, what="fields"):
    if a.grid != b.grid:
        raise DimensionMismatch(
            f"{what} live on different grids: n={a.grid.n} vs n={b.grid.n}"
        )


def check_positive(value, name):
    if not value > 0:
        raise ValidationError(f"{name} must be positive, got {value!r}")
    return value


def check_fraction(value, name):
    if not 0.0 <= value < 1.0:
        raise ValidationError(f"{name} must be in [0, 1), got {value!r}")
    return value
