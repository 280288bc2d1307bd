"""Unit-square lattice, field containers, and per-frame standardization.

The domain is always [0, 1]^2 discretized into n x n equal cells indexed
row-major: pixel i has (row, col) = (i // n, i % n) and center
((col + 0.5)/n, (row + 0.5)/n).  The x axis runs along columns, y along
rows, so a flow with positive x component moves mass toward larger column
indices.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import (
    BorderTooLarge,
    DegenerateFrame,
    DimensionMismatch,
    InsufficientFrames,
    ValidationError,
)
from .validation import as_float_array

SD_FLOOR = 1e-8


@dataclass(frozen=True)
class GridSpec:
    """Square lattice on the unit square; n is the pixel count per side."""

    n: int

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 4:
            raise ValidationError(f"grid side must be an integer >= 4, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def size(self):
        return self.n * self.n

    @property
    def cell_area(self):
        return 1.0 / (self.n * self.n)

    @property
    def cell_width(self):
        return 1.0 / self.n

    @property
    def cell_centers(self):
        """(n^2, 2) array of (x, y) centers, row-major, strictly inside (0,1)^2."""
        return _cell_centers(self.n)

    def index_of(self, row, col):
        if not (0 <= row < self.n and 0 <= col < self.n):
            raise ValidationError(f"pixel ({row}, {col}) outside grid of side {self.n}")
        return row * self.n + col

    def rowcol_of(self, index):
        if not (0 <= index < self.size):
            raise ValidationError(f"pixel index {index} outside grid of size {self.size}")
        return index // self.n, index % self.n


@lru_cache(maxsize=32)
def _cell_centers(n):
    rows, cols = np.divmod(np.arange(n * n), n)
    centers = np.empty((n * n, 2))
    centers[:, 0] = (cols + 0.5) / n
    centers[:, 1] = (rows + 0.5) / n
    centers.setflags(write=False)
    return centers


@lru_cache(maxsize=16)
def pairwise_center_offsets(n):
    """(n^2, n^2, 2) array of s_i - u_j center differences (cached, read-only)."""
    c = _cell_centers(n)
    diff = c[:, None, :] - c[None, :, :]
    diff.setflags(write=False)
    return diff


@lru_cache(maxsize=16)
def pairwise_center_distances(n):
    """(n^2, n^2) Euclidean distances between cell centers (cached, read-only)."""
    off = pairwise_center_offsets(n)
    d = np.sqrt((off ** 2).sum(-1))
    d.setflags(write=False)
    return d


@dataclass(frozen=True)
class Field:
    """One scalar frame on a grid; values are flat, row-major, read-only."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = as_float_array(self.values, "field values")
        if vals.ndim == 2:
            vals = vals.reshape(-1)
        if vals.shape != (self.grid.size,):
            raise DimensionMismatch(
                f"field has {vals.shape} values for grid of size {self.grid.size}"
            )
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def as_image(self):
        return self.values.reshape(self.grid.n, self.grid.n)


@dataclass(frozen=True)
class FrameWindow:
    """tau consecutive frames on one grid, ordered oldest to newest."""

    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise InsufficientFrames(f"window needs >= 2 frames, got {len(frames)}")
        grid = frames[0].grid
        for f in frames[1:]:
            if f.grid != grid:
                raise DimensionMismatch("window frames live on different grids")
        object.__setattr__(self, "frames", frames)

    @property
    def tau(self):
        return len(self.frames)

    @property
    def grid(self):
        return self.frames[0].grid

    @property
    def newest(self):
        return self.frames[-1]

    def stack(self):
        """(tau, n^2) array, oldest first."""
        return np.stack([f.values for f in self.frames])


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-frame affine record; unstandardize(x) = x * sd + mean."""

    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValidationError(f"record sd must be > 0, got {self.sd!r}")


def standardize(frame):
    """Center and scale one frame to mean 0, sd 1 (population sd).

    Raises DegenerateFrame when the empirical sd is at or below 1e-8.
    Returns (standardized Field, StandardizationRecord).
    """
    mean = float(np.mean(frame.values))
    sd = float(np.std(frame.values))
    if sd <= SD_FLOOR:
        raise DegenerateFrame(f"frame sd {sd:.3e} is at or below the floor {SD_FLOOR:.0e}")
    out = Field(frame.grid, (frame.values - mean) / sd)
    return out, StandardizationRecord(mean=mean, sd=sd)


def unstandardize(frame, record):
    """Invert standardize: values * sd + mean."""
    return Field(frame.grid, frame.values * record.sd + record.mean)


def standardize_values(values):
    """Array version of standardize for internal pipelines; returns (arr, mean, sd)."""
    mean = float(np.mean(values))
    sd = float(np.std(values))
    if sd <= SD_FLOOR:
        raise DegenerateFrame(f"frame sd {sd:.3e} is at or below the floor {SD_FLOOR:.0e}")
    return (np.asarray(values, dtype=np.float64) - mean) / sd, mean, sd


def interior_mask(grid, border):
    """Boolean mask (flat, row-major) keeping pixels >= border cells from the edge."""
    if border < 0:
        raise ValidationError(f"border must be >= 0, got {border}")
    if 2 * border >= grid.n:
        raise BorderTooLarge(f"border {border} leaves no interior on a side-{grid.n} grid")
    rows, cols = np.divmod(np.arange(grid.size), grid.n)
    keep = (rows >= border) & (rows < grid.n - border)
    keep &= (cols >= border) & (cols < grid.n - border)
    return keep
