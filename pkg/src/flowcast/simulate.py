"""Synthetic scene generators with known ground-truth motion.

Three regimes:

* ``translating-blobs`` — Gaussian bumps moving in straight lines (bouncing
  off the walls), evaluated analytically each step.  Diffusion widens the
  bumps exactly (sd^2 grows by 2 D per step).
* ``rotational-flow`` — the same bumps orbiting the domain center.
* ``advection-diffusion`` — a lattice PDE integrator: semi-Lagrangian
  advection with bilinear interpolation, an explicit five-point diffusion
  step, and fresh spatially-correlated forcing each step.

Every regime records the true per-pixel motion (in cells per step) alongside
the frames so flow-recovery checks can compare against it.  The simulator is
deliberately not the forecasting model's own kernel machinery.
"""

import math
from dataclasses import dataclass

import numpy as np

from .enkf import Observations
from .exceptions import ConfigError, TooManyPixels, UnstableConfig
from .grid import GridSpec
from .likelihood import NoiseParams, noise_covariance

REGIMES = ("translating-blobs", "advection-diffusion", "rotational-flow")

_DIFFUSION_STABILITY = 0.25  # explicit 5-point step: D * dt / dx^2 <= 1/4


@dataclass(frozen=True)
class SimConfig:
    """Scene parameters.  Lengths are in cell units; speeds in cells/step."""

    n: int
    t_steps: int
    tau: int
    regime: str = "translating-blobs"
    amplitude: float = 1.0
    diffusion: float = 0.0
    forcing_sigma2: float = 0.0
    forcing_rho: float = 0.05
    seed: int = 0
    n_blobs: int = 3
    blob_sd: float = 1.5
    speed_range: tuple = (1.0, 1.0)  # per-blob speed = amplitude * U[lo, hi]
    direction: float = None  # radians; None draws one per blob
    start: tuple = None  # (row, col) of the first blob; None draws it
    static_fraction: float = 0.0  # chance the whole scene has zero motion
    periodic: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.t_steps <= self.tau:
            raise ConfigError(
                f"need t_steps > tau, got t_steps={self.t_steps} tau={self.tau}"
            )
        if self.amplitude < 0 or self.amplitude > self.n / 4:
            raise UnstableConfig(
                f"amplitude {self.amplitude} outside [0, n/4] = [0, {self.n / 4}]"
            )
        if self.regime == "advection-diffusion" and self.diffusion > _DIFFUSION_STABILITY:
            raise UnstableConfig(
                f"diffusion {self.diffusion} exceeds the explicit-step bound "
                f"{_DIFFUSION_STABILITY}"
            )
        if self.diffusion < 0:
            raise ConfigError(f"diffusion must be >= 0, got {self.diffusion}")
        if self.forcing_sigma2 < 0:
            raise ConfigError(f"forcing_sigma2 must be >= 0, got {self.forcing_sigma2}")
        lo, hi = self.speed_range
        if not (0.0 <= lo <= hi):
            raise ConfigError(f"speed_range must satisfy 0 <= lo <= hi, got {self.speed_range}")


@dataclass(frozen=True)
class SimResult:
    """frames: (T, n^2) raw fields; flows: (T, n^2, 2) true (dx, dy) cells/step."""

    config: SimConfig
    frames: np.ndarray
    flows: np.ndarray


def _forcing_chol(grid, config):
    if config.forcing_sigma2 <= 0:
        return None
    params = NoiseParams(sigma2=config.forcing_sigma2, rho=config.forcing_rho)
    return noise_covariance(grid, params).chol


def _lattice_points(n):
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return rows.ravel().astype(np.float64), cols.ravel().astype(np.float64)


def _blob_field(rows, cols, positions, sd):
    """Sum of unit-height Gaussian bumps at continuous (row, col) positions."""
    field = np.zeros(rows.size)
    for p in positions:
        d2 = (rows - p[0]) ** 2 + (cols - p[1]) ** 2
        field += np.exp(-d2 / (2.0 * sd * sd))
    return field


def _nearest_blob_flow(rows, cols, positions, velocities):
    d2 = np.stack(
        [(rows - p[0]) ** 2 + (cols - p[1]) ** 2 for p in positions], axis=0
    )
    nearest = np.argmin(d2, axis=0)
    vel = np.asarray(velocities)  # (B, 2) as (d_row, d_col)
    flow = np.empty((rows.size, 2))
    flow[:, 0] = vel[nearest, 1]  # dx: column motion
    flow[:, 1] = vel[nearest, 0]  # dy: row motion
    return flow


def _draw_blobs(config, rng):
    n = config.n
    positions = rng.uniform(0.25 * n, 0.75 * n, size=(config.n_blobs, 2))
    if config.start is not None:
        positions[0] = np.asarray(config.start, dtype=np.float64)
    lo, hi = config.speed_range
    speeds = config.amplitude * rng.uniform(lo, hi, size=config.n_blobs)
    if config.direction is None:
        angles = rng.uniform(0.0, 2.0 * math.pi, size=config.n_blobs)
    else:
        angles = np.full(config.n_blobs, float(config.direction))
    # angle 0 points east (+column); velocity stored as (d_row, d_col)
    velocities = np.stack([speeds * np.sin(angles), speeds * np.cos(angles)], axis=1)
    if config.static_fraction > 0 and rng.random() < config.static_fraction:
        velocities[:] = 0.0
    return positions, velocities


def _bounce(positions, velocities, n):
    """Reflect blob positions off the [0, n] box, flipping velocity signs."""
    for axis in range(2):
        over = positions[:, axis] > n
        under = positions[:, axis] < 0
        positions[over, axis] = 2.0 * n - positions[over, axis]
        positions[under, axis] = -positions[under, axis]
        velocities[over | under, axis] *= -1.0


def _simulate_blobs(config, rng, rotate):
    n = config.n
    rows, cols = _lattice_points(n)
    positions, velocities = _draw_blobs(config, rng)
    center = np.array([n / 2.0, n / 2.0])
    omega = config.amplitude / max(n / 4.0, 1.0)  # rad/step at quarter-domain radius
    if config.static_fraction > 0 and rotate and np.all(velocities == 0):
        omega = 0.0
    chol = _forcing_chol(GridSpec(n=n), config)
    frames = np.empty((config.t_steps, n * n))
    flows = np.empty((config.t_steps, n * n, 2))
    sd2 = config.blob_sd**2
    for t in range(config.t_steps):
        sd_t = math.sqrt(sd2 + 2.0 * config.diffusion * t)
        frames[t] = _blob_field(rows, cols, positions, sd_t)
        if chol is not None:
            frames[t] += chol @ rng.standard_normal(n * n)
        if rotate:
            rel = positions - center
            cos_o, sin_o = math.cos(omega), math.sin(omega)
            new_rel = np.empty_like(rel)
            new_rel[:, 0] = cos_o * rel[:, 0] - sin_o * rel[:, 1]
            new_rel[:, 1] = sin_o * rel[:, 0] + cos_o * rel[:, 1]
            step_vel = (center + new_rel) - positions
        else:
            step_vel = velocities.copy()
        flows[t] = _nearest_blob_flow(rows, cols, positions, step_vel)
        positions = positions + step_vel
        if not rotate:
            _bounce(positions, velocities, n)
    return frames, flows


def _bilinear_sample(field2d, rows, cols, periodic):
    n = field2d.shape[0]
    if periodic:
        r0 = np.floor(rows).astype(np.int64)
        c0 = np.floor(cols).astype(np.int64)
        fr = rows - r0
        fc = cols - c0
        r0m, r1m = r0 % n, (r0 + 1) % n
        c0m, c1m = c0 % n, (c0 + 1) % n
    else:
        rows = np.clip(rows, 0.0, n - 1.0)
        cols = np.clip(cols, 0.0, n - 1.0)
        r0 = np.floor(rows).astype(np.int64)
        c0 = np.floor(cols).astype(np.int64)
        r0 = np.minimum(r0, n - 2) if n > 1 else r0
        c0 = np.minimum(c0, n - 2) if n > 1 else c0
        fr = rows - r0
        fc = cols - c0
        r0m, r1m = r0, r0 + 1
        c0m, c1m = c0, c0 + 1
    return (
        field2d[r0m, c0m] * (1 - fr) * (1 - fc)
        + field2d[r1m, c0m] * fr * (1 - fc)
        + field2d[r0m, c1m] * (1 - fr) * fc
        + field2d[r1m, c1m] * fr * fc
    )


def _laplacian(field2d, periodic):
    if periodic:
        return (
            np.roll(field2d, 1, axis=0)
            + np.roll(field2d, -1, axis=0)
            + np.roll(field2d, 1, axis=1)
            + np.roll(field2d, -1, axis=1)
            - 4.0 * field2d
        )
    padded = np.pad(field2d, 1, mode="edge")
    return (
        padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]
        - 4.0 * field2d
    )


def _simulate_pde(config, rng):
    n = config.n
    rows, cols = _lattice_points(n)
    positions, _ = _draw_blobs(config, rng)
    field = _blob_field(rows, cols, positions, config.blob_sd).reshape(n, n)
    if config.direction is None:
        angle = rng.uniform(0.0, 2.0 * math.pi)
    else:
        angle = float(config.direction)
    speed = config.amplitude
    if config.static_fraction > 0 and rng.random() < config.static_fraction:
        speed = 0.0
    v_row, v_col = speed * math.sin(angle), speed * math.cos(angle)
    chol = _forcing_chol(GridSpec(n=n), config)
    frames = np.empty((config.t_steps, n * n))
    flows = np.empty((config.t_steps, n * n, 2))
    flows[:, :, 0] = v_col
    flows[:, :, 1] = v_row
    row_grid = rows.reshape(n, n)
    col_grid = cols.reshape(n, n)
    for t in range(config.t_steps):
        frames[t] = field.ravel()
        advected = _bilinear_sample(
            field, row_grid - v_row, col_grid - v_col, config.periodic
        )
        field = advected + config.diffusion * _laplacian(advected, config.periodic)
        if chol is not None:
            field = field + (chol @ rng.standard_normal(n * n)).reshape(n, n)
    return frames, flows


def simulate(config):
    """Generate one sequence; deterministic in config (including seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    if config.regime == "translating-blobs":
        frames, flows = _simulate_blobs(config, rng, rotate=False)
    elif config.regime == "rotational-flow":
        frames, flows = _simulate_blobs(config, rng, rotate=True)
    else:
        frames, flows = _simulate_pde(config, rng)
    return SimResult(config=config, frames=frames, flows=flows)


def sample_observations(frames, n_pixels, sigma2_eps, seed, times=None):
    """Noisy point observations of the frames: a fresh uniform pixel subset
    (without replacement) per step, Gaussian errors with known variance.

    frames: (T, n^2).  Returns a list of Observations, one per requested time
    (default: every frame).  Draws are keyed by (seed, t) so a subset of
    times reproduces the full run's values at those times.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n2 = frames.shape[1]
    if n_pixels > n2:
        raise TooManyPixels(f"requested {n_pixels} pixels on a {n2}-pixel grid")
    if sigma2_eps < 0:
        raise ConfigError(f"sigma2_eps must be >= 0, got {sigma2_eps}")
    if times is None:
        times = range(frames.shape[0])
    sd = math.sqrt(sigma2_eps)
    out = []
    for t in times:
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(t)]))
        idx = np.sort(rng.choice(n2, size=n_pixels, replace=False))
        values = frames[t, idx] + sd * rng.standard_normal(n_pixels)
        out.append(
            Observations(
                t=int(t), pixel_indices=idx, values=values, sigma2_eps=float(sigma2_eps)
            )
        )
    return out
