"""Spatially varying transition kernels on the lattice.

The one-step dynamics are Y_{t+1}(s) = integral k(s, u; theta(s)) Y_t(u) du
with a squared-exponential kernel

    k(s, u) = 1/(4 pi theta1) * exp(-||s - (theta2, theta3) - u||^2 / (4 theta1)),

so theta1 > 0 controls spread and (theta2, theta3) shifts mass toward
+(theta2, theta3).  The integral is discretized by the midpoint rule on the
cell centers: K[i, j] = cell_area * k(s_i, u_j; theta(s_i)).  The theta
fields are low-rank: theta_i = Phi w_i for a Gaussian radial basis Phi, with
a softplus link keeping theta1 positive.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import (
    DimensionMismatch,
    NonpositiveDiffusion,
    NotPerfectSquare,
    ValidationError,
)
from .grid import GridSpec, Field, pairwise_center_offsets
from .validation import as_float_array

THETA_MIN = 1e-6

# Build K in row blocks once the full (B, n^2, n^2, 2) offset tensor would be
# too large to hold comfortably.
_BLOCK_ENTRIES = 2 ** 24


@dataclass(frozen=True)
class RbfBasis:
    """Gaussian radial basis on a regular sqrt(r) x sqrt(r) grid of centers."""

    r: int
    bandwidth: float
    centers: np.ndarray
    matrix: np.ndarray  # Phi, (n^2, r)
    grid: GridSpec


def build_rbf_basis(grid, r, bandwidth=None):
    """Construct Phi[i, j] = exp(-||s_i - c_j||^2 / (2 bandwidth^2)).

    r must be a perfect square; centers sit at ((i+0.5)/sqrt(r), (j+0.5)/sqrt(r)).
    bandwidth defaults to 1.5 / sqrt(r).
    """
    if r < 1:
        raise ValidationError(f"basis size must be >= 1, got {r}")
    m = int(round(np.sqrt(r)))
    if m * m != r:
        raise NotPerfectSquare(f"basis size {r} is not a perfect square")
    if bandwidth is None:
        bandwidth = 1.5 / m
    if not bandwidth > 0:
        raise ValidationError(f"bandwidth must be positive, got {bandwidth}")
    rows, cols = np.divmod(np.arange(r), m)
    centers = np.column_stack([(cols + 0.5) / m, (rows + 0.5) / m])
    d2 = ((grid.cell_centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    phi = np.exp(-d2 / (2.0 * bandwidth * bandwidth))
    phi.setflags(write=False)
    centers.setflags(write=False)
    return RbfBasis(r=r, bandwidth=float(bandwidth), centers=centers, matrix=phi, grid=grid)


@dataclass(frozen=True)
class DynamicsWeights:
    """Basis coefficients (w1, w2, w3) for diffusion and the two advection axes."""

    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray

    def __post_init__(self):
        for name in ("w1", "w2", "w3"):
            arr = as_float_array(getattr(self, name), name)
            object.__setattr__(self, name, arr)
        if not (self.w1.shape == self.w2.shape == self.w3.shape):
            raise DimensionMismatch("w1, w2, w3 must share a shape")


@dataclass(frozen=True)
class ThetaFields:
    """Per-pixel kernel parameters: theta1 > 0, theta2/theta3 unconstrained."""

    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    grid: GridSpec


def softplus(x):
    return np.logaddexp(0.0, x)


def theta_fields(basis, weights, theta_min=THETA_MIN):
    """Expand coefficients to pixel fields; theta1 = softplus(Phi w1) + theta_min."""
    if weights.w1.shape != (basis.r,):
        raise DimensionMismatch(
            f"weights have shape {weights.w1.shape}, basis has r={basis.r}"
        )
    phi = basis.matrix
    z1 = phi @ weights.w1
    return ThetaFields(
        theta1=softplus(z1) + theta_min,
        theta2=phi @ weights.w2,
        theta3=phi @ weights.w3,
        grid=basis.grid,
    )


def theta_fields_batch(basis, w1, w2, w3, theta_min=THETA_MIN):
    """Batched expansion: w* are (B, r); returns (B, n^2) arrays and z1 for the chain rule."""
    phi_t = basis.matrix.T
    z1 = w1 @ phi_t
    return softplus(z1) + theta_min, w2 @ phi_t, w3 @ phi_t, z1


def kernel_value(s, u, theta1, theta2, theta3):
    """Evaluate k(s, u; theta).  s, u are (..., 2); theta broadcast against them."""
    theta1 = np.asarray(theta1, dtype=np.float64)
    if np.any(theta1 <= 0):
        raise NonpositiveDiffusion("theta1 must be strictly positive")
    s = np.asarray(s, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    dx = s[..., 0] - theta2 - u[..., 0]
    dy = s[..., 1] - theta3 - u[..., 1]
    h2 = dx * dx + dy * dy
    return np.exp(-h2 / (4.0 * theta1)) / (4.0 * np.pi * theta1)


@dataclass(frozen=True)
class TransitionMatrix:
    """Dense discretized kernel operator K with its grid."""

    matrix: np.ndarray
    grid: GridSpec


def transition_matrix(theta, grid, trunc_tol=0.0):
    """Build K[i, j] = cell_area * k(s_i, u_j; theta(s_i)) (dense, float64).

    trunc_tol > 0 zeroes entries below the threshold (useful for large n).
    """
    if theta.grid != grid:
        raise DimensionMismatch("theta fields and grid disagree")
    k = _transition_batch(
        theta.theta1[None], theta.theta2[None], theta.theta3[None], grid
    )[0]
    if trunc_tol > 0.0:
        k[k < trunc_tol] = 0.0
    return TransitionMatrix(matrix=k, grid=grid)


def _transition_batch(theta1, theta2, theta3, grid, with_aux=False):
    """K for a batch of theta fields: inputs (B, n^2) -> K (B, n^2, n^2).

    with_aux additionally returns (kernel, dx, dy, h2) needed for gradients.
    Memory is bounded by processing row blocks.
    """
    if np.any(theta1 <= 0):
        raise NonpositiveDiffusion("theta1 must be strictly positive")
    b, n2 = theta1.shape
    if n2 != grid.size:
        raise DimensionMismatch(f"theta fields sized {n2} on grid of size {grid.size}")
    offsets = pairwise_center_offsets(grid.n)  # (n^2, n^2, 2), s_i - u_j
    area = grid.cell_area
    out = np.empty((b, n2, n2))
    aux = None
    if with_aux:
        aux = (
            np.empty((b, n2, n2)),  # kernel k (without area)
            np.empty((b, n2, n2)),  # dx
            np.empty((b, n2, n2)),  # dy
            np.empty((b, n2, n2)),  # h2
        )
    block = max(1, min(n2, _BLOCK_ENTRIES // max(1, b * n2)))
    for start in range(0, n2, block):
        stop = min(n2, start + block)
        off = offsets[start:stop]  # (m, n^2, 2)
        dx = off[None, :, :, 0] - theta2[:, start:stop, None]
        dy = off[None, :, :, 1] - theta3[:, start:stop, None]
        h2 = dx * dx + dy * dy
        t1 = theta1[:, start:stop, None]
        k = np.exp(-h2 / (4.0 * t1)) / (4.0 * np.pi * t1)
        out[:, start:stop, :] = area * k
        if with_aux:
            aux[0][:, start:stop, :] = k
            aux[1][:, start:stop, :] = dx
            aux[2][:, start:stop, :] = dy
            aux[3][:, start:stop, :] = h2
    if with_aux:
        return out, aux
    return out


def theta_grads_from_upstream(gout, aux, theta1, grid):
    """Pull a dL/dK upstream gradient back to per-pixel theta gradients.

    gout: (B, n^2, n^2) gradient with respect to K.
    aux: (kernel, dx, dy, h2) from _transition_batch(with_aux=True).
    Returns (g_theta1, g_theta2, g_theta3), each (B, n^2).

    Row i of K depends only on theta(s_i):
      dk/dtheta1 = k * (h^2 / (4 theta1^2) - 1/theta1)
      dk/dtheta2 = k * dx / (2 theta1)
      dk/dtheta3 = k * dy / (2 theta1)
    """
    k, dx, dy, h2 = aux
    area = grid.cell_area
    gk = gout * k * area
    t1 = theta1[:, :, None]
    g1 = (gk * (h2 / (4.0 * t1 * t1) - 1.0 / t1)).sum(axis=2)
    g2 = (gk * dx).sum(axis=2) / (2.0 * theta1)
    g3 = (gk * dy).sum(axis=2) / (2.0 * theta1)
    return g1, g2, g3


def weight_grads_from_theta(basis, g1, g2, g3, z1):
    """Chain theta gradients to coefficient gradients; softplus' = expit."""
    phi = basis.matrix
    return (g1 * expit(z1)) @ phi, g2 @ phi, g3 @ phi


def propagate(transition, field, noise=None):
    """One dynamics step: K y (+ noise)."""
    if transition.grid != field.grid:
        raise DimensionMismatch("transition matrix and field grids disagree")
    values = transition.matrix @ field.values
    if noise is not None:
        if noise.grid != field.grid:
            raise DimensionMismatch("noise and field grids disagree")
        values = values + noise.values
    return Field(field.grid, values)
