"""Reference forecasters: persistence and a spatially-invariant windowed model.

The windowed baseline uses the same squared-exponential transition kernel but
with constant parameters (diffusion d, shift v) and white process noise,
estimated per sliding window by maximizing the innovations-form Gaussian
likelihood through an exact Kalman filter.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .exceptions import (
    DimensionMismatch,
    InsufficientFrames,
    OptimizerFailure,
    SingularInnovation,
    ValidationError,
)
from .grid import Field, GridSpec
from .kernels import ThetaFields, transition_matrix

_LOG_2PI = np.log(2.0 * np.pi)

WINDOW_LEN = 3  # frames per sliding window, matching the tau = 3 convention

# bounds for (log d, v1, v2, log sigma2_v)
_LOG_D_BOUNDS = (np.log(1e-6), np.log(0.25))
_V_BOUNDS = (-0.25, 0.25)
_LOG_S2_BOUNDS = (np.log(1e-8), np.log(10.0))


def persistence_forecast(prediction):
    """Identity map: the prediction at t is reported as the forecast for t+1."""
    if not isinstance(prediction, Field):
        raise ValidationError("persistence_forecast expects a Field")
    return prediction


@dataclass(frozen=True)
class VanillaIdeParams:
    """Spatially-invariant kernel parameters plus white process-noise variance."""

    d: float
    v: tuple
    sigma2_v: float

    def __post_init__(self):
        if not self.d > 0:
            raise ValidationError(f"diffusion d must be > 0, got {self.d}")
        if not self.sigma2_v > 0:
            raise ValidationError(f"sigma2_v must be > 0, got {self.sigma2_v}")
        object.__setattr__(self, "v", (float(self.v[0]), float(self.v[1])))


def constant_transition(params, grid):
    """Transition operator for constant (d, v) on a grid."""
    n2 = grid.size
    theta = ThetaFields(
        theta1=np.full(n2, params.d),
        theta2=np.full(n2, params.v[0]),
        theta3=np.full(n2, params.v[1]),
        grid=grid,
    )
    return transition_matrix(theta, grid)


@dataclass
class KalmanResult:
    filtered_means: np.ndarray  # (T, n^2)
    filtered_covs: np.ndarray  # (T, n^2, n^2)
    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    loglik: float


def kalman_filter(obs_seq, kmat, process_cov, m0, p0):
    """Exact Kalman filter with selection observations and innovations log-likelihood.

    obs_seq: list of (pixel_indices, values, sigma2) triples or None (no data
    that step; the moments just propagate).  kmat: (n^2, n^2) transition.
    process_cov: (n^2, n^2) array or scalar variance.  Returns filtered and
    one-step-predicted moments for every step plus the accumulated innovations
    log-likelihood of the observed values.
    """
    m = np.asarray(m0, dtype=np.float64).copy()
    p = np.asarray(p0, dtype=np.float64).copy()
    dim = m.size
    q = process_cov if np.ndim(process_cov) == 2 else float(process_cov) * np.eye(dim)
    fm, fc, pm, pc = [], [], [], []
    loglik = 0.0
    for obs in obs_seq:
        m = kmat @ m
        p = kmat @ p @ kmat.T + q
        p = 0.5 * (p + p.T)
        pm.append(m.copy())
        pc.append(p.copy())
        if obs is not None:
            idx, values, sigma2 = obs
            idx = np.asarray(idx, dtype=np.int64)
            values = np.asarray(values, dtype=np.float64)
            nu = values - m[idx]
            s = p[np.ix_(idx, idx)] + sigma2 * np.eye(idx.size)
            try:
                factor = cho_factor(s, lower=True)
            except np.linalg.LinAlgError as exc:
                raise SingularInnovation(
                    f"innovation covariance not positive definite: {exc}"
                ) from exc
            solved_nu = cho_solve(factor, nu)
            logdet = 2.0 * np.log(np.diag(factor[0])).sum()
            loglik += -0.5 * (idx.size * _LOG_2PI + logdet + nu @ solved_nu)
            # gain = P H^T S^-1 = (S^-1 H P)^T since S is symmetric
            gain = cho_solve(factor, p[idx, :]).T
            m = m + gain @ nu
            p = p - gain @ p[idx, :]
            p = 0.5 * (p + p.T)
        fm.append(m.copy())
        fc.append(p.copy())
    return KalmanResult(
        filtered_means=np.array(fm),
        filtered_covs=np.array(fc),
        predicted_means=np.array(pm),
        predicted_covs=np.array(pc),
        loglik=float(loglik),
    )


def _window_neg_loglik(x, frames, grid, sigma2_eps):
    d = np.exp(np.clip(x[0], *_LOG_D_BOUNDS))
    v1 = np.clip(x[1], *_V_BOUNDS)
    v2 = np.clip(x[2], *_V_BOUNDS)
    s2 = np.exp(np.clip(x[3], *_LOG_S2_BOUNDS))
    try:
        params = VanillaIdeParams(d=d, v=(v1, v2), sigma2_v=s2)
        kmat = constant_transition(params, grid).matrix
        all_idx = np.arange(grid.size)
        obs_seq = [(all_idx, frames[t], sigma2_eps) for t in range(1, frames.shape[0])]
        res = kalman_filter(obs_seq, kmat, s2, frames[0], sigma2_eps * np.eye(grid.size))
    except (SingularInnovation, np.linalg.LinAlgError):
        return np.inf
    return -res.loglik if np.isfinite(res.loglik) else np.inf


def fit_window_ide(frames, grid, sigma2_eps, maxiter=150):
    """Fit (d, v, sigma2_v) to one window of frames by innovations ML.

    frames: (WINDOW_LEN, n^2) standardized fields, oldest first, treated as
    fully observed with known variance sigma2_eps.  Four deterministic
    Nelder-Mead starts (log-spaced d; zero and +-one-cell shifts); the best
    finite optimum wins.  Deterministic.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != grid.size:
        raise DimensionMismatch(f"frames shaped {frames.shape} on grid {grid.size}")
    if frames.shape[0] != WINDOW_LEN:
        raise InsufficientFrames(
            f"window needs exactly {WINDOW_LEN} frames, got {frames.shape[0]}"
        )
    if not sigma2_eps > 0:
        raise ValidationError(f"sigma2_eps must be > 0, got {sigma2_eps}")
    cell = grid.cell_width
    starts = [
        np.array([np.log(1e-4), 0.0, 0.0, np.log(1e-2)]),
        np.array([np.log(1e-3), 0.0, 0.0, np.log(1e-2)]),
        np.array([np.log(3e-4), cell, cell, np.log(1e-2)]),
        np.array([np.log(3e-4), -cell, -cell, np.log(1e-2)]),
    ]
    bounds = [_LOG_D_BOUNDS, _V_BOUNDS, _V_BOUNDS, _LOG_S2_BOUNDS]
    best = None
    for x0 in starts:
        res = minimize(
            _window_neg_loglik,
            x0,
            args=(frames, grid, sigma2_eps),
            method="Nelder-Mead",
            bounds=bounds,
            options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-3},
        )
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise OptimizerFailure("no multi-start produced a finite window likelihood")
    x = best.x
    return VanillaIdeParams(
        d=float(np.exp(np.clip(x[0], *_LOG_D_BOUNDS))),
        v=(float(np.clip(x[1], *_V_BOUNDS)), float(np.clip(x[2], *_V_BOUNDS))),
        sigma2_v=float(np.exp(np.clip(x[3], *_LOG_S2_BOUNDS))),
    )


def window_posterior(frames, params, grid, sigma2_eps):
    """Re-run the window Kalman filter at fitted params; returns (mean, cov)."""
    kmat = constant_transition(params, grid).matrix
    all_idx = np.arange(grid.size)
    obs_seq = [(all_idx, frames[t], sigma2_eps) for t in range(1, frames.shape[0])]
    res = kalman_filter(
        obs_seq, kmat, params.sigma2_v, frames[0], sigma2_eps * np.eye(grid.size)
    )
    return res.filtered_means[-1], res.filtered_covs[-1]


def vanilla_ide_forecast(params, frame, grid, post_cov=None):
    """One-step forecast: mean K(d, v) y and predicted-covariance diagonal.

    post_cov is the filtered covariance at the forecast origin (defaults to
    zero, leaving the floor sigma2_v).  Returns (mean, variance) flat arrays;
    the variance is >= sigma2_v everywhere.
    """
    values = frame.values if isinstance(frame, Field) else np.asarray(frame, np.float64)
    if values.shape != (grid.size,):
        raise DimensionMismatch(f"frame shaped {values.shape} on grid {grid.size}")
    kmat = constant_transition(params, grid).matrix
    mean = kmat @ values
    if post_cov is None:
        var = np.full(grid.size, params.sigma2_v)
    else:
        var = np.einsum("ij,jk,ik->i", kmat, post_cov, kmat) + params.sigma2_v
    return mean, var
