"""Stochastic ensemble Kalman filter over the window-augmented state.

The state carried per member is the tau-frame window.  Prediction advances
each member with its own kernel operator (built from the member's window by
the network) plus a Matern noise draw; the perturbed-observation update
touches only the newest frame of each member, with the sampled covariances
Schur-tapered by a Gaspari-Cohn correlation of compact support 2c.

Randomness is derived statelessly: the draw for member j at step t uses a
generator keyed by (seed, j, t, purpose), so members can be processed in any
order — and a single prediction step is bitwise identical whether invoked
directly or through `forecast`.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .cnn import forward_batch
from .exceptions import (
    DimensionMismatch,
    SingularInnovationCov,
    ValidationError,
)
from .grid import pairwise_center_distances
from .kernels import THETA_MIN, _transition_batch, theta_fields_batch
from .likelihood import noise_covariance

_SALT_INIT = 3
_SALT_PREDICT = 5
_SALT_UPDATE = 7

N_DIRECTION_BINS = 12


def _member_rng(seed, member, step, salt):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(member), int(step), salt]))


# ---------------------------------------------------------------------------
# containers

@dataclass(frozen=True)
class Observations:
    """Point observations of one frame: flat pixel indices, values, known variance."""

    t: int
    pixel_indices: np.ndarray
    values: np.ndarray
    sigma2_eps: float

    def __post_init__(self):
        idx = np.asarray(self.pixel_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if idx.shape != vals.shape or idx.ndim != 1:
            raise DimensionMismatch("observation indices/values must be matching 1-D arrays")
        if idx.size and (np.unique(idx).size != idx.size):
            raise ValidationError("observation pixel indices must be unique")
        if self.sigma2_eps < 0:
            raise ValidationError(f"sigma2_eps must be >= 0, got {self.sigma2_eps}")
        object.__setattr__(self, "pixel_indices", idx)
        object.__setattr__(self, "values", vals)

    @property
    def count(self):
        return self.pixel_indices.size


@dataclass(frozen=True)
class Ensemble:
    """N member windows: members[j, q] is frame q (oldest first) of member j."""

    grid: object
    members: np.ndarray  # (N, tau, n^2)
    time_index: int  # time of the newest frame
    seed: int

    def __post_init__(self):
        m = np.asarray(self.members, dtype=np.float64)
        if m.ndim != 3 or m.shape[2] != self.grid.size:
            raise DimensionMismatch(f"members shaped {m.shape} on grid {self.grid.size}")
        if m.shape[0] < 2:
            raise ValidationError(f"ensemble needs >= 2 members, got {m.shape[0]}")
        if m.shape[1] < 2:
            raise ValidationError(f"window depth must be >= 2, got {m.shape[1]}")
        object.__setattr__(self, "members", m)

    @property
    def n_members(self):
        return self.members.shape[0]

    @property
    def tau(self):
        return self.members.shape[1]

    def newest(self):
        return self.members[:, -1, :]


def ensemble_mean_sd(ens):
    """Mean and sd (ddof=1) of the newest frame across members."""
    newest = ens.newest()
    return newest.mean(axis=0), newest.std(axis=0, ddof=1)


def init_ensemble(frames, n_members, noise, jitter, seed, grid, time_index=None):
    """Spin up an ensemble from tau data frames plus scaled Matern jitter.

    frames: (tau, n^2) standardized frames, oldest first.  Each member adds
    independent Matern-3/2 noise (from `noise`, a NoiseParams) scaled by
    `jitter` to every frame; jitter = 0 duplicates the frames exactly.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != grid.size:
        raise DimensionMismatch(f"frames shaped {frames.shape} on grid {grid.size}")
    if jitter < 0:
        raise ValidationError(f"jitter must be >= 0, got {jitter}")
    tau = frames.shape[0]
    members = np.broadcast_to(frames, (n_members, tau, grid.size)).copy()
    if jitter > 0:
        chol = noise_covariance(grid, noise).chol
        for j in range(n_members):
            z = _member_rng(seed, j, 0, _SALT_INIT).standard_normal((tau, grid.size))
            members[j] += jitter * (z @ chol.T)
    if time_index is None:
        time_index = tau - 1
    return Ensemble(grid=grid, members=members, time_index=time_index, seed=seed)


# ---------------------------------------------------------------------------
# dynamics adapters

class CnnDynamics:
    """Member-window -> transition operator via the network and basis."""

    def __init__(self, params, basis, theta_min=THETA_MIN):
        self.params = params
        self.basis = basis
        self.grid = basis.grid
        self.theta_min = theta_min

    def weights(self, members):
        """(N, tau, n^2) member windows -> (w1, w2, w3), each (N, r)."""
        n = self.grid.n
        w1, w2, w3, _ = forward_batch(
            members.reshape(members.shape[0], -1, n, n), self.params, need_cache=False
        )
        return w1, w2, w3

    def theta(self, members):
        """(N, tau, n^2) -> kernel-parameter fields (th1, th2, th3), each (N, n^2)."""
        w1, w2, w3 = self.weights(members)
        th1, th2, th3, _ = theta_fields_batch(self.basis, w1, w2, w3, self.theta_min)
        return th1, th2, th3

    def transition(self, members):
        """(N, tau, n^2) -> stacked kernel operators (N, n^2, n^2)."""
        th1, th2, th3 = self.theta(members)
        return _transition_batch(th1, th2, th3, self.grid)


class LinearDynamics:
    """Fixed operator for linear test mode (network bypassed)."""

    def __init__(self, kmat, grid):
        self.kmat = np.asarray(kmat, dtype=np.float64)
        self.grid = grid

    def weights(self, members):
        raise ValidationError("linear test dynamics have no coefficient weights")

    def transition(self, members):
        return np.broadcast_to(self.kmat, (members.shape[0],) + self.kmat.shape)


# ---------------------------------------------------------------------------
# filter steps

def enkf_predict(ens, dynamics, noise_chol):
    """Advance every member one step: drop the oldest frame, append K_j y_j + eta_j."""
    members = ens.members
    kmats = dynamics.transition(members)
    newest = members[:, -1, :]
    propagated = np.einsum("bij,bj->bi", kmats, newest)
    step = ens.time_index + 1
    eta = np.empty_like(propagated)
    for j in range(ens.n_members):
        z = _member_rng(ens.seed, j, step, _SALT_PREDICT).standard_normal(ens.grid.size)
        eta[j] = noise_chol @ z
    out = np.empty_like(members)
    out[:, :-1, :] = members[:, 1:, :]
    out[:, -1, :] = propagated + eta
    return Ensemble(grid=ens.grid, members=out, time_index=step, seed=ens.seed)


def gaspari_cohn(d, c):
    """Gaspari-Cohn fifth-order compact correlation; support radius 2c."""
    if not c > 0:
        raise ValidationError(f"taper half-width c must be > 0, got {c}")
    r = np.asarray(d, dtype=np.float64) / c
    out = np.zeros_like(r)
    near = r <= 1.0
    mid = (r > 1.0) & (r <= 2.0)
    rn = r[near]
    out[near] = (((-0.25 * rn + 0.5) * rn + 0.625) * rn - 5.0 / 3.0) * rn ** 2 + 1.0
    rm = r[mid]
    out[mid] = (
        ((((rm / 12.0 - 0.5) * rm + 0.625) * rm + 5.0 / 3.0) * rm - 5.0) * rm
        + 4.0
        - 2.0 / (3.0 * rm)
    )
    return out


@dataclass(frozen=True)
class TaperSpec:
    """Localization half-width on the unit square; None disables tapering."""

    c: float = 0.15

    def __post_init__(self):
        if not self.c > 0:
            raise ValidationError(f"taper half-width must be > 0, got {self.c}")


def enkf_update(ens, obs, taper, sigma2_eps):
    """Perturbed-observation update of the newest frame block.

    Sampled cross- and innovation covariances (ddof = N-1) are elementwise
    tapered before the gain solve; each member assimilates z + eps_j.  Older
    window frames are left untouched.  Zero observations is the identity.
    """
    if obs.t != ens.time_index:
        raise ValidationError(
            f"observations for t={obs.t} applied to ensemble at t={ens.time_index}"
        )
    if obs.count == 0:
        return ens
    idx = obs.pixel_indices
    if idx.min() < 0 or idx.max() >= ens.grid.size:
        raise ValidationError("observation pixel index outside the grid")
    members = ens.members
    n_members = ens.n_members
    newest = members[:, -1, :]
    anomalies = newest - newest.mean(axis=0)
    a_obs = anomalies[:, idx]
    p_xy = anomalies.T @ a_obs / (n_members - 1)  # (n^2, m)
    p_yy = a_obs.T @ a_obs / (n_members - 1)  # (m, m)
    if taper is not None:
        dists = pairwise_center_distances(ens.grid.n)
        p_xy = p_xy * gaspari_cohn(dists[:, idx], taper.c)
        p_yy = p_yy * gaspari_cohn(dists[np.ix_(idx, idx)], taper.c)
    s = p_yy + sigma2_eps * np.eye(obs.count)
    try:
        factor = cho_factor(s, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationCov(f"innovation covariance solve failed: {exc}") from exc
    gain = cho_solve(factor, p_xy.T).T  # (n^2, m)
    eps = np.empty((n_members, obs.count))
    for j in range(n_members):
        rng = _member_rng(ens.seed, j, ens.time_index, _SALT_UPDATE)
        eps[j] = np.sqrt(sigma2_eps) * rng.standard_normal(obs.count)
    innov = obs.values[None, :] + eps - newest[:, idx]
    out = members.copy()
    out[:, -1, :] = newest + innov @ gain.T
    return Ensemble(grid=ens.grid, members=out, time_index=ens.time_index, seed=ens.seed)


def forecast(ens, dynamics, noise_chol, h):
    """h pure prediction steps (no updates); returns the list of ensembles."""
    if h < 1:
        raise ValidationError(f"forecast horizon must be >= 1, got {h}")
    out = []
    current = ens
    for _ in range(h):
        current = enkf_predict(current, dynamics, noise_chol)
        out.append(current)
    return out


# ---------------------------------------------------------------------------
# dynamics summaries

@dataclass(frozen=True)
class DynamicsSummary:
    """Ensemble spread of the learned dynamics at one step.

    w_mean/w_var: (3, r) per-coefficient moments for (w1, w2, w3).
    theta_mean/theta_var: (3, n^2) per-pixel moments for (theta1..theta3).
    direction_counts: (n^2, 12) member counts of atan2(theta3, theta2) in
    30-degree bins, bin k covering [30k, 30k+30) degrees from the +x axis.
    """

    kind: str  # "filtered" or "forecast"
    t: int
    n_members: int
    w_mean: np.ndarray
    w_var: np.ndarray
    theta_mean: np.ndarray
    theta_var: np.ndarray
    direction_counts: np.ndarray


def dynamics_summary(ens, dynamics, kind):
    """Per-coefficient and per-pixel moments plus flow-direction histograms."""
    if kind not in ("filtered", "forecast"):
        raise ValidationError(f"summary kind must be filtered/forecast, got {kind!r}")
    w1, w2, w3 = dynamics.weights(ens.members)
    th1, th2, th3, _ = theta_fields_batch(
        dynamics.basis, w1, w2, w3, getattr(dynamics, "theta_min", THETA_MIN)
    )
    w_stack = np.stack([w1, w2, w3])  # (3, N, r)
    th_stack = np.stack([th1, th2, th3])  # (3, N, n^2)
    angles = np.mod(np.arctan2(th3, th2), 2.0 * np.pi)  # (N, n^2)
    bins = np.minimum((angles / (2.0 * np.pi / N_DIRECTION_BINS)).astype(np.int64),
                      N_DIRECTION_BINS - 1)
    n2 = ens.grid.size
    counts = np.zeros((n2, N_DIRECTION_BINS), dtype=np.int64)
    flat = bins + np.arange(n2)[None, :] * N_DIRECTION_BINS
    np.add.at(counts.reshape(-1), flat.reshape(-1), 1)
    return DynamicsSummary(
        kind=kind,
        t=ens.time_index,
        n_members=ens.n_members,
        w_mean=w_stack.mean(axis=1),
        w_var=w_stack.var(axis=1, ddof=1),
        theta_mean=th_stack.mean(axis=1),
        theta_var=th_stack.var(axis=1, ddof=1),
        direction_counts=counts,
    )


# ---------------------------------------------------------------------------
# driver

@dataclass(frozen=True)
class FilterConfig:
    n_members: int = 64
    taper_c: float = 0.15
    jitter: float = 1.0
    sigma2_eps: float = 0.01
    seed: int = 0
    compute_summaries: bool = True


@dataclass
class FilterResult:
    times: list
    forecast_mean: np.ndarray
    forecast_sd: np.ndarray
    filtered_mean: np.ndarray
    filtered_sd: np.ndarray
    forecast_members: np.ndarray
    filtered_members: np.ndarray
    forecast_summaries: list = field(default_factory=list)
    filtered_summaries: list = field(default_factory=list)
    final_ensemble: Ensemble = None


def run_filter(init_frames, obs_seq, dynamics, noise, config, grid):
    """Filter a sequence: predict, record, assimilate, record, repeat.

    init_frames: (tau, n^2) spin-up frames (standardized).  obs_seq: list of
    Observations with consecutive times starting at tau (0-based target of the
    first prediction).  The per-step one-step-ahead (forecast) and post-update
    (filtered) newest-frame statistics are stacked in the result.
    """
    cov = noise_covariance(grid, noise)
    ens = init_ensemble(
        init_frames, config.n_members, noise, config.jitter, config.seed, grid
    )
    taper = TaperSpec(config.taper_c) if config.taper_c else None
    times = []
    f_mean, f_sd, a_mean, a_sd = [], [], [], []
    f_members, a_members = [], []
    f_sum, a_sum = [], []
    for obs in obs_seq:
        ens = enkf_predict(ens, dynamics, cov.chol)
        if obs.t != ens.time_index:
            raise ValidationError(
                f"observation times not consecutive: expected {ens.time_index}, got {obs.t}"
            )
        mean, sd = ensemble_mean_sd(ens)
        times.append(ens.time_index)
        f_mean.append(mean)
        f_sd.append(sd)
        f_members.append(ens.newest().copy())
        if config.compute_summaries:
            f_sum.append(dynamics_summary(ens, dynamics, "forecast"))
        ens = enkf_update(ens, obs, taper, config.sigma2_eps)
        mean, sd = ensemble_mean_sd(ens)
        a_mean.append(mean)
        a_sd.append(sd)
        a_members.append(ens.newest().copy())
        if config.compute_summaries:
            a_sum.append(dynamics_summary(ens, dynamics, "filtered"))
    return FilterResult(
        times=times,
        forecast_mean=np.array(f_mean),
        forecast_sd=np.array(f_sd),
        filtered_mean=np.array(a_mean),
        filtered_sd=np.array(a_sd),
        forecast_members=np.array(f_members),
        filtered_members=np.array(a_members),
        forecast_summaries=f_sum,
        filtered_summaries=a_sum,
        final_ensemble=ens,
    )
