"""Conditional likelihood, minibatch training, and residual noise fitting.

The network is trained by maximizing the conditional log-likelihood of each
frame given its window, sum over t of log N(Y_{t+1}; K(Y_t^window) Y_t, Sigma).
Training runs in two stages: stage 1 fixes Sigma = sigma2_0 * I and fits the
network with Adam on minibatches; stage 2 freezes the network and fits a
Matern-3/2 covariance to the one-step residuals by maximum likelihood.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from .cnn import backward_batch, cnn_forward, forward_batch, init_adam_state, adam_step
from .exceptions import (
    CholeskyFailure,
    DegenerateResiduals,
    DimensionMismatch,
    EmptyBatch,
    InsufficientFrames,
    NonFiniteLoss,
    ValidationError,
)
from .grid import pairwise_center_distances
from .kernels import (
    _transition_batch,
    theta_fields,
    theta_fields_batch,
    theta_grads_from_upstream,
    transition_matrix,
    weight_grads_from_theta,
)

log = logging.getLogger(__name__)

NUGGET_FACTOR = 1e-8
MIN_RESIDUAL_FIELDS = 30
SIGMA2_BOUNDS = (1e-5, 1.0)

_LOG_2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Matern-3/2 noise model

@dataclass(frozen=True)
class NoiseParams:
    """Matern-3/2 innovation covariance parameters (marginal variance, range)."""

    sigma2: float
    rho: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValidationError(f"sigma2 must be > 0, got {self.sigma2!r}")
        if not self.rho > 0:
            raise ValidationError(f"rho must be > 0, got {self.rho!r}")


def matern32(d, sigma2, rho):
    """Matern covariance with smoothness 3/2 at distance d."""
    if not sigma2 > 0 or not rho > 0:
        raise ValidationError(f"matern32 needs sigma2, rho > 0, got {sigma2}, {rho}")
    a = np.sqrt(3.0) * np.asarray(d, dtype=np.float64) / rho
    return sigma2 * (1.0 + a) * np.exp(-a)


@dataclass(frozen=True)
class NoiseCovariance:
    """Dense innovation covariance with its lower Cholesky factor."""

    params: NoiseParams
    matrix: np.ndarray
    chol: np.ndarray  # lower triangular


def noise_covariance(grid, params):
    """Sigma_alpha on the grid's cell centers plus a 1e-8 * sigma2 nugget."""
    d = pairwise_center_distances(grid.n)
    cov = matern32(d, params.sigma2, params.rho)
    cov = cov + (NUGGET_FACTOR * params.sigma2) * np.eye(grid.size)
    try:
        chol = cholesky(cov, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise CholeskyFailure(f"noise covariance not positive definite: {exc}") from exc
    return NoiseCovariance(params=params, matrix=cov, chol=chol)


def sample_noise_fields(grid, params, count, rng):
    """Draw `count` zero-mean Matern-3/2 fields, (count, n^2)."""
    cov = noise_covariance(grid, params)
    z = rng.standard_normal((count, grid.size))
    return z @ cov.chol.T


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class SequencePair:
    """One training example: window stack (tau, n^2), target (n^2,)."""

    window: np.ndarray
    target: np.ndarray
    zone: int
    t: int  # target time index within its zone


class SequenceDataset:
    """Pooled (window, target) pairs from one or more frame sequences."""

    def __init__(self, grid, tau, pairs):
        self.grid = grid
        self.tau = tau
        self.pairs = list(pairs)
        for p in self.pairs:
            if p.window.shape != (tau, grid.size) or p.target.shape != (grid.size,):
                raise DimensionMismatch("dataset pair shapes do not match grid/tau")

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def from_zone_frames(cls, grid, tau, zone_frames):
        """zone_frames: list of (T_z, n^2) arrays of standardized frames."""
        pairs = []
        for zone, frames in enumerate(zone_frames):
            frames = np.asarray(frames, dtype=np.float64)
            if frames.ndim != 2 or frames.shape[1] != grid.size:
                raise DimensionMismatch(
                    f"zone {zone} frames shaped {frames.shape} on grid {grid.size}"
                )
            if frames.shape[0] <= tau:
                raise InsufficientFrames(
                    f"zone {zone} has {frames.shape[0]} frames, needs > tau={tau}"
                )
            for j in range(frames.shape[0] - tau):
                pairs.append(
                    SequencePair(
                        window=frames[j : j + tau],
                        target=frames[j + tau],
                        zone=zone,
                        t=j + tau,
                    )
                )
        return cls(grid, tau, pairs)

    def windows_array(self, indices):
        return np.stack([self.pairs[i].window for i in indices])

    def targets_array(self, indices):
        return np.stack([self.pairs[i].target for i in indices])


# ---------------------------------------------------------------------------
# conditional log-likelihood

def _batch_terms(windows, targets, params, basis, grid, sigma2, want_grads):
    """Sum of per-pair conditional log-likelihoods under Sigma = sigma2 * I,
    optionally with parameter gradients (summed over the batch)."""
    b = windows.shape[0]
    n = grid.n
    w1, w2, w3, cache = forward_batch(
        windows.reshape(b, -1, n, n), params, need_cache=want_grads
    )
    th1, th2, th3, z1 = theta_fields_batch(basis, w1, w2, w3)
    if want_grads:
        kmat, aux = _transition_batch(th1, th2, th3, grid, with_aux=True)
    else:
        kmat = _transition_batch(th1, th2, th3, grid)
    newest = windows[:, -1, :]
    resid = targets - np.einsum("bij,bj->bi", kmat, newest)
    n2 = grid.size
    ll = -0.5 * b * n2 * (_LOG_2PI + np.log(sigma2)) - (resid ** 2).sum() / (2.0 * sigma2)
    if not want_grads:
        return float(ll), None
    gout = resid[:, :, None] * (newest[:, None, :] / sigma2)
    g1, g2, g3 = theta_grads_from_upstream(gout, aux, th1, grid)
    dw1, dw2, dw3 = weight_grads_from_theta(basis, g1, g2, g3, z1)
    grads = backward_batch(params, cache, dw1, dw2, dw3)
    return float(ll), grads


def dataset_loglik(dataset, params, basis, sigma2, indices=None, chunk=256):
    """Full conditional log-likelihood over `indices` (default: all pairs)."""
    if indices is None:
        indices = np.arange(len(dataset))
    total = 0.0
    for start in range(0, len(indices), chunk):
        sel = indices[start : start + chunk]
        ll, _ = _batch_terms(
            dataset.windows_array(sel),
            dataset.targets_array(sel),
            params,
            basis,
            dataset.grid,
            sigma2,
            want_grads=False,
        )
        total += ll
    return total


def minibatch_grad(dataset, batch_indices, params, basis, sigma2):
    """Unbiased scaled minibatch estimator of the full log-likelihood.

    Returns ((N / |batch|) * sum over batch of log L_t, matching-scaled
    gradients with respect to the network parameters), N = len(dataset).
    """
    batch_indices = np.asarray(batch_indices, dtype=int)
    if batch_indices.size == 0:
        raise EmptyBatch("minibatch index set is empty")
    ll, grads = _batch_terms(
        dataset.windows_array(batch_indices),
        dataset.targets_array(batch_indices),
        params,
        basis,
        dataset.grid,
        sigma2,
        want_grads=True,
    )
    scale = len(dataset) / batch_indices.size
    return scale * ll, {k: scale * g for k, g in grads.items()}


def cond_loglik_term(target, window, params, alpha, basis):
    """log p(Y_{t+1} = target | window) with noise `alpha`.

    alpha may be a NoiseParams (Matern covariance), a NoiseCovariance, or a
    plain float (interpreted as a diagonal variance sigma2 * I).
    """
    theta = theta_fields(basis, cnn_forward(window, params)[0])
    kmat = transition_matrix(theta, window.grid)
    resid = target.values - kmat.matrix @ window.newest.values
    n2 = window.grid.size
    if isinstance(alpha, (int, float)):
        sigma2 = float(alpha)
        if not sigma2 > 0:
            raise ValidationError(f"diagonal noise variance must be > 0, got {sigma2}")
        return float(
            -0.5 * n2 * (_LOG_2PI + np.log(sigma2)) - (resid ** 2).sum() / (2.0 * sigma2)
        )
    cov = alpha if isinstance(alpha, NoiseCovariance) else noise_covariance(window.grid, alpha)
    return mvn_loglik_centered(resid, cov.chol)


def mvn_loglik_centered(resid, chol):
    """log N(resid; 0, L L^T) given the lower Cholesky factor L."""
    half = solve_triangular(chol, resid, lower=True)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * (resid.size * _LOG_2PI + logdet + half @ half))


# ---------------------------------------------------------------------------
# training loop

@dataclass(frozen=True)
class TrainingConfig:
    batch: int = 16
    lr: float = 1e-3
    max_epochs: int = 30
    valid_frac: float = 0.10
    tol: float = 1e-3
    sigma2_0: float = 0.01
    seed: int = 0


@dataclass(frozen=True)
class TrainEpoch:
    epoch: int
    train_loglik: float
    valid_loglik: float
    wall_seconds: float


@dataclass
class TrainResult:
    params: object
    history: list = field(default_factory=list)
    train_indices: np.ndarray = None
    valid_indices: np.ndarray = None


_SALT_SPLIT = 101
_SALT_EPOCH = 211


def split_indices(n_pairs, valid_frac, seed):
    """Deterministic train/validation split of pair indices."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SALT_SPLIT]))
    perm = rng.permutation(n_pairs)
    n_valid = int(round(valid_frac * n_pairs)) if valid_frac > 0 else 0
    n_valid = min(n_valid, n_pairs - 1)
    return np.sort(perm[n_valid:]), np.sort(perm[:n_valid])


def train_cnn(dataset, params, basis, config):
    """Stage-1 maximum likelihood training (Sigma = sigma2_0 * I, Adam).

    Stops when the monitored log-likelihood's relative change stays below
    config.tol across two consecutive epochs, or at max_epochs.  Deterministic
    for a fixed config.seed.  Returns a TrainResult; params are updated in
    place (tied tensors through shared storage, so the parameter count never
    changes).
    """
    if len(dataset) < 2:
        raise InsufficientFrames(f"need >= 2 training pairs, got {len(dataset)}")
    train_idx, valid_idx = split_indices(len(dataset), config.valid_frac, config.seed)
    state = init_adam_state(params)
    history = []
    monitored_prev = None
    small_streak = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SALT_EPOCH, epoch]))
        order = train_idx[rng.permutation(train_idx.size)]
        for start in range(0, order.size, config.batch):
            batch = order[start : start + config.batch]
            ll, grads = minibatch_grad(dataset, batch, params, basis, config.sigma2_0)
            if not np.isfinite(ll) or any(
                not np.all(np.isfinite(g)) for g in grads.values()
            ):
                raise NonFiniteLoss(
                    f"non-finite loss/gradient in epoch {epoch}, "
                    f"batch starting at {start} (pair ids {batch[:4].tolist()}...)"
                )
            scale = -1.0 / len(dataset)  # ascend the mean log-likelihood
            adam_step(params, {k: scale * g for k, g in grads.items()}, state, lr=config.lr)
        train_ll = dataset_loglik(dataset, params, basis, config.sigma2_0, train_idx)
        valid_ll = (
            dataset_loglik(dataset, params, basis, config.sigma2_0, valid_idx)
            if valid_idx.size
            else float("nan")
        )
        history.append(
            TrainEpoch(
                epoch=epoch,
                train_loglik=train_ll,
                valid_loglik=valid_ll,
                wall_seconds=time.perf_counter() - t0,
            )
        )
        monitored = valid_ll if valid_idx.size else train_ll
        if monitored_prev is not None:
            denom = max(abs(monitored), 1e-12)
            if abs(monitored - monitored_prev) < config.tol * denom:
                small_streak += 1
            else:
                small_streak = 0
        monitored_prev = monitored
        if small_streak >= 2:
            break
    return TrainResult(
        params=params, history=history, train_indices=train_idx, valid_indices=valid_idx
    )


def residual_fields(dataset, params, basis, indices=None, chunk=256):
    """One-step residuals target - K y for each pair, (N, n^2)."""
    if indices is None:
        indices = np.arange(len(dataset))
    grid = dataset.grid
    n = grid.n
    out = np.empty((len(indices), grid.size))
    for start in range(0, len(indices), chunk):
        sel = indices[start : start + chunk]
        windows = dataset.windows_array(sel)
        targets = dataset.targets_array(sel)
        w1, w2, w3, _ = forward_batch(
            windows.reshape(len(sel), -1, n, n), params, need_cache=False
        )
        th1, th2, th3, _ = theta_fields_batch(basis, w1, w2, w3)
        kmat = _transition_batch(th1, th2, th3, grid)
        out[start : start + len(sel)] = targets - np.einsum(
            "bij,bj->bi", kmat, windows[:, -1, :]
        )
    return out


# ---------------------------------------------------------------------------
# stage 2: residual Matern fit

def _profile_loglik(rho, resids, dists, n_fields):
    """Profile log-likelihood over rho; sigma2 maximized in closed form."""
    n2 = dists.shape[0]
    corr = matern32(dists, 1.0, rho) + NUGGET_FACTOR * np.eye(n2)
    try:
        factor = cho_factor(corr, lower=True)
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure(f"residual correlation not positive definite: {exc}") from exc
    logdet = 2.0 * np.log(np.diag(factor[0])).sum()
    solved = cho_solve(factor, resids.T)  # (n^2, N)
    quad_mean = float((resids.T * solved).sum()) / n_fields  # tr(M^-1 S)
    sigma2 = float(np.clip(quad_mean / n2, *SIGMA2_BOUNDS))
    ll = -0.5 * n_fields * (
        n2 * _LOG_2PI + n2 * np.log(sigma2) + logdet + quad_mean / sigma2
    )
    return ll, sigma2


def fit_residual_matern(residuals, grid, n_grid=33, refine_iters=40):
    """ML fit of Matern-3/2 (sigma2, rho) to residual fields.

    Bounded search: rho in [1/(2n), 0.5] on a log-spaced grid with
    golden-section refinement, sigma2 profiled in closed form and clipped to
    [1e-5, 1].  The lower bound is half a cell width -- correlation ranges
    below that are unresolvable on the lattice.  Deterministic.  A rho
    estimate at the lower bound (white-noise-like residuals) is flagged in
    the log.
    """
    resids = np.asarray(residuals, dtype=np.float64)
    if resids.ndim != 2 or resids.shape[1] != grid.size:
        raise DimensionMismatch(
            f"residuals shaped {resids.shape} on grid of size {grid.size}"
        )
    if resids.shape[0] < MIN_RESIDUAL_FIELDS:
        raise InsufficientFrames(
            f"need >= {MIN_RESIDUAL_FIELDS} residual fields, got {resids.shape[0]}"
        )
    if float(np.abs(resids).max(initial=0.0)) < 1e-12:
        raise DegenerateResiduals("residual fields are numerically zero")
    dists = pairwise_center_distances(grid.n)
    lo, hi = 0.5 / grid.n, 0.5
    n_fields = resids.shape[0]
    grid_rho = np.exp(np.linspace(np.log(lo), np.log(hi), n_grid))
    lls = np.array([_profile_loglik(r, resids, dists, n_fields)[0] for r in grid_rho])
    best = int(np.argmax(lls))
    # golden-section refinement on log(rho) between the neighbors of the best
    a = np.log(grid_rho[max(best - 1, 0)])
    b = np.log(grid_rho[min(best + 1, n_grid - 1)])
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc = _profile_loglik(np.exp(c), resids, dists, n_fields)[0]
    fd = _profile_loglik(np.exp(d), resids, dists, n_fields)[0]
    for _ in range(refine_iters):
        if b - a < 1e-4:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _profile_loglik(np.exp(c), resids, dists, n_fields)[0]
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _profile_loglik(np.exp(d), resids, dists, n_fields)[0]
    rho = float(np.clip(np.exp((a + b) / 2.0), lo, hi))
    ll, sigma2 = _profile_loglik(rho, resids, dists, n_fields)
    if rho <= lo * 1.01:
        log.warning(
            "fitted rho %.4g sits at the lower search bound %.4g "
            "(residuals look white)", rho, lo
        )
    return NoiseParams(sigma2=sigma2, rho=rho)
