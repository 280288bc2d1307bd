"""scikit-learn style facades over the functional pipeline.

Estimators hold constructor arguments verbatim (so ``get_params`` / ``clone``
work) and expose ``fit`` / ``predict`` on standardized frame arrays.  ``X``
is either a (T, n^2) frame sequence or a (zones, T, n^2) stack for ``fit``;
``predict`` consumes windows shaped (tau, n^2) or (batch, tau, n^2) and
returns the one-step forecast mean(s).
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import fit_window_ide, vanilla_ide_forecast, window_posterior
from .cnn import CnnArchitecture, cnn_forward, forward_batch, init_cnn_params
from .enkf import FilterConfig, CnnDynamics, run_filter
from .exceptions import DimensionMismatch, ValidationError
from .grid import FrameWindow, Field, GridSpec
from .kernels import (
    build_rbf_basis,
    theta_fields,
    theta_fields_batch,
    _transition_batch,
)
from .likelihood import (
    SequenceDataset,
    TrainingConfig,
    fit_residual_matern,
    residual_fields,
    train_cnn,
)


def _as_zone_stack(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DimensionMismatch(f"expected (zones, T, n^2) or (T, n^2), got {X.shape}")
    return X


def _as_window_batch(X, tau, n2):
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != tau or X.shape[2] != n2:
        raise DimensionMismatch(
            f"expected windows (batch, {tau}, {n2}), got {X.shape}"
        )
    return X, squeeze


class ConvIdeForecaster(BaseEstimator):
    """Forecaster whose transition kernel is re-parameterized every step by a
    convolutional read of the most recent frames."""

    def __init__(
        self,
        tau=3,
        r=16,
        filters=(8, 16, 32),
        patch=5,
        bandwidth=None,
        theta_min=1e-6,
        batch=16,
        lr=1e-3,
        max_epochs=30,
        valid_frac=0.1,
        tol=1e-3,
        sigma2_0=0.01,
        fit_noise=True,
        seed=0,
    ):
        self.tau = tau
        self.r = r
        self.filters = filters
        self.patch = patch
        self.bandwidth = bandwidth
        self.theta_min = theta_min
        self.batch = batch
        self.lr = lr
        self.max_epochs = max_epochs
        self.valid_frac = valid_frac
        self.tol = tol
        self.sigma2_0 = sigma2_0
        self.fit_noise = fit_noise
        self.seed = seed

    def fit(self, X, y=None):
        zones = _as_zone_stack(X)
        n2 = zones.shape[2]
        n = int(round(n2**0.5))
        if n * n != n2:
            raise DimensionMismatch(f"{n2} pixels is not a square grid")
        self.grid_ = GridSpec(n=n)
        self.arch_ = CnnArchitecture(
            tau=self.tau,
            input_side=n,
            filters=tuple(self.filters),
            patch=self.patch,
            r=self.r,
        )
        self.basis_ = build_rbf_basis(self.grid_, self.r, self.bandwidth)
        dataset = SequenceDataset.from_zone_frames(self.grid_, self.tau, list(zones))
        config = TrainingConfig(
            batch=self.batch,
            lr=self.lr,
            max_epochs=self.max_epochs,
            valid_frac=self.valid_frac,
            tol=self.tol,
            sigma2_0=self.sigma2_0,
            seed=self.seed,
        )
        result = train_cnn(dataset, init_cnn_params(self.arch_, self.seed), self.basis_, config)
        self.params_ = result.params
        self.history_ = result.history
        if self.fit_noise:
            resids = residual_fields(dataset, self.params_, self.basis_)
            self.noise_ = fit_residual_matern(resids, self.grid_)
        else:
            self.noise_ = None
        self.n_features_in_ = n2
        return self

    def _forecast_batch(self, windows):
        w1, w2, w3, _ = forward_batch(
            windows.reshape(-1, self.tau, self.grid_.n, self.grid_.n), self.params_
        )
        th1, th2, th3, _ = theta_fields_batch(
            self.basis_, w1, w2, w3, self.theta_min
        )
        kmats = _transition_batch(th1, th2, th3, self.grid_)
        return np.einsum("bij,bj->bi", kmats, windows[:, -1, :])

    def predict(self, X):
        check_is_fitted(self, "params_")
        windows, squeeze = _as_window_batch(X, self.tau, self.n_features_in_)
        means = self._forecast_batch(windows)
        return means[0] if squeeze else means

    def extract_flow(self, window):
        """Kernel-parameter fields for one window: (diffusion, shift-x, shift-y)."""
        check_is_fitted(self, "params_")
        arr, _ = _as_window_batch(window, self.tau, self.n_features_in_)
        fields = [
            Field(self.grid_, arr[0, i].copy()) for i in range(self.tau)
        ]
        weights, _ = cnn_forward(FrameWindow(frames=tuple(fields)), self.params_)
        return theta_fields(self.basis_, weights, self.theta_min)

    def run_filter(self, init_frames, obs_seq, n_members=64, taper_c=0.15,
                   jitter=1.0, sigma2_eps=0.01, seed=0, horizon=0):
        """Online assimilation over obs_seq from the initial window."""
        check_is_fitted(self, "params_")
        if self.noise_ is None:
            raise ValidationError("filter needs fitted noise parameters (fit_noise=True)")
        config = FilterConfig(
            n_members=n_members,
            taper_c=taper_c,
            jitter=jitter,
            sigma2_eps=sigma2_eps,
            seed=seed,
        )
        dynamics = CnnDynamics(self.params_, self.basis_, self.theta_min)
        return run_filter(init_frames, obs_seq, dynamics, self.noise_, config, self.grid_)


class PersistenceForecaster(BaseEstimator):
    """Reports the newest frame of the window as the next-step forecast."""

    def __init__(self, tau=3):
        self.tau = tau

    def fit(self, X, y=None):
        zones = _as_zone_stack(X)
        self.n_features_in_ = zones.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "n_features_in_")
        windows, squeeze = _as_window_batch(X, self.tau, self.n_features_in_)
        out = windows[:, -1, :].copy()
        return out[0] if squeeze else out


class WindowedIdeForecaster(BaseEstimator):
    """Per-window constant-kernel forecaster fit by innovations likelihood."""

    def __init__(self, sigma2_eps=0.01):
        self.sigma2_eps = sigma2_eps

    def fit(self, X, y=None):
        zones = _as_zone_stack(X)
        n2 = zones.shape[2]
        n = int(round(n2**0.5))
        if n * n != n2:
            raise DimensionMismatch(f"{n2} pixels is not a square grid")
        self.grid_ = GridSpec(n=n)
        self.n_features_in_ = n2
        return self

    def predict(self, X, return_sd=False):
        check_is_fitted(self, "grid_")
        windows, squeeze = _as_window_batch(X, 3, self.n_features_in_)
        means = np.empty((windows.shape[0], self.n_features_in_))
        sds = np.empty_like(means)
        for b in range(windows.shape[0]):
            params = fit_window_ide(windows[b], self.grid_, self.sigma2_eps)
            _, post_cov = window_posterior(windows[b], params, self.grid_, self.sigma2_eps)
            mean, var = vanilla_ide_forecast(
                params, windows[b, -1], self.grid_, post_cov
            )
            means[b] = mean
            sds[b] = np.sqrt(var)
        if squeeze:
            means, sds = means[0], sds[0]
        return (means, sds) if return_sd else means
