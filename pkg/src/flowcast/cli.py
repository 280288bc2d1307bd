"""Command-line pipeline: simulate -> train -> fit-residuals -> filter ->
forecast -> evaluate, plus flow extraction and reference baselines.

Commands communicate only through files, never mutate their inputs, and are
byte-deterministic under a fixed seed (the training log's wall-clock column
is the one timing diagnostic).  Exit codes: 0 success, 2 configuration
error, 3 I/O error, 4 numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from . import fileio
from .baselines import WINDOW_LEN, fit_window_ide, vanilla_ide_forecast, window_posterior
from .cnn import CnnArchitecture, cnn_forward, init_cnn_params
from .enkf import CnnDynamics, FilterConfig, forecast as ensemble_forecast, run_filter
from .enkf import dynamics_summary, ensemble_mean_sd
from .exceptions import ConfigError, FileError, FlowcastError, ValidationError
from .grid import Field, FrameWindow, GridSpec, SD_FLOOR
from .kernels import build_rbf_basis, theta_fields
from .likelihood import (
    SequenceDataset,
    TrainingConfig,
    fit_residual_matern,
    noise_covariance,
    residual_fields,
    train_cnn,
)
from .simulate import SimConfig, sample_observations, simulate

# ---------------------------------------------------------------------------
# run configuration: `key = value` text, typed schema, unknown keys rejected
# ---------------------------------------------------------------------------

def _parse_bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected true/false, got {text!r}")


def _parse_int_tuple(text):
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _optional(parser):
    def parse(text):
        return None if text.strip().lower() == "none" else parser(text)

    return parse


CONFIG_SCHEMA = {
    "grid.n": (int, 16),
    "model.tau": (int, 3),
    "model.r": (int, 16),
    "model.bandwidth": (_optional(float), None),
    "model.theta_min": (float, 1e-6),
    "model.filters": (_parse_int_tuple, (8, 16, 32)),
    "model.patch": (int, 5),
    "train.batch": (int, 16),
    "train.lr": (float, 1e-3),
    "train.max_epochs": (int, 30),
    "train.valid_frac": (float, 0.10),
    "train.tol": (float, 1e-3),
    "train.sigma2_0": (float, 0.01),
    "enkf.n_members": (int, 64),
    "enkf.taper_c": (float, 0.15),
    "enkf.jitter": (float, 1.0),
    "obs.sigma2_eps": (float, 0.01),
    "obs.pixels": (int, 64),
    "mask.border": (int, 2),
    "seed": (int, 0),
    "sim.regime": (str, "translating-blobs"),
    "sim.zones": (int, 1),
    "sim.t_steps": (int, 54),
    "sim.amplitude": (float, 1.0),
    "sim.diffusion": (float, 0.0),
    "sim.forcing_sigma2": (float, 0.01),
    "sim.forcing_rho": (float, 0.05),
    "sim.n_blobs": (int, 3),
    "sim.blob_sd": (float, 1.5),
    "sim.speed_lo": (float, 1.0),
    "sim.speed_hi": (float, 1.0),
    "sim.static_fraction": (float, 0.0),
    "sim.direction": (_optional(float), None),
    "sim.periodic": (_parse_bool, False),
}


class RunConfig:
    """Typed view over the key=value config file plus schema defaults."""

    def __init__(self, values=None):
        self.values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
        if values:
            self.values.update(values)

    def __getitem__(self, key):
        return self.values[key]


def load_config(path):
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise FileError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        parser, _ = CONFIG_SCHEMA[key]
        try:
            values[key] = parser(value)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return RunConfig(values)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _standardize_frames(frames, means, sds):
    if np.any(sds <= SD_FLOOR):
        raise ValidationError("sequence contains a (near-)constant frame")
    return (frames - means[:, None]) / sds[:, None]


def _load_standardized(path, expected_n):
    frames, means, sds = fileio.read_sequence(path, expected_n=expected_n)
    return _standardize_frames(frames, means, sds), means, sds


def _sequence_paths(data):
    if os.path.isdir(data):
        names = sorted(f for f in os.listdir(data) if f.endswith(".seq"))
        if not names:
            raise FileError(f"no .seq files in {data}")
        return [os.path.join(data, name) for name in names]
    return [data]


def _sim_config(cfg, seed, zone_offset=0):
    return SimConfig(
        n=cfg["grid.n"],
        t_steps=cfg["sim.t_steps"],
        tau=cfg["model.tau"],
        regime=cfg["sim.regime"],
        amplitude=cfg["sim.amplitude"],
        diffusion=cfg["sim.diffusion"],
        forcing_sigma2=cfg["sim.forcing_sigma2"],
        forcing_rho=cfg["sim.forcing_rho"],
        seed=seed + zone_offset,
        n_blobs=cfg["sim.n_blobs"],
        blob_sd=cfg["sim.blob_sd"],
        speed_range=(cfg["sim.speed_lo"], cfg["sim.speed_hi"]),
        direction=cfg["sim.direction"],
        static_fraction=cfg["sim.static_fraction"],
        periodic=cfg["sim.periodic"],
    )


def _build_model(cfg, checkpoint_path):
    params, train_config, noise = fileio.read_checkpoint(checkpoint_path)
    grid = GridSpec(n=params.arch.input_side)
    basis = build_rbf_basis(grid, params.arch.r, cfg["model.bandwidth"])
    return params, train_config, noise, grid, basis


def _write_filter_outputs(out_dir, result, grid):
    fileio.write_sequence(os.path.join(out_dir, "forecast_mean.seq"), result.forecast_mean)
    fileio.write_sequence(os.path.join(out_dir, "forecast_sd.seq"), result.forecast_sd)
    fileio.write_sequence(os.path.join(out_dir, "filtered_mean.seq"), result.filtered_mean)
    fileio.write_sequence(os.path.join(out_dir, "filtered_sd.seq"), result.filtered_sd)
    fileio.write_member_stack(
        os.path.join(out_dir, "forecast_members.stk"), result.forecast_members
    )
    fileio.write_member_stack(
        os.path.join(out_dir, "filtered_members.stk"), result.filtered_members
    )
    if result.forecast_summaries:
        fileio.write_dynamics_csv(
            os.path.join(out_dir, "dynamics_forecast.csv"), result.forecast_summaries, grid
        )
    if result.filtered_summaries:
        fileio.write_dynamics_csv(
            os.path.join(out_dir, "dynamics_filtered.csv"), result.filtered_summaries, grid
        )
    if result.final_ensemble is not None:
        fileio.write_ensemble(os.path.join(out_dir, "final_state.ens"), result.final_ensemble)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    os.makedirs(args.out, exist_ok=True)
    for zone in range(cfg["sim.zones"]):
        result = simulate(_sim_config(cfg, seed, zone))
        tag = f"zone_{zone:03d}"
        fileio.write_sequence(os.path.join(args.out, f"{tag}.seq"), result.frames)
        fileio.write_flow(os.path.join(args.out, f"{tag}.flow"), result.flows)
    print(f"simulate: wrote {cfg['sim.zones']} zone(s) to {args.out}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    n = cfg["grid.n"]
    grid = GridSpec(n=n)
    zones = []
    for path in _sequence_paths(args.data):
        std, _, _ = _load_standardized(path, n)
        zones.append(std)
    dataset = SequenceDataset.from_zone_frames(grid, cfg["model.tau"], zones)
    arch = CnnArchitecture(
        tau=cfg["model.tau"],
        input_side=n,
        filters=cfg["model.filters"],
        patch=cfg["model.patch"],
        r=cfg["model.r"],
    )
    basis = build_rbf_basis(grid, cfg["model.r"], cfg["model.bandwidth"])
    train_config = TrainingConfig(
        batch=cfg["train.batch"],
        lr=cfg["train.lr"],
        max_epochs=cfg["train.max_epochs"],
        valid_frac=cfg["train.valid_frac"],
        tol=cfg["train.tol"],
        sigma2_0=cfg["train.sigma2_0"],
        seed=seed,
    )
    result = train_cnn(dataset, init_cnn_params(arch, seed), basis, train_config)
    fileio.write_checkpoint(args.out, result.params, train_config, noise=None)
    fileio.write_training_log_csv(args.out + ".log.csv", result.history)
    last = result.history[-1]
    print(
        f"train: {len(dataset)} pairs, {len(result.history)} epochs, "
        f"final train loglik {last.train_loglik:.4f} -> {args.out}"
    )
    return 0


def cmd_fit_residuals(args):
    cfg = load_config(args.config)
    params, train_config, _, grid, basis = _build_model(cfg, args.checkpoint)
    zones = []
    for path in _sequence_paths(args.data):
        std, _, _ = _load_standardized(path, grid.n)
        zones.append(std)
    dataset = SequenceDataset.from_zone_frames(grid, params.arch.tau, zones)
    resids = residual_fields(dataset, params, basis)
    noise = fit_residual_matern(resids, grid)
    fileio.write_checkpoint(args.out, params, train_config, noise=noise)
    print(
        f"fit-residuals: {resids.shape[0]} fields -> "
        f"sigma2 {noise.sigma2:.6g}, rho {noise.rho:.6g} -> {args.out}"
    )
    return 0


def _require_noise(noise, checkpoint):
    if noise is None:
        raise ConfigError(
            f"checkpoint {checkpoint} has no noise parameters; run fit-residuals first"
        )


def cmd_filter(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    params, _, noise, grid, basis = _build_model(cfg, args.checkpoint)
    _require_noise(noise, args.checkpoint)
    tau = params.arch.tau
    std, _, _ = _load_standardized(args.data, grid.n)
    if std.shape[0] <= tau:
        raise ValidationError(f"need more than tau={tau} frames, got {std.shape[0]}")
    os.makedirs(args.out, exist_ok=True)
    sigma2_eps = cfg["obs.sigma2_eps"]
    if args.obs:
        obs_seq = fileio.read_observations_csv(args.obs, grid, sigma2_eps)
    else:
        obs_seq = sample_observations(
            std, cfg["obs.pixels"], sigma2_eps, seed, times=range(tau, std.shape[0])
        )
        fileio.write_observations_csv(
            os.path.join(args.out, "observations.csv"), obs_seq, grid
        )
    dynamics = CnnDynamics(params, basis, cfg["model.theta_min"])
    config = FilterConfig(
        n_members=cfg["enkf.n_members"],
        taper_c=cfg["enkf.taper_c"],
        jitter=cfg["enkf.jitter"],
        sigma2_eps=sigma2_eps,
        seed=seed,
    )
    result = run_filter(std[:tau], obs_seq, dynamics, noise, config, grid)
    _write_filter_outputs(args.out, result, grid)
    print(
        f"filter: {len(result.times)} steps "
        f"(t={result.times[0]}..{result.times[-1]}) -> {args.out}"
    )
    return 0


def cmd_forecast(args):
    cfg = load_config(args.config)
    params, _, noise, grid, basis = _build_model(cfg, args.checkpoint)
    _require_noise(noise, args.checkpoint)
    ens = fileio.read_ensemble(args.state)
    dynamics = CnnDynamics(params, basis, cfg["model.theta_min"])
    cov = noise_covariance(grid, noise)
    steps = ensemble_forecast(ens, dynamics, cov.chol, args.steps)
    os.makedirs(args.out, exist_ok=True)
    means, sds, members, summaries = [], [], [], []
    for step_ens in steps:
        mean, sd = ensemble_mean_sd(step_ens)
        means.append(mean)
        sds.append(sd)
        members.append(step_ens.newest().copy())
        summaries.append(dynamics_summary(step_ens, dynamics, "forecast"))
    fileio.write_sequence(os.path.join(args.out, "forecast_mean.seq"), np.array(means))
    fileio.write_sequence(os.path.join(args.out, "forecast_sd.seq"), np.array(sds))
    fileio.write_member_stack(
        os.path.join(args.out, "forecast_members.stk"), np.array(members)
    )
    fileio.write_dynamics_csv(
        os.path.join(args.out, "dynamics_forecast.csv"), summaries, grid
    )
    fileio.write_ensemble(os.path.join(args.out, "final_state.ens"), steps[-1])
    print(f"forecast: {args.steps} step(s) from t={ens.time_index} -> {args.out}")
    return 0


def cmd_baseline(args):
    cfg = load_config(args.config)
    n = cfg["grid.n"]
    grid = GridSpec(n=n)
    tau = cfg["model.tau"]
    std, _, _ = _load_standardized(args.data, n)
    t_total = std.shape[0]
    start = max(tau, WINDOW_LEN)  # windowed fits need WINDOW_LEN past frames
    if t_total <= start:
        raise ValidationError(f"need more than {start} frames, got {t_total}")
    times = list(range(start, t_total))
    sigma2_eps = cfg["obs.sigma2_eps"]
    pers_dir = os.path.join(args.out, "persistence")
    ide_dir = os.path.join(args.out, "window_ide")
    os.makedirs(pers_dir, exist_ok=True)
    os.makedirs(ide_dir, exist_ok=True)
    pers_mean = np.stack([std[t - 1] for t in times])
    fileio.write_sequence(os.path.join(pers_dir, "forecast_mean.seq"), pers_mean)
    fileio.write_sequence(
        os.path.join(pers_dir, "forecast_sd.seq"), np.zeros_like(pers_mean)
    )
    ide_mean = np.empty((len(times), n * n))
    ide_sd = np.empty_like(ide_mean)
    for j, t in enumerate(times):
        window = std[t - WINDOW_LEN : t]
        fit = fit_window_ide(window, grid, sigma2_eps)
        _, post_cov = window_posterior(window, fit, grid, sigma2_eps)
        mean, var = vanilla_ide_forecast(fit, std[t - 1], grid, post_cov)
        ide_mean[j] = mean
        ide_sd[j] = np.sqrt(var)
    fileio.write_sequence(os.path.join(ide_dir, "forecast_mean.seq"), ide_mean)
    fileio.write_sequence(os.path.join(ide_dir, "forecast_sd.seq"), ide_sd)
    print(f"baseline: persistence + window_ide for t={times[0]}..{times[-1]} -> {args.out}")
    return 0


def _score_prediction_dir(pred_dir, truths, mask, offset, method):
    from .metrics import score_ensemble_forecast, score_gaussian_forecast

    mean_path = os.path.join(pred_dir, "forecast_mean.seq")
    members_path = os.path.join(pred_dir, "forecast_members.stk")
    mean, _, _ = fileio.read_sequence(mean_path)
    t_steps = mean.shape[0]
    truth_slice = truths[offset : offset + t_steps]
    if truth_slice.shape[0] != t_steps:
        raise ValidationError(
            f"{method}: {t_steps} forecast frames but only "
            f"{truth_slice.shape[0]} truth frames from offset {offset}"
        )
    if os.path.exists(members_path):
        members = fileio.read_member_stack(members_path)
        return score_ensemble_forecast(method, members, truth_slice, mask)
    sd, _, _ = fileio.read_sequence(os.path.join(pred_dir, "forecast_sd.seq"))
    return score_gaussian_forecast(method, mean, sd, truth_slice, mask)


def cmd_evaluate(args):
    from .grid import interior_mask
    from .metrics import score_ratio_table

    cfg = load_config(args.config)
    n = cfg["grid.n"]
    grid = GridSpec(n=n)
    std, _, _ = _load_standardized(args.truth, n)
    mask = interior_mask(grid, cfg["mask.border"])
    offset = args.offset if args.offset is not None else cfg["model.tau"]
    reports = []
    for pred_dir in args.pred:
        method = os.path.basename(os.path.normpath(pred_dir))
        reports.append(_score_prediction_dir(pred_dir, std, mask, offset, method))
    os.makedirs(args.out, exist_ok=True)
    fileio.write_report_csv(os.path.join(args.out, "report.csv"), reports)
    rows = score_ratio_table(reports, reports[0].method)
    fileio.write_ratio_csv(os.path.join(args.out, "ratios.csv"), rows)
    for rep in reports:
        print(
            f"evaluate: {rep.method}: rmspe {rep.rmspe:.6f} crps {rep.crps:.6f} "
            f"is90 {rep.interval_score:.6f} cov90 {rep.coverage:.4f}"
        )
    return 0


def cmd_extract_flow(args):
    cfg = load_config(args.config)
    params, _, _, grid, basis = _build_model(cfg, args.checkpoint)
    tau = params.arch.tau
    std, _, _ = _load_standardized(args.data, grid.n)
    if std.shape[0] < tau:
        raise ValidationError(f"need at least tau={tau} frames, got {std.shape[0]}")
    window = FrameWindow(
        frames=tuple(Field(grid, std[t].copy()) for t in range(std.shape[0] - tau, std.shape[0]))
    )
    weights, _ = cnn_forward(window, params)
    theta = theta_fields(basis, weights, cfg["model.theta_min"])
    n = grid.n
    with open(args.out, "w", newline="") as fh:
        fh.write(
            "pixel_row,pixel_col,theta1,theta2,theta3,"
            "dx_cells,dy_cells,direction_rad,magnitude_cells\n"
        )
        for pix in range(grid.size):
            row, col = grid.rowcol_of(pix)
            t1 = theta.theta1[pix]
            t2 = theta.theta2[pix]
            t3 = theta.theta3[pix]
            dx, dy = t2 * n, t3 * n
            direction = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
            mag = float(np.hypot(dx, dy))
            fh.write(
                f"{row},{col},{fileio.FLOAT_FMT % t1},{fileio.FLOAT_FMT % t2},"
                f"{fileio.FLOAT_FMT % t3},{fileio.FLOAT_FMT % dx},{fileio.FLOAT_FMT % dy},"
                f"{fileio.FLOAT_FMT % direction},{fileio.FLOAT_FMT % mag}\n"
            )
    print(f"extract-flow: window ending at t={std.shape[0] - 1} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowcast",
        description="Lattice flow forecasting with a learned transition kernel.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")

    p = sub.add_parser("simulate", help="generate synthetic zone sequences")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit the network by conditional likelihood")
    common(p)
    p.add_argument("--data", required=True, help=".seq file or directory of them")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-residuals", help="fit noise covariance to residuals")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (with noise)")
    p.set_defaults(func=cmd_fit_residuals)

    p = sub.add_parser("filter", help="assimilate observations over a sequence")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="truth .seq (for obs sampling)")
    p.add_argument("--obs", default=None, help="observations CSV (else sampled)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("forecast", help="free-run the ensemble forward")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--state", required=True, help="ensemble state file")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("baseline", help="persistence and windowed constant-kernel forecasts")
    common(p)
    p.add_argument("--data", required=True, help="truth .seq")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="score forecast directories against truth")
    common(p)
    p.add_argument("--pred", action="append", required=True, help="forecast dir (repeatable)")
    p.add_argument("--truth", required=True, help="truth .seq")
    p.add_argument("--offset", type=int, default=None, help="truth index of first forecast frame")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract-flow", help="kernel-parameter fields for the last window")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help=".seq with at least tau frames")
    p.add_argument("--out", required=True, help="flow CSV path")
    p.set_defaults(func=cmd_extract_flow)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError(f"--threads must be >= 1, got {args.threads}")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error code=2 type={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 2
    except (FileError, OSError) as exc:
        print(f"error code=3 type={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 3
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        # NumericError subclasses ArithmeticError, as do overflow/zero-division
        print(f"error code=4 type={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 4
    except FlowcastError as exc:
        print(f"error code=2 type={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
