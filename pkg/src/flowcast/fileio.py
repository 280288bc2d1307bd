"""On-disk formats: frame sequences, flows, ensembles, checkpoints, CSVs.

All binary formats are little-endian with a 4-byte ASCII magic and a version
word.  Frames are stored as 32-bit floats on disk and promoted to 64-bit on
load; everything else (records, tensors, ensemble members) stays 64-bit.
Writers are deterministic: identical inputs produce identical bytes.
"""

import csv
import io
import struct

import numpy as np

from .cnn import CnnArchitecture, CnnParams
from .enkf import Ensemble, Observations
from .exceptions import BadMagic, ShapeMismatchOnLoad, TruncatedPayload
from .grid import GridSpec
from .likelihood import NoiseParams, TrainingConfig

MAGIC_SEQUENCE = b"IDEQ"
MAGIC_FLOW = b"IDEF"
MAGIC_ENSEMBLE = b"IDEE"
MAGIC_MEMBER_STACK = b"IDES"
MAGIC_CHECKPOINT = b"IDEC"
FORMAT_VERSION = 1

FLOAT_FMT = "%.17g"  # lossless float64 text round-trip


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedPayload(f"expected {count} bytes for {what}, got {len(data)}")
    return data


def _check_magic(fh, expected):
    magic = fh.read(4)
    if magic != expected:
        raise BadMagic(f"bad magic {magic!r}, expected {expected!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != FORMAT_VERSION:
        raise BadMagic(f"unsupported format version {version}")


def _square_side(n2, what):
    n = int(round(n2**0.5))
    if n * n != n2:
        raise ShapeMismatchOnLoad(f"{what}: {n2} pixels is not a square grid")
    return n


# ---------------------------------------------------------------------------
# frame sequences and flow fields
# ---------------------------------------------------------------------------

def write_sequence(path, frames):
    """Frames (T, n^2) -> sequence file; per-frame (mean, sd) records describe
    the 32-bit payload actually stored, so save/load/save is byte-identical."""
    frames = np.asarray(frames, dtype=np.float64)
    t_steps, n2 = frames.shape
    n = _square_side(n2, "write_sequence")
    quantized = frames.astype("<f4")
    stored = quantized.astype(np.float64)
    means = stored.mean(axis=1)
    sds = stored.std(axis=1)
    with open(path, "wb") as fh:
        fh.write(MAGIC_SEQUENCE)
        fh.write(struct.pack("<IIIIB", FORMAT_VERSION, n, t_steps, 4, 1))
        fh.write(quantized.tobytes(order="C"))
        fh.write(np.stack([means, sds], axis=1).astype("<f8").tobytes(order="C"))


def read_sequence(path, expected_n=None):
    """Returns (frames (T, n^2) float64, means (T,), sds (T,))."""
    with open(path, "rb") as fh:
        _check_magic(fh, MAGIC_SEQUENCE)
        n, t_steps, width, rowmajor = struct.unpack(
            "<IIIB", _read_exact(fh, 13, "sequence header")
        )
        if width != 4 or rowmajor != 1:
            raise ShapeMismatchOnLoad(
                f"unsupported scalar width {width} / row-major flag {rowmajor}"
            )
        if expected_n is not None and n != expected_n:
            raise ShapeMismatchOnLoad(f"sequence grid n={n}, expected {expected_n}")
        payload = _read_exact(fh, t_steps * n * n * 4, "frame payload")
        frames = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        frames = frames.reshape(t_steps, n * n)
        recs = _read_exact(fh, t_steps * 16, "standardization records")
        recs = np.frombuffer(recs, dtype="<f8").reshape(t_steps, 2)
    return frames, recs[:, 0].copy(), recs[:, 1].copy()


def write_flow(path, flows):
    """Flows (T, n^2, 2) in cells/step -> flow file (32-bit payload)."""
    flows = np.asarray(flows, dtype=np.float64)
    t_steps, n2, two = flows.shape
    if two != 2:
        raise ShapeMismatchOnLoad(f"flow last axis must be 2, got {two}")
    n = _square_side(n2, "write_flow")
    with open(path, "wb") as fh:
        fh.write(MAGIC_FLOW)
        fh.write(struct.pack("<III", FORMAT_VERSION, n, t_steps))
        fh.write(flows.astype("<f4").tobytes(order="C"))


def read_flow(path, expected_n=None):
    with open(path, "rb") as fh:
        _check_magic(fh, MAGIC_FLOW)
        n, t_steps = struct.unpack("<II", _read_exact(fh, 8, "flow header"))
        if expected_n is not None and n != expected_n:
            raise ShapeMismatchOnLoad(f"flow grid n={n}, expected {expected_n}")
        payload = _read_exact(fh, t_steps * n * n * 2 * 4, "flow payload")
        flows = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return flows.reshape(t_steps, n * n, 2)


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def _pack_ensemble(ens):
    n_members, tau, n2 = ens.members.shape
    n = _square_side(n2, "ensemble")
    head = struct.pack(
        "<IIIIqq", FORMAT_VERSION, n, tau, n_members, ens.time_index, ens.seed
    )
    return MAGIC_ENSEMBLE + head + ens.members.astype("<f8").tobytes(order="C")


def _unpack_ensemble(fh):
    _check_magic(fh, MAGIC_ENSEMBLE)
    n, tau, n_members, time_index, seed = struct.unpack(
        "<IIIqq", _read_exact(fh, 28, "ensemble header")
    )
    n2 = n * n
    payload = _read_exact(fh, n_members * tau * n2 * 8, "ensemble payload")
    members = np.frombuffer(payload, dtype="<f8").reshape(n_members, tau, n2).copy()
    return Ensemble(
        grid=GridSpec(n=n),
        members=members,
        time_index=int(time_index),
        seed=int(seed),
    )


def write_ensemble(path, ens):
    with open(path, "wb") as fh:
        fh.write(_pack_ensemble(ens))


def read_ensemble(path):
    with open(path, "rb") as fh:
        return _unpack_ensemble(fh)


def write_member_stack(path, members):
    """Per-step newest-frame members (T, N, n^2) float64, for scoring."""
    members = np.asarray(members, dtype=np.float64)
    t_steps, n_members, n2 = members.shape
    n = _square_side(n2, "write_member_stack")
    with open(path, "wb") as fh:
        fh.write(MAGIC_MEMBER_STACK)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, n, t_steps, n_members))
        fh.write(members.astype("<f8").tobytes(order="C"))


def read_member_stack(path, expected_n=None):
    with open(path, "rb") as fh:
        _check_magic(fh, MAGIC_MEMBER_STACK)
        n, t_steps, n_members = struct.unpack(
            "<III", _read_exact(fh, 12, "member-stack header")
        )
        if expected_n is not None and n != expected_n:
            raise ShapeMismatchOnLoad(f"member stack n={n}, expected {expected_n}")
        payload = _read_exact(fh, t_steps * n_members * n * n * 8, "member payload")
        members = np.frombuffer(payload, dtype="<f8")
    return members.reshape(t_steps, n_members, n * n).copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_string(text):
    raw = text.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_string(fh, what):
    (length,) = struct.unpack("<H", _read_exact(fh, 2, f"{what} length"))
    return _read_exact(fh, length, what).decode("utf-8")


def write_checkpoint(path, params, train_config=None, noise=None):
    """Model checkpoint: architecture, canonical tensors (tied tensors appear
    once), the training configuration, and fitted noise parameters if any."""
    arch = params.arch
    buf = io.BytesIO()
    buf.write(MAGIC_CHECKPOINT)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(
        struct.pack(
            "<IIIII",
            arch.tau,
            arch.input_side,
            arch.patch,
            arch.r,
            len(arch.filters),
        )
    )
    buf.write(struct.pack(f"<{len(arch.filters)}I", *arch.filters))
    tc = train_config if train_config is not None else TrainingConfig()
    buf.write(
        struct.pack(
            "<IdIdddq",
            tc.batch,
            tc.lr,
            tc.max_epochs,
            tc.valid_frac,
            tc.tol,
            tc.sigma2_0,
            tc.seed,
        )
    )
    if noise is None:
        buf.write(struct.pack("<Bdd", 0, 0.0, 0.0))
    else:
        buf.write(struct.pack("<Bdd", 1, noise.sigma2, noise.rho))
    names = params.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        tensor = params.tensors[name]
        buf.write(_pack_string(name))
        buf.write(struct.pack("<B", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(tensor.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    """Returns (CnnParams, TrainingConfig, NoiseParams or None)."""
    with open(path, "rb") as fh:
        _check_magic(fh, MAGIC_CHECKPOINT)
        tau, input_side, patch, r, n_stages = struct.unpack(
            "<IIIII", _read_exact(fh, 20, "architecture")
        )
        filters = struct.unpack(
            f"<{n_stages}I", _read_exact(fh, 4 * n_stages, "filter counts")
        )
        arch = CnnArchitecture(
            tau=tau, input_side=input_side, filters=tuple(filters), patch=patch, r=r
        )
        batch, lr, max_epochs, valid_frac, tol, sigma2_0, seed = struct.unpack(
            "<IdIdddq", _read_exact(fh, 48, "training config")
        )
        train_config = TrainingConfig(
            batch=batch,
            lr=lr,
            max_epochs=max_epochs,
            valid_frac=valid_frac,
            tol=tol,
            sigma2_0=sigma2_0,
            seed=seed,
        )
        has_noise, sigma2, rho = struct.unpack(
            "<Bdd", _read_exact(fh, 17, "noise parameters")
        )
        noise = NoiseParams(sigma2=sigma2, rho=rho) if has_noise else None
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(n_tensors):
            name = _unpack_string(fh, "tensor name")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "tensor rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor shape"))
            count = int(np.prod(shape)) if ndim else 1
            data = _read_exact(fh, count * 8, f"tensor {name}")
            tensor = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
            expected = arch.tensor_shape(name)
            if tuple(tensor.shape) != expected:
                raise ShapeMismatchOnLoad(
                    f"tensor {name} shaped {tensor.shape}, expected {expected}"
                )
            tensors[name] = tensor
        missing = set(arch.tensor_names()) - set(tensors)
        if missing:
            raise TruncatedPayload(f"checkpoint missing tensors: {sorted(missing)}")
        params = CnnParams(arch=arch, tensors=tensors)
    return params, train_config, noise


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------

def write_observations_csv(path, obs_list, grid):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "pixel_row", "pixel_col", "value"])
        for obs in obs_list:
            for idx, value in zip(obs.pixel_indices, obs.values):
                row, col = grid.rowcol_of(int(idx))
                writer.writerow([obs.t, row, col, FLOAT_FMT % value])


def read_observations_csv(path, grid, sigma2_eps):
    """Groups rows by time step; sigma2_eps attaches the known error variance."""
    by_t = {}
    with open(path, "r", newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"t", "pixel_row", "pixel_col", "value"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise ShapeMismatchOnLoad(
                f"observations CSV needs columns {sorted(needed)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            t = int(row["t"])
            idx = grid.index_of(int(row["pixel_row"]), int(row["pixel_col"]))
            by_t.setdefault(t, []).append((idx, float(row["value"])))
    out = []
    for t in sorted(by_t):
        pairs = sorted(by_t[t])
        return_idx = np.array([p[0] for p in pairs], dtype=np.int64)
        values = np.array([p[1] for p in pairs], dtype=np.float64)
        out.append(
            Observations(
                t=t, pixel_indices=return_idx, values=values, sigma2_eps=sigma2_eps
            )
        )
    return out


def write_dynamics_csv(path, summaries, grid):
    """Per-pixel kernel-parameter statistics and direction histograms,
    one block of n^2 rows per summary (time-stamped)."""
    n_bins = summaries[0].direction_counts.shape[1] if summaries else 12
    header = (
        ["kind", "t", "pixel_row", "pixel_col"]
        + [f"mean_theta{i}" for i in (1, 2, 3)]
        + [f"var_theta{i}" for i in (1, 2, 3)]
        + [f"bin_{b:02d}" for b in range(n_bins)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for summary in summaries:
            for pix in range(grid.size):
                row, col = grid.rowcol_of(pix)
                cells = [summary.kind, summary.t, row, col]
                cells += [FLOAT_FMT % summary.theta_mean[i, pix] for i in range(3)]
                cells += [FLOAT_FMT % summary.theta_var[i, pix] for i in range(3)]
                cells += [int(c) for c in summary.direction_counts[pix]]
                writer.writerow(cells)


def write_report_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "zone", "t", "rmspe", "crps", "is90", "cov90"])
        for rep in reports:
            writer.writerow(
                [
                    rep.method,
                    rep.zone,
                    rep.t,
                    FLOAT_FMT % rep.rmspe,
                    FLOAT_FMT % rep.crps,
                    FLOAT_FMT % rep.interval_score,
                    FLOAT_FMT % rep.coverage,
                ]
            )


def write_ratio_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "rmspe_ratio", "crps_ratio", "interval_score_ratio", "coverage"]
        )
        for row in rows:
            writer.writerow(
                [
                    row["method"],
                    FLOAT_FMT % row["rmspe_ratio"],
                    FLOAT_FMT % row["crps_ratio"],
                    FLOAT_FMT % row["interval_score_ratio"],
                    FLOAT_FMT % row["coverage"],
                ]
            )


def write_training_log_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loglik", "valid_loglik", "wall_seconds"])
        for epoch in history:
            writer.writerow(
                [
                    epoch.epoch,
                    FLOAT_FMT % epoch.train_loglik,
                    FLOAT_FMT % epoch.valid_loglik,
                    "%.3f" % epoch.wall_seconds,
                ]
            )
