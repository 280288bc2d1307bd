"""Forecast verification: RMSPE, CRPS, 90% interval score and coverage.

Aggregations over pixels and times use compensated summation so scores are
stable against accumulation order.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .exceptions import (
    DimensionMismatch,
    EmptyMask,
    InvertedInterval,
    MismatchedCoverage,
)

Q_LO = 0.05
Q_HI = 0.95
PENALTY_90 = 20.0  # 2/alpha for alpha = 0.10
_Z90 = float(norm.ppf(Q_HI))
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


def _masked(values, mask):
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        return values.reshape(values.shape[0], -1) if values.ndim > 1 else values
    mask = np.asarray(mask, dtype=bool)
    if values.shape[-1] != mask.size:
        raise DimensionMismatch(
            f"mask of size {mask.size} against trailing axis {values.shape[-1]}"
        )
    if not mask.any():
        raise EmptyMask("verification mask selects no pixels")
    return values[..., mask]


def rmspe(predictions, truths, mask=None):
    """Root mean squared prediction error over masked pixels (and times)."""
    pred = _masked(predictions, mask)
    true = _masked(truths, mask)
    if pred.shape != true.shape:
        raise DimensionMismatch(f"predictions {pred.shape} vs truths {true.shape}")
    sq = np.ravel((pred - true) ** 2)
    return math.sqrt(math.fsum(sq.tolist()) / sq.size)


def crps_ensemble(members, y):
    """CRPS of an equally-weighted ensemble against a scalar outcome.

    mean |x_i - y| - (1 / (2 N^2)) sum_{i,j} |x_i - x_j|, the second term via
    the sorted representation (1 / N^2) sum_k (2k + 1 - N) x_(k).
    """
    x = np.sort(np.asarray(members, dtype=np.float64))
    n = x.size
    term1 = math.fsum(np.abs(x - float(y)).tolist()) / n
    coeffs = 2.0 * np.arange(n) + 1.0 - n
    term2 = math.fsum((coeffs * x).tolist()) / (n * n)
    return term1 - term2


def crps_fields(members, truths, mask=None):
    """Mean ensemble CRPS over masked pixels.

    members: (..., N, n^2) with the ensemble on the second-to-last axis;
    truths: (..., n^2).  Returns the average of the per-pixel CRPS values.
    """
    members = np.asarray(members, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if members.shape[:-2] != truths.shape[:-1] or members.shape[-1] != truths.shape[-1]:
        raise DimensionMismatch(f"members {members.shape} vs truths {truths.shape}")
    memb = _masked(members, mask)
    true = _masked(truths, mask)
    n = memb.shape[-2]
    x = np.sort(memb, axis=-2)
    term1 = np.mean(np.abs(x - true[..., None, :]), axis=-2)
    coeffs = (2.0 * np.arange(n) + 1.0 - n).reshape(
        (1,) * (x.ndim - 2) + (n, 1)
    )
    term2 = np.sum(coeffs * x, axis=-2) / (n * n)
    per_pixel = np.ravel(term1 - term2)
    return math.fsum(per_pixel.tolist()) / per_pixel.size


def crps_gaussian(mean, sd, y):
    """Closed-form CRPS of a normal predictive distribution (elementwise).

    sd = 0 is the point-forecast limit, scoring |mean - y|.
    """
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    if np.any(sd < 0):
        raise InvertedInterval("Gaussian CRPS needs sd >= 0")
    err = np.asarray(y, dtype=np.float64) - mean
    safe_sd = np.where(sd > 0, sd, 1.0)
    z = err / safe_sd
    smooth = safe_sd * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - _INV_SQRT_PI)
    return np.where(sd > 0, smooth, np.abs(err))


def ensemble_quantiles(members, axis=-2):
    """(5%, 95%) ensemble quantiles with linear interpolation."""
    members = np.asarray(members, dtype=np.float64)
    lo = np.quantile(members, Q_LO, axis=axis, method="linear")
    hi = np.quantile(members, Q_HI, axis=axis, method="linear")
    return lo, hi


def gaussian_quantiles(mean, sd):
    """(5%, 95%) quantiles of a normal predictive distribution."""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    return mean - _Z90 * sd, mean + _Z90 * sd


def _check_interval(lower, upper):
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if lower.shape != upper.shape:
        raise DimensionMismatch(f"interval bounds {lower.shape} vs {upper.shape}")
    if np.any(lower > upper):
        raise InvertedInterval("lower interval bound exceeds upper bound")
    return lower, upper


def interval_score_90(lower, upper, truths, mask=None):
    """Mean 90% interval score: width plus 20x the amount by which the truth
    escapes the interval on either side."""
    lower, upper = _check_interval(lower, upper)
    lo = _masked(lower, mask)
    hi = _masked(upper, mask)
    y = _masked(truths, mask)
    score = (hi - lo) + PENALTY_90 * (lo - y) * (y < lo) + PENALTY_90 * (y - hi) * (y > hi)
    flat = np.ravel(score)
    return math.fsum(flat.tolist()) / flat.size


def coverage_90(lower, upper, truths, mask=None):
    """Fraction of masked pixels whose truth lands inside [lower, upper]."""
    lower, upper = _check_interval(lower, upper)
    lo = _masked(lower, mask)
    hi = _masked(upper, mask)
    y = _masked(truths, mask)
    inside = (y >= lo) & (y <= hi)
    return float(np.count_nonzero(inside)) / inside.size


@dataclass(frozen=True)
class ScoreReport:
    """Verification scores for one method over one evaluation block."""

    method: str
    rmspe: float
    crps: float
    interval_score: float
    coverage: float
    n_values: int
    zone: int = 0
    t: int = -1  # -1 marks an all-times aggregate


def score_ensemble_forecast(method, members, truths, mask=None, zone=0, t=-1):
    """Full report for an ensemble forecast: members (T, N, n^2), truths (T, n^2)."""
    members = np.asarray(members, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    mean = members.mean(axis=-2)
    lo, hi = ensemble_quantiles(members, axis=-2)
    n_values = _masked(truths, mask).size
    return ScoreReport(
        method=method,
        rmspe=rmspe(mean, truths, mask),
        crps=crps_fields(members, truths, mask),
        interval_score=interval_score_90(lo, hi, truths, mask),
        coverage=coverage_90(lo, hi, truths, mask),
        n_values=n_values,
        zone=zone,
        t=t,
    )


def score_gaussian_forecast(method, mean, sd, truths, mask=None, zone=0, t=-1):
    """Full report for a Gaussian forecast given pointwise mean and sd."""
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    lo, hi = gaussian_quantiles(mean, sd)
    crps_vals = np.ravel(_masked(crps_gaussian(mean, sd, truths), mask))
    n_values = crps_vals.size
    return ScoreReport(
        method=method,
        rmspe=rmspe(mean, truths, mask),
        crps=math.fsum(crps_vals.tolist()) / n_values,
        interval_score=interval_score_90(lo, hi, truths, mask),
        coverage=coverage_90(lo, hi, truths, mask),
        n_values=n_values,
        zone=zone,
        t=t,
    )


def score_ratio_table(reports, reference_method):
    """Ratios of each method's RMSPE / CRPS / interval score to a reference.

    reports: list of ScoreReport covering the same evaluation block.  All
    reports must agree on n_values; the reference must be present.
    """
    by_method = {r.method: r for r in reports}
    if reference_method not in by_method:
        raise MismatchedCoverage(f"reference method {reference_method!r} missing")
    sizes = {r.n_values for r in reports}
    if len(sizes) != 1:
        raise MismatchedCoverage(f"reports cover different pixel counts: {sizes}")
    ref = by_method[reference_method]
    rows = []
    for rep in reports:
        rows.append(
            {
                "method": rep.method,
                "rmspe_ratio": _ratio(rep.rmspe, ref.rmspe),
                "crps_ratio": _ratio(rep.crps, ref.crps),
                "interval_score_ratio": _ratio(rep.interval_score, ref.interval_score),
                "coverage": rep.coverage,
            }
        )
    return rows


def _ratio(value, reference):
    """value / reference with the perfect-reference limit 0/0 -> 1."""
    if reference == 0.0:
        return 1.0 if value == 0.0 else math.inf
    return value / reference
