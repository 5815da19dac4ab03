"""Per-slice prediction metrics and front-position estimation.

Metric conventions (``M`` spatial points per slice, variances floored at
1e-12 because exactly-constrained directions can collapse to zero):

* conservation error: signed row residual ``(G mu - b)`` at one time slice;
* log-likelihood:
  ``-(1/2M) sum_i (u_i - mu_i)^2 / s_i^2 - (1/2M) sum_i log s_i^2 - log 2 pi``
  with ``s_i^2`` the per-point variances of the slice;
* mean-squared error: ``(1/M) ||u - mu||_2^2``.

The front estimator scans a profile left to right for the first value at or
below a threshold; its posterior is summarized as mean +/- 3 standard
deviations over samples of the field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DomainError, ShapeError
from .fields import GaussianField
from .update import posterior_sample

__all__ = [
    "MetricsRecord",
    "ShockPosterior",
    "conservation_error",
    "log_likelihood",
    "mse",
    "shock_estimate",
    "shock_posterior",
    "VARIANCE_FLOOR",
]

VARIANCE_FLOOR = 1e-12

# Threshold for "the profile has reached zero", relative to the profile's
# own scale; exact zeros are not attainable in floating point.
SHOCK_EPS_REL = 1e-6


@dataclass(frozen=True)
class MetricsRecord:
    """Metric values of one method at one time slice."""

    time_index: int
    ce: float
    ll: float
    mse: float
    shock_estimate: float | None = None
    shock_spread: float | None = None


def conservation_error(mean: np.ndarray, g: np.ndarray, b: np.ndarray, time_index: int) -> float:
    """Signed constraint residual ``(G mean - b)`` at one row."""
    g = np.asarray(g, dtype=float)
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if not 0 <= time_index < g.shape[0]:
        raise DomainError(f"row index {time_index} outside [0, {g.shape[0]})")
    return float(g[time_index] @ np.asarray(mean, dtype=float) - b[time_index])


def log_likelihood(u_true_slice: np.ndarray, field: GaussianField, time_index: int) -> float:
    u = np.asarray(u_true_slice, dtype=float)
    mu = field.slice_mean(time_index)
    if u.shape != mu.shape:
        raise ShapeError(f"truth slice has shape {u.shape}, expected {mu.shape}")
    var = np.maximum(field.slice_variances(time_index), VARIANCE_FLOOR)
    m = u.shape[0]
    data = float(np.sum((u - mu) ** 2 / var)) / (2.0 * m)
    logdet = float(np.sum(np.log(var))) / (2.0 * m)
    return -data - logdet - math.log(2.0 * math.pi)


def mse(u_true_slice: np.ndarray, mean_slice: np.ndarray) -> float:
    u = np.asarray(u_true_slice, dtype=float)
    mu = np.asarray(mean_slice, dtype=float)
    if u.shape != mu.shape:
        raise ShapeError(f"slices have shapes {u.shape} and {mu.shape}")
    return float(np.mean((u - mu) ** 2))


def shock_estimate(profile, positions, eps: float | None = None) -> float | None:
    """Leftmost position where the profile is at or below ``eps``.

    ``eps`` defaults to ``1e-6 * max|profile|``. Returns ``None`` when the
    profile never reaches the threshold (no front in view).
    """
    profile = np.atleast_1d(np.asarray(profile, dtype=float))
    positions = np.atleast_1d(np.asarray(positions, dtype=float))
    if profile.shape != positions.shape:
        raise ShapeError("profile and positions must have equal length")
    if eps is None:
        eps = SHOCK_EPS_REL * float(np.max(np.abs(profile), initial=0.0))
    hits = np.flatnonzero(profile <= eps)
    if hits.size == 0:
        return None
    return float(positions[hits[0]])


@dataclass(frozen=True)
class ShockPosterior:
    """Sampled front positions with a mean +/- 3 std summary."""

    estimates: np.ndarray
    n_samples: int
    n_shockless: int
    mean: float | None
    std: float | None
    lower: float | None = dc_field(default=None)
    upper: float | None = dc_field(default=None)

    @property
    def empty(self) -> bool:
        return self.mean is None


def shock_posterior(
    field: GaussianField,
    time_index: int,
    n: int,
    seed: int,
    eps: float | None = None,
) -> ShockPosterior:
    """Posterior of the front position at one time slice.

    Draws ``n`` profiles from the slice distribution, locates the front in
    each, and summarizes as mean +/- 3 standard deviations. Samples without a
    front are counted but excluded from the summary; an all-shockless draw
    produces an empty report rather than an error.
    """
    if n < 100:
        raise DomainError(f"need at least 100 samples for a stable summary, got {n}")
    slice_field = field.slice_field(time_index)
    if eps is None:
        eps = SHOCK_EPS_REL * float(np.max(np.abs(slice_field.mean), initial=0.0))
    samples = posterior_sample(slice_field, n, seed)
    positions = slice_field.grid.positions
    found = []
    shockless = 0
    for row in samples:
        est = shock_estimate(row, positions, eps)
        if est is None:
            shockless += 1
        else:
            found.append(est)
    estimates = np.asarray(found, dtype=float)
    if estimates.size == 0:
        return ShockPosterior(
            estimates=estimates, n_samples=n, n_shockless=shockless,
            mean=None, std=None, lower=None, upper=None,
        )
    mean = float(estimates.mean())
    std = float(estimates.std(ddof=1)) if estimates.size > 1 else 0.0
    return ShockPosterior(
        estimates=estimates,
        n_samples=n,
        n_shockless=shockless,
        mean=mean,
        std=std,
        lower=mean - 3.0 * std,
        upper=mean + 3.0 * std,
    )
