"""Gaussian-process estimation of a field from scattered observations.

This is the default first-stage estimator: an exact GP with a zero prior
mean and an anisotropic squared-exponential kernel over ``(t, x)``,

    k((t,x), (t',x')) = s^2 exp(-0.5 [((t-t')/l_t)^2 + ((x-x')/l_x)^2]).

Hyperparameters are chosen by maximizing the log marginal likelihood with a
deterministic coordinate search over log-scale grids. An empirical-ensemble
adapter provides the same ``GaussianField`` output for callers that bring
their own repeated predictions instead of a GP.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

from .errors import ConditioningError, FitError, InsufficientDataError, ShapeError
from .fields import ContextSet, GaussianField
from .grids import Grid

__all__ = [
    "KernelConfig",
    "SearchConfig",
    "gp_fit_predict",
    "fit_hyperparameters",
    "log_marginal_likelihood",
    "ensemble_to_field",
]

log = logging.getLogger(__name__)

_JITTER_START_REL = 1e-10
_JITTER_MAX_REL = 1e-4


@dataclass(frozen=True)
class KernelConfig:
    """Squared-exponential kernel hyperparameters plus observation noise."""

    lengthscale_t: float = 0.3
    lengthscale_x: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-6

    def __post_init__(self):
        if min(self.lengthscale_t, self.lengthscale_x, self.signal_variance) <= 0:
            raise ShapeError("lengthscales and signal variance must be positive")
        if self.noise_variance < 0:
            raise ShapeError("noise variance must be nonnegative")


@dataclass(frozen=True)
class SearchConfig:
    """Bounds and resolution of the marginal-likelihood coordinate search."""

    lengthscale_t_bounds: tuple[float, float] = (1e-2, 10.0)
    lengthscale_x_bounds: tuple[float, float] = (1e-2, 10.0)
    signal_variance_bounds: tuple[float, float] = (1e-6, 1e3)
    noise_variance_bounds: tuple[float, float] = (1e-10, 1.0)
    candidates_per_axis: int = 13
    passes: int = 3
    refine_passes: int = 2


def _gram(xa: np.ndarray, xb: np.ndarray, config: KernelConfig) -> np.ndarray:
    dt = (xa[:, 0, None] - xb[None, :, 0]) / config.lengthscale_t
    dx = (xa[:, 1, None] - xb[None, :, 1]) / config.lengthscale_x
    return config.signal_variance * np.exp(-0.5 * (dt * dt + dx * dx))


def _factor_kernel(k: np.ndarray, what: str):
    """Cholesky with the escalating jitter policy (relative to mean diagonal)."""
    n = k.shape[0]
    base = float(np.trace(k)) / max(n, 1)
    jitter = _JITTER_START_REL * base
    attempt = k + jitter * np.eye(n)
    while True:
        try:
            factor = cho_factor(attempt, lower=True)
            if jitter > _JITTER_START_REL * base:
                log.debug("%s: kernel factored with jitter %.3e", what, jitter)
            return factor, jitter
        except LinAlgError:
            jitter *= 10.0
            if jitter > _JITTER_MAX_REL * base:
                raise ConditioningError(
                    f"{what}: kernel system not factorable within jitter budget",
                    condition_estimate=float(np.linalg.cond(k)),
                ) from None
            attempt = k + jitter * np.eye(n)


def gp_fit_predict(
    context: ContextSet,
    grid: Grid,
    config: KernelConfig,
    *,
    prior_only: bool = False,
    diagonal: bool = False,
) -> GaussianField:
    """Exact GP posterior mean and covariance on the grid.

    Returns the full posterior covariance by default; ``diagonal=True``
    computes only the posterior variances (same values as the full diagonal),
    which avoids the grid-by-grid gram matrix entirely. With
    ``prior_only=True`` (or together with an empty context) the prior itself
    is returned: zero mean and the kernel gram over the grid.
    """
    xg = grid.flat_points()
    if prior_only or len(context) == 0:
        if not prior_only:
            raise InsufficientDataError(
                "context is empty; pass prior_only=True for a no-data field"
            )
        if diagonal:
            return GaussianField(
                grid=grid, mean=np.zeros(grid.size),
                cov=np.full(grid.size, config.signal_variance),
            )
        cov = _gram(xg, xg, config)
        return GaussianField(grid=grid, mean=np.zeros(grid.size), cov=0.5 * (cov + cov.T))
    xc, y = context.points, context.values
    kcc = _gram(xc, xc, config) + config.noise_variance * np.eye(len(context))
    factor, _ = _factor_kernel(kcc, "gp_fit_predict")
    kgc = _gram(xg, xc, config)
    mean = kgc @ cho_solve(factor, y)
    lower = solve_triangular(factor[0], kgc.T, lower=True)
    if diagonal:
        var = config.signal_variance - np.einsum("ij,ij->j", lower, lower)
        return GaussianField(grid=grid, mean=mean, cov=np.maximum(var, 0.0))
    # cov = Kgg - Kgc Kcc^{-1} Kcg via a triangular solve so it stays symmetric
    cov = _gram(xg, xg, config) - lower.T @ lower
    cov = 0.5 * (cov + cov.T)
    return GaussianField(grid=grid, mean=mean, cov=cov)


def log_marginal_likelihood(context: ContextSet, config: KernelConfig) -> float:
    """GP evidence of the context under a kernel config; ``-inf`` when the
    kernel system cannot be factored."""
    if len(context) == 0:
        raise InsufficientDataError("cannot score an empty context")
    xc, y = context.points, context.values
    kcc = _gram(xc, xc, config) + config.noise_variance * np.eye(len(context))
    try:
        factor, _ = _factor_kernel(kcc, "log_marginal_likelihood")
    except ConditioningError:
        return -math.inf
    alpha = cho_solve(factor, y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return float(-0.5 * y @ alpha - 0.5 * logdet - 0.5 * len(context) * math.log(2.0 * math.pi))


def _coordinate_axes(search: SearchConfig):
    return (
        ("lengthscale_t", search.lengthscale_t_bounds),
        ("lengthscale_x", search.lengthscale_x_bounds),
        ("signal_variance", search.signal_variance_bounds),
        ("noise_variance", search.noise_variance_bounds),
    )


def fit_hyperparameters(
    context: ContextSet, search: SearchConfig | None = None
) -> KernelConfig:
    """Maximize the log marginal likelihood by coordinate search.

    Each pass sweeps every hyperparameter over a geometric candidate grid
    within its bounds, keeping the best value before moving to the next axis;
    refinement passes then shrink the grids around the incumbent. The search
    is fully deterministic.
    """
    search = search or SearchConfig()
    if len(context) < 5:
        raise InsufficientDataError(
            f"hyperparameter fit needs at least 5 context points, got {len(context)}"
        )
    if np.ptp(context.points[:, 0]) == 0.0 and np.ptp(context.points[:, 1]) == 0.0:
        raise FitError("degenerate context: all observation inputs coincide")

    # Search on standardized values so the variance grids are data-relative
    # and the whole procedure is exactly scale-equivariant; fitted variances
    # are mapped back at the end.
    data_scale = float(np.std(context.values))
    if data_scale > 0.0:
        context = ContextSet(
            points=context.points,
            values=context.values / data_scale,
            noise_std=context.noise_std,
        )

    def clipped_geomspace(lo, hi, n):
        return np.geomspace(max(lo, 1e-300), hi, n)

    y_var = float(np.var(context.values))
    current = KernelConfig(
        lengthscale_t=float(np.clip(0.25 * max(np.ptp(context.points[:, 0]), 1e-3),
                                    *search.lengthscale_t_bounds)),
        lengthscale_x=float(np.clip(0.25 * max(np.ptp(context.points[:, 1]), 1e-3),
                                    *search.lengthscale_x_bounds)),
        signal_variance=float(np.clip(max(y_var, 1e-6), *search.signal_variance_bounds)),
        noise_variance=float(np.clip(1e-2 * max(y_var, 1e-6), *search.noise_variance_bounds)),
    )
    best_score = log_marginal_likelihood(context, current)

    def concentrate_scale(config: KernelConfig) -> KernelConfig:
        # With signal and noise variance rescaled together, the evidence is
        # maximized in closed form at c = y' K^{-1} y / n; applying it removes
        # the scale ridge from the coordinate search.
        xc, y = context.points, context.values
        kcc = _gram(xc, xc, config) + config.noise_variance * np.eye(len(context))
        try:
            factor, _ = _factor_kernel(kcc, "fit_hyperparameters")
        except ConditioningError:
            return config
        c = float(y @ cho_solve(factor, y)) / len(context)
        lo_s, hi_s = search.signal_variance_bounds
        lo_n, hi_n = search.noise_variance_bounds
        if c <= 0.0:
            return config
        scaled = replace(
            config,
            signal_variance=float(np.clip(c * config.signal_variance, lo_s, hi_s)),
            noise_variance=float(np.clip(c * config.noise_variance, lo_n, hi_n)),
        )
        return scaled

    n_cand = search.candidates_per_axis
    for stage in range(search.passes + search.refine_passes):
        refining = stage >= search.passes
        for name, (lo, hi) in _coordinate_axes(search):
            incumbent = getattr(current, name)
            if refining:
                step = (hi / lo) ** (1.0 / (n_cand - 1))
                cand_lo = max(lo, incumbent / step)
                cand_hi = min(hi, incumbent * step)
                candidates = clipped_geomspace(cand_lo, cand_hi, n_cand)
            else:
                candidates = clipped_geomspace(lo, hi, n_cand)
            for value in candidates:
                trial = replace(current, **{name: float(value)})
                score = log_marginal_likelihood(context, trial)
                if score > best_score:
                    best_score, current = score, trial
        rescaled = concentrate_scale(current)
        score = log_marginal_likelihood(context, rescaled)
        if score > best_score:
            best_score, current = score, rescaled
    if not math.isfinite(best_score):
        raise FitError("no hyperparameter candidate produced a finite evidence")
    if data_scale > 0.0:
        current = replace(
            current,
            signal_variance=current.signal_variance * data_scale**2,
            noise_variance=current.noise_variance * data_scale**2,
        )
    return current


def ensemble_to_field(samples, grid: Grid) -> GaussianField:
    """Empirical mean and per-point variance from repeated predictions.

    Accepts any iterable of equal-length prediction vectors over the grid and
    returns a diagonal-covariance field (samplewise average, unbiased
    samplewise variance).
    """
    arr = np.asarray(list(samples), dtype=float)
    if arr.ndim != 2:
        raise ShapeError("samples must be a collection of equal-length vectors")
    if arr.shape[0] < 2:
        raise InsufficientDataError("need at least two ensemble members")
    if arr.shape[1] != grid.size:
        raise ShapeError(f"samples have length {arr.shape[1]}, expected {grid.size}")
    return GaussianField(grid=grid, mean=arr.mean(axis=0), cov=arr.var(axis=0, ddof=1))
