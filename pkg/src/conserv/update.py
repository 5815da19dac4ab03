"""Posterior update enforcing linear constraints on a Gaussian field.

Given a field with mean ``mu`` and covariance ``Sigma`` and a constraint
``b = G u + sigma_g * eps`` (independent unit-variance noise per row), the
constrained posterior is

    mu~    = mu    - Sigma G' (sigma_g^2 I + G Sigma G')^{-1} (G mu - b)
    Sigma~ = Sigma - Sigma G' (sigma_g^2 I + G Sigma G')^{-1} G Sigma

All solves go through the small ``T x T`` system ``sigma_g^2 I + G Sigma G'``,
which stays invertible down to ``sigma_g = 0`` for full-row-rank ``G`` and
positive-definite ``Sigma``; neither ``Sigma^{-1}`` nor the information-form
matrix is ever formed. At ``sigma_g = 0`` the mean is finished with one
exactly-conditioned re-projection onto ``G u = b`` so the returned residual
is at roundoff level even when ``G Sigma G'`` is nearly singular.

The same machinery applies the second-difference smoothing penalty (zero
target value, strictly positive per-row noise) and the plain Euclidean
projection baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh, solve_triangular

from .errors import ConditioningError, DomainError, ShapeError, SolverError
from .fields import GaussianField
from .grids import Grid, LinearConstraint

__all__ = [
    "UpdateReport",
    "FactoredField",
    "apply_constraint",
    "apply_constraint_factored",
    "hard_projection",
    "apply_diffusion_smoothing",
    "posterior_sample",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UpdateReport:
    """Diagnostics of one constrained update."""

    residual_in: np.ndarray
    residual_out: np.ndarray
    sigma_g: float | None
    condition_estimate: float
    jitter: float = 0.0

    @property
    def residual_in_norm(self) -> float:
        return float(np.linalg.norm(self.residual_in))

    @property
    def residual_out_norm(self) -> float:
        return float(np.linalg.norm(self.residual_out))


def _factor_spd(s: np.ndarray, *, what: str):
    """Cholesky with escalating trace-scaled jitter; returns (factor, jitter)."""
    base = float(np.trace(s)) / max(s.shape[0], 1)
    if base <= 0.0:
        base = 1.0
    jitter = 0.0
    for _ in range(9):
        try:
            c = cho_factor(s + jitter * np.eye(s.shape[0]), lower=True)
            if jitter > 0.0:
                log.debug("%s: factored after adding jitter %.3e", what, jitter)
            return c, jitter
        except LinAlgError:
            jitter = 1e-14 * base if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-6 * base:
                break
    raise SolverError(
        f"{what}: matrix is not positive definite even after jitter "
        f"(likely rank-deficient constraint rows or an indefinite covariance)"
    )


def _gaussian_update(mean, cov, g, b, noise_var):
    """Shared mean/covariance update for row-noise vector ``noise_var``."""
    n = mean.shape[0]
    if g.ndim != 2 or g.shape[1] != n:
        raise ShapeError(f"constraint matrix has shape {g.shape}, expected (*, {n})")
    if cov.ndim == 1:
        sigma_gt = g.T * cov[:, None]
    else:
        sigma_gt = cov @ g.T
    s = g @ sigma_gt
    s = 0.5 * (s + s.T)
    s_noise = s + np.diag(noise_var)
    factor, jitter = _factor_spd(s_noise, what="constraint system")
    resid_in = g @ mean - b
    mean_new = mean - sigma_gt @ cho_solve(factor, resid_in)
    cov_full = np.diag(cov) if cov.ndim == 1 else cov
    cov_new = cov_full - sigma_gt @ cho_solve(factor, sigma_gt.T)
    cov_new = 0.5 * (cov_new + cov_new.T)
    cond = float(np.linalg.cond(s_noise))
    return mean_new, cov_new, resid_in, cond, jitter


def _reproject_exact(mean, g, b):
    """Euclidean correction onto ``G u = b``; well-conditioned because it
    solves against ``G G'`` (diagonal for disjoint-support quadrature rows)."""
    gg = g @ g.T
    factor, _ = _factor_spd(gg, what="re-projection system")
    return mean - g.T @ cho_solve(factor, g @ mean - b)


def apply_constraint(
    field: GaussianField, constraint: LinearConstraint
) -> tuple[GaussianField, UpdateReport]:
    """Condition a Gaussian field on ``b = G u + sigma_g * eps``.

    ``sigma_g = 0`` is allowed and produces the limiting solution whose mean
    minimizes ``||y - mu||_{Sigma^{-1}}`` subject to ``G y = b``; in that case
    the output residual is driven to roundoff level.
    """
    g, b = constraint.matrix, constraint.values
    sigma = float(constraint.sigma_g)
    noise = np.full(g.shape[0], sigma**2)
    mean_new, cov_new, resid_in, cond, jitter = _gaussian_update(
        field.mean, field.cov, g, b, noise
    )
    if sigma == 0.0:
        mean_new = _reproject_exact(mean_new, g, b)
    report = UpdateReport(
        residual_in=resid_in,
        residual_out=g @ mean_new - b,
        sigma_g=sigma,
        condition_estimate=cond,
        jitter=jitter,
    )
    out = GaussianField(grid=field.grid, mean=mean_new, cov=cov_new)
    return out, report


@dataclass(frozen=True)
class FactoredField:
    """Constrained field held in downdate form: ``cov = base - W' W``.

    ``W`` has one row per constraint, so memory stays linear in the grid
    size; per-slice means, variances, and covariance blocks materialize on
    demand. This is what makes benchmark-scale grids (tens of thousands of
    points) tractable, where the explicit updated covariance would not fit
    in memory.
    """

    grid: Grid
    mean: np.ndarray
    base_cov: np.ndarray
    downdate: np.ndarray

    def variances(self) -> np.ndarray:
        base = self.base_cov if self.base_cov.ndim == 1 else np.diag(self.base_cov)
        return base - np.einsum("ij,ij->j", self.downdate, self.downdate)

    def slice_mean(self, time_index: int) -> np.ndarray:
        return self.mean[self.grid.slice_indices(time_index)]

    def slice_variances(self, time_index: int) -> np.ndarray:
        idx = self.grid.slice_indices(time_index)
        w = self.downdate[:, idx]
        base = (
            self.base_cov[idx]
            if self.base_cov.ndim == 1
            else np.diag(self.base_cov[idx, idx])
        )
        return base - np.einsum("ij,ij->j", w, w)

    def slice_field(self, time_index: int) -> GaussianField:
        idx = self.grid.slice_indices(time_index)
        w = self.downdate[:, idx]
        base = (
            np.diag(self.base_cov[idx])
            if self.base_cov.ndim == 1
            else self.base_cov[idx, idx]
        )
        block = base - w.T @ w
        block = 0.5 * (block + block.T)
        return GaussianField(
            grid=self.grid.single_time(time_index), mean=self.mean[idx], cov=block
        )


def apply_constraint_factored(
    field: GaussianField, constraint: LinearConstraint
) -> tuple[FactoredField, UpdateReport]:
    """:func:`apply_constraint` without materializing the updated covariance.

    Same mean and the same covariance values (``cov~ = cov - W' W`` with
    ``W = L^{-1} (cov G')'`` from the Cholesky factor of the constraint
    system), returned in factored form.
    """
    g, b = constraint.matrix, constraint.values
    sigma = float(constraint.sigma_g)
    mean = field.mean
    cov = field.cov
    if g.ndim != 2 or g.shape[1] != mean.shape[0]:
        raise ShapeError(f"constraint matrix has shape {g.shape}, expected (*, {mean.shape[0]})")
    sigma_gt = g.T * cov[:, None] if cov.ndim == 1 else cov @ g.T
    s = g @ sigma_gt
    s = 0.5 * (s + s.T)
    s_noise = s + sigma**2 * np.eye(g.shape[0])
    factor, jitter = _factor_spd(s_noise, what="constraint system")
    resid_in = g @ mean - b
    mean_new = mean - sigma_gt @ cho_solve(factor, resid_in)
    if sigma == 0.0:
        mean_new = _reproject_exact(mean_new, g, b)
    downdate = solve_triangular(factor[0], sigma_gt.T, lower=factor[1])
    report = UpdateReport(
        residual_in=resid_in,
        residual_out=g @ mean_new - b,
        sigma_g=sigma,
        condition_estimate=float(np.linalg.cond(s_noise)),
        jitter=jitter,
    )
    return FactoredField(grid=field.grid, mean=mean_new, base_cov=cov, downdate=downdate), report


def hard_projection(mean: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean projection of a mean vector onto ``{u : G u = b}``.

    Equals the ``sigma_g = 0`` constrained mean when the covariance is the
    identity; used as the constant-variance baseline.
    """
    mean = np.asarray(mean, dtype=float)
    g = np.asarray(g, dtype=float)
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if g.shape[1] != mean.shape[0] or b.shape != (g.shape[0],):
        raise ShapeError("inconsistent projection shapes")
    return _reproject_exact(mean, g, b)


def apply_diffusion_smoothing(
    field: GaussianField, gtilde: np.ndarray, row_variances
) -> tuple[GaussianField, UpdateReport]:
    """Shrink second differences of the field toward zero.

    Same update as :func:`apply_constraint` with target value zero and an
    independent noise variance per penalty row. Zero row variance is refused:
    it would force the field all the way to a straight line per slice.
    """
    gtilde = np.asarray(gtilde, dtype=float)
    row_variances = np.atleast_1d(np.asarray(row_variances, dtype=float))
    if row_variances.shape != (gtilde.shape[0],):
        raise ShapeError(
            f"row variances have shape {row_variances.shape}, expected ({gtilde.shape[0]},)"
        )
    if np.any(row_variances <= 0.0):
        raise DomainError("smoothing row variances must be strictly positive")
    b = np.zeros(gtilde.shape[0])
    mean_new, cov_new, resid_in, cond, jitter = _gaussian_update(
        field.mean, field.cov, gtilde, b, row_variances
    )
    report = UpdateReport(
        residual_in=resid_in,
        residual_out=gtilde @ mean_new,
        sigma_g=None,
        condition_estimate=cond,
        jitter=jitter,
    )
    return GaussianField(grid=field.grid, mean=mean_new, cov=cov_new), report


def posterior_sample(field: GaussianField, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` fields from ``N(mean, cov)``; returns an ``(n, N)`` array.

    Full covariances are factored by symmetric eigendecomposition with
    negative eigenvalues clipped at zero plus trace-scaled jitter, so fields
    that are PSD only up to roundoff still sample. Deterministic per seed.
    """
    if n < 1:
        raise DomainError("need at least one sample")
    rng = np.random.default_rng(seed)
    size = field.grid.size
    z = rng.standard_normal((n, size))
    if field.is_diagonal:
        scale = np.sqrt(np.maximum(field.cov, 0.0))
        return field.mean[None, :] + z * scale[None, :]
    try:
        w, v = eigh(field.cov)
    except LinAlgError as exc:  # pragma: no cover
        raise ConditioningError(f"covariance eigendecomposition failed: {exc}") from exc
    jitter = 1e-12 * max(float(np.trace(field.cov)), 0.0) / size
    w = np.maximum(w, 0.0) + jitter
    factor = v * np.sqrt(w)[None, :]
    return field.mean[None, :] + z @ factor.T
