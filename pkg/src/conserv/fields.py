"""Gaussian field containers: the currency passed between the estimation
step and the constraint step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .grids import Grid

__all__ = ["GaussianField", "ContextSet"]

_SYM_TOL = 1e-12


@dataclass(frozen=True)
class GaussianField:
    """Mean and covariance of a field over a grid, flattened time-major.

    ``cov`` is either a length-``N`` vector of per-point variances (diagonal
    covariance) or a full symmetric ``N x N`` matrix. Instances are treated
    as immutable; operations return new fields.
    """

    grid: Grid
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        n = self.grid.size
        if mean.shape != (n,):
            raise ShapeError(f"mean has shape {mean.shape}, expected ({n},)")
        if cov.ndim == 1:
            if cov.shape != (n,):
                raise ShapeError(f"diagonal cov has shape {cov.shape}, expected ({n},)")
        elif cov.ndim == 2:
            if cov.shape != (n, n):
                raise ShapeError(f"cov has shape {cov.shape}, expected ({n}, {n})")
            scale = max(float(np.max(np.abs(cov))), 1.0)
            if float(np.max(np.abs(cov - cov.T))) > _SYM_TOL * scale:
                raise ShapeError("full covariance is not symmetric")
        else:
            raise ShapeError("cov must be a vector of variances or a square matrix")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def is_diagonal(self) -> bool:
        return self.cov.ndim == 1

    def variances(self) -> np.ndarray:
        """Per-point variances (the covariance diagonal)."""
        return self.cov if self.is_diagonal else np.diag(self.cov).copy()

    def cov_full(self) -> np.ndarray:
        """Covariance promoted to a full matrix."""
        return np.diag(self.cov) if self.is_diagonal else self.cov

    def slice_mean(self, time_index: int) -> np.ndarray:
        return self.mean[self.grid.slice_indices(time_index)]

    def slice_variances(self, time_index: int) -> np.ndarray:
        idx = self.grid.slice_indices(time_index)
        return self.cov[idx] if self.is_diagonal else np.diag(self.cov[idx, idx]).copy()

    def slice_field(self, time_index: int) -> "GaussianField":
        """Restriction of the field to one time slice."""
        idx = self.grid.slice_indices(time_index)
        cov = self.cov[idx] if self.is_diagonal else self.cov[idx, idx]
        return GaussianField(grid=self.grid.single_time(time_index), mean=self.mean[idx], cov=cov)


@dataclass(frozen=True)
class ContextSet:
    """Scattered observations ``(t, x, u)`` feeding the estimation step."""

    points: np.ndarray
    values: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if values.shape != (points.shape[0],):
            raise ShapeError(
                f"values have shape {values.shape}, expected ({points.shape[0]},)"
            )
        if points.size and not (np.all(np.isfinite(points)) and np.all(np.isfinite(values))):
            raise ShapeError("context points and values must be finite")
        if self.noise_std < 0:
            raise ShapeError("noise_std must be nonnegative")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.points.shape[0]
