"""Evaluation lattices and discrete constraint operators.

A :class:`Grid` is the ordered spatio-temporal lattice on which fields live:
``T`` time slices of ``M`` positions, flattened time-major (all positions of
``t_1`` first). The builders in this module assemble the operators that act
on such flattened vectors:

* integration stencils (left/right rectangle rules and the trapezoid rule)
  producing one total-mass row per time slice, with disjoint column support
  across slices;
* the per-slice second-difference penalty used for smoothing, together with
  the rule mapping per-point standard deviations to per-row penalty noise.

Integration builders accept non-uniform spacing; the second difference is
restricted to uniform slices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NonUniformGridError, ShapeError

__all__ = [
    "Grid",
    "LinearConstraint",
    "build_trapezoid",
    "build_left_riemann",
    "build_right_riemann",
    "build_second_difference",
    "build_smoothing_penalty",
    "penalty_row_variance",
]


@dataclass(frozen=True)
class Grid:
    """Ordered lattice of ``times x positions``, flattened time-major."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        positions = np.atleast_1d(np.asarray(self.positions, dtype=float))
        if times.ndim != 1 or positions.ndim != 1:
            raise ShapeError("times and positions must be one-dimensional")
        if times.size < 1:
            raise ShapeError("need at least one time slice")
        if positions.size < 2:
            raise ShapeError("need at least two positions per slice")
        if np.any(np.diff(times) <= 0) or np.any(np.diff(positions) <= 0):
            raise ShapeError("grid coordinates must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)

    @classmethod
    def regular(
        cls,
        t_span: tuple[float, float],
        x_span: tuple[float, float],
        n_times: int,
        n_positions: int,
    ) -> "Grid":
        if n_times == 1:
            times = np.array([t_span[1]], dtype=float)
        else:
            times = np.linspace(t_span[0], t_span[1], n_times)
        return cls(times=times, positions=np.linspace(x_span[0], x_span[1], n_positions))

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def n_positions(self) -> int:
        return self.positions.size

    @property
    def size(self) -> int:
        return self.times.size * self.positions.size

    @property
    def dx(self) -> np.ndarray:
        return np.diff(self.positions)

    @property
    def is_uniform(self) -> bool:
        dx = self.dx
        return bool(np.all(np.abs(dx - dx[0]) <= 1e-9 * abs(dx[0])))

    def slice_indices(self, time_index: int) -> slice:
        if not 0 <= time_index < self.n_times:
            raise DomainError(f"time index {time_index} outside [0, {self.n_times})")
        m = self.n_positions
        return slice(time_index * m, (time_index + 1) * m)

    def flat_points(self) -> np.ndarray:
        """All ``(t, x)`` pairs as an ``(N, 2)`` array, time-major."""
        tt = np.repeat(self.times, self.n_positions)
        xx = np.tile(self.positions, self.n_times)
        return np.column_stack([tt, xx])

    def single_time(self, time_index: int) -> "Grid":
        return Grid(times=self.times[time_index : time_index + 1], positions=self.positions)


@dataclass(frozen=True)
class LinearConstraint:
    """Linear restriction ``G u ~ b`` with noise scale ``sigma_g >= 0``.

    ``matrix`` has one row per constrained time slice and as many columns as
    the flattened field; ``sigma_g = 0`` demands exact adherence.
    """

    matrix: np.ndarray
    values: np.ndarray
    sigma_g: float = 0.0

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if matrix.ndim != 2:
            raise ShapeError("constraint matrix must be two-dimensional")
        if values.shape != (matrix.shape[0],):
            raise ShapeError(
                f"constraint values have shape {values.shape}, expected ({matrix.shape[0]},)"
            )
        if not (self.sigma_g >= 0.0):
            raise DomainError(f"sigma_g must be nonnegative, got {self.sigma_g!r}")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "values", values)

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]


def _slice_stencil(grid: Grid, kind: str) -> np.ndarray:
    dx = grid.dx
    m = grid.n_positions
    w = np.zeros(m)
    if kind == "trapezoid":
        w[0] = 0.5 * dx[0]
        w[-1] = 0.5 * dx[-1]
        w[1:-1] = 0.5 * (dx[:-1] + dx[1:])
    elif kind == "left":
        w[:-1] = dx
    elif kind == "right":
        w[1:] = dx
    else:  # pragma: no cover
        raise ValueError(kind)
    return w


def _tile_rows(grid: Grid, w: np.ndarray) -> np.ndarray:
    t, m = grid.n_times, grid.n_positions
    g = np.zeros((t, t * m))
    for i in range(t):
        g[i, i * m : (i + 1) * m] = w
    return g


def build_trapezoid(grid: Grid) -> np.ndarray:
    """Per-slice trapezoid-rule integration rows (second order on smooth data).

    Row ``i`` carries ``dx_1/2, (dx_{j-1}+dx_j)/2, ..., dx_{M-1}/2`` on the
    columns of slice ``i`` and zeros elsewhere; each row sums to the domain
    length.
    """
    return _tile_rows(grid, _slice_stencil(grid, "trapezoid"))


def build_left_riemann(grid: Grid) -> np.ndarray:
    """Per-slice left rectangle rule: weight ``dx_j`` on each left endpoint,
    zero on the last column of the slice. First-order accurate."""
    return _tile_rows(grid, _slice_stencil(grid, "left"))


def build_right_riemann(grid: Grid) -> np.ndarray:
    """Per-slice right rectangle rule: the left rule with column support
    shifted one position right."""
    return _tile_rows(grid, _slice_stencil(grid, "right"))


QUADRATURE_BUILDERS = {
    "trapezoid": build_trapezoid,
    "left_riemann": build_left_riemann,
    "right_riemann": build_right_riemann,
}


def _uniform_dx(grid: Grid) -> float:
    if not grid.is_uniform:
        raise NonUniformGridError("second-difference stencil requires uniform spacing")
    return float(grid.dx[0])


def build_second_difference(grid: Grid, time_index: int) -> np.ndarray:
    """Three-point second-difference stencil for one time slice.

    Returns the ``(M-2) x M`` banded matrix with rows ``[1, -2, 1] / dx``.
    The ``1/dx`` scaling (rather than ``1/dx^2``) is intentional: the overall
    penalty strength is absorbed into the per-row noise level anyway.
    """
    grid.slice_indices(time_index)  # validates the index
    m = grid.n_positions
    if m < 3:
        raise ShapeError("second difference needs at least three positions")
    dx = _uniform_dx(grid)
    gt = np.zeros((m - 2, m))
    rows = np.arange(m - 2)
    gt[rows, rows] = 1.0 / dx
    gt[rows, rows + 1] = -2.0 / dx
    gt[rows, rows + 2] = 1.0 / dx
    return gt


def build_smoothing_penalty(grid: Grid) -> np.ndarray:
    """Second-difference penalty for every slice, assembled block-diagonally.

    Shape ``(T * (M-2)) x (T * M)``; block ``i`` acts on slice ``i`` only.
    """
    block = build_second_difference(grid, 0)
    t, m = grid.n_times, grid.n_positions
    out = np.zeros((t * (m - 2), t * m))
    for i in range(t):
        out[i * (m - 2) : (i + 1) * (m - 2), i * m : (i + 1) * m] = block
    return out


def penalty_row_variance(sigmas, rho: float) -> np.ndarray:
    """Noise variance of each second-difference row from per-point std devs.

    For the stencil value ``u_i - 2 u_{i+1} + u_{i+2}`` with neighbour
    correlation ``rho`` (one-step correlation ``rho``, two-step ``rho^2``):

        s_i^2 + 4 s_{i+1}^2 + s_{i+2}^2
        - 4 rho (s_i s_{i+1} + s_{i+1} s_{i+2}) + 2 rho^2 s_i s_{i+2}

    Larger ``rho`` gives smaller row variance, hence a stronger penalty.
    """
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=float))
    if sigmas.ndim != 1 or sigmas.size < 3:
        raise ShapeError("need at least three per-point standard deviations")
    if np.any(sigmas < 0):
        raise DomainError("standard deviations must be nonnegative")
    if not (0.0 <= rho <= 1.0):
        raise DomainError(f"rho must lie in [0, 1], got {rho!r}")
    s0, s1, s2 = sigmas[:-2], sigmas[1:-1], sigmas[2:]
    return (
        s0**2
        + 4.0 * s1**2
        + s2**2
        - 4.0 * rho * (s0 * s1 + s1 * s2)
        + 2.0 * rho**2 * s0 * s2
    )
