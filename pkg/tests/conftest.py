"""Shared helpers: random well-posed instances and independent oracles."""

import numpy as np
import pytest

from conserv.fields import GaussianField
from conserv.grids import Grid


def random_spd(rng: np.random.Generator, n: int, floor: float = 0.5) -> np.ndarray:
    a = rng.standard_normal((n, n))
    return a @ a.T / n + floor * np.eye(n)


def dummy_grid(n_times: int, n_positions: int) -> Grid:
    return Grid(
        times=np.arange(n_times, dtype=float),
        positions=np.arange(n_positions, dtype=float),
    )


def random_instance(rng: np.random.Generator, n_times: int, n_positions: int):
    """Random PD field plus a full-row-rank constraint with a feasible truth."""
    grid = dummy_grid(n_times, n_positions)
    n = grid.size
    field = GaussianField(
        grid=grid, mean=rng.standard_normal(n), cov=random_spd(rng, n)
    )
    g = rng.standard_normal((n_times, n))
    u_true = rng.standard_normal(n)
    return field, g, g @ u_true, u_true


def _lu_solve_extended(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting in extended precision.

    LAPACK has no long-double kernels, so this is hand-rolled; fine for the
    small oracle systems used in tests.
    """
    a = a.copy()
    rhs = np.atleast_2d(rhs.T).T.copy()
    n = a.shape[0]
    for k in range(n - 1):
        pivot = k + int(np.argmax(np.abs(a[k:, k])))
        if pivot != k:
            a[[k, pivot]] = a[[pivot, k]]
            rhs[[k, pivot]] = rhs[[pivot, k]]
        factors = a[k + 1 :, k] / a[k, k]
        a[k + 1 :, k:] -= factors[:, None] * a[k, k:]
        rhs[k + 1 :] -= factors[:, None] * rhs[k]
    x = np.zeros_like(rhs)
    for k in range(n - 1, -1, -1):
        x[k] = (rhs[k] - a[k, k + 1 :] @ x[k + 1 :]) / a[k, k]
    return x


def information_form_update(mean, cov, g, b, sigma):
    """Textbook information-form update: an oracle for the stable form.

    mu~ = A^{-1} (mu + sigma^{-2} Sigma G' b),  Sigma~ = A^{-1} Sigma,
    with A = I + sigma^{-2} Sigma G' G. Requires sigma > 0. A cannot even be
    formed accurately in double precision for small sigma (that is the point
    of the stable form), so the oracle runs in extended precision; on
    x86 long double this keeps it trustworthy down to sigma ~ 1e-4.
    """
    assert sigma > 0
    ld = np.longdouble
    mean = mean.astype(ld)
    cov = (np.diag(cov) if cov.ndim == 1 else cov).astype(ld)
    g = g.astype(ld)
    b = b.astype(ld)
    n = mean.shape[0]
    tau = ld(1.0) / (ld(sigma) * ld(sigma))
    a = np.eye(n, dtype=ld) + tau * (cov @ g.T @ g)
    mean_new = _lu_solve_extended(a, mean + tau * (cov @ g.T @ b))[:, 0]
    cov_new = _lu_solve_extended(a, cov)
    return mean_new.astype(float), cov_new.astype(float)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
