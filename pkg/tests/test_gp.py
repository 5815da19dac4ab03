"""First-stage estimator: GP posterior properties, evidence search, ensembles."""

import math

import numpy as np
import pytest

from conserv.errors import FitError, InsufficientDataError, ShapeError
from conserv.fields import ContextSet
from conserv.gp import (
    KernelConfig,
    SearchConfig,
    ensemble_to_field,
    fit_hyperparameters,
    gp_fit_predict,
    log_marginal_likelihood,
)
from conserv.grids import Grid
from conserv.pdes import PdeInstance, eval_exact


def diffusion_context(n: int, seed: int, t_max: float = 1.0) -> ContextSet:
    p = PdeInstance.canonical("diffusion", 1.0)
    rng = np.random.default_rng(seed)
    tt = rng.uniform(0.0, t_max, n)
    xx = rng.uniform(0.0, 2.0 * math.pi, n)
    return ContextSet(
        points=np.column_stack([tt, xx]),
        values=np.asarray(eval_exact(p, tt, xx), dtype=float),
    )


def sample_from_gp(rng, config: KernelConfig, n: int) -> ContextSet:
    pts = np.column_stack([rng.uniform(0, 1, n), rng.uniform(0, 1, n)])
    dt = (pts[:, 0, None] - pts[None, :, 0]) / config.lengthscale_t
    dx = (pts[:, 1, None] - pts[None, :, 1]) / config.lengthscale_x
    k = config.signal_variance * np.exp(-0.5 * (dt**2 + dx**2))
    k += (config.noise_variance + 1e-10) * np.eye(n)
    values = np.linalg.cholesky(k) @ rng.standard_normal(n)
    return ContextSet(points=pts, values=values)


GRID = Grid.regular((0.0, 1.0), (0.0, 2.0 * math.pi), 3, 15)
KERNEL = KernelConfig(lengthscale_t=0.5, lengthscale_x=1.5, signal_variance=0.5,
                      noise_variance=1e-8)


class TestGpFitPredict:
    def test_prior_only_returns_prior(self):
        empty = ContextSet(points=np.empty((0, 2)), values=np.empty(0))
        field = gp_fit_predict(empty, GRID, KERNEL, prior_only=True)
        np.testing.assert_array_equal(field.mean, np.zeros(GRID.size))
        np.testing.assert_allclose(np.diag(field.cov), KERNEL.signal_variance, atol=1e-12)

    def test_empty_context_without_flag_rejected(self):
        empty = ContextSet(points=np.empty((0, 2)), values=np.empty(0))
        with pytest.raises(InsufficientDataError):
            gp_fit_predict(empty, GRID, KERNEL)

    def test_interpolates_a_single_noiseless_point(self):
        grid = Grid(times=[0.5], positions=[0.0, 2.0, 4.0])
        ctx = ContextSet(points=[[0.5, 2.0]], values=[1.7])
        noiseless = KernelConfig(lengthscale_t=0.5, lengthscale_x=1.5,
                                 signal_variance=0.5, noise_variance=0.0)
        field = gp_fit_predict(ctx, grid, noiseless)
        assert field.mean[1] == pytest.approx(1.7, abs=1e-8)

    def test_posterior_variance_never_exceeds_prior(self, rng):
        for _ in range(5):
            n = int(rng.integers(3, 30))
            ctx = ContextSet(
                points=np.column_stack([rng.uniform(0, 1, n), rng.uniform(0, 6, n)]),
                values=rng.standard_normal(n),
            )
            field = gp_fit_predict(ctx, GRID, KERNEL)
            assert np.all(np.diag(field.cov) <= KERNEL.signal_variance + 1e-10)

    def test_posterior_covariance_psd_over_random_contexts(self, rng):
        grid = Grid.regular((0.0, 1.0), (0.0, 2.0 * math.pi), 2, 8)
        for _ in range(100):
            n = int(rng.integers(1, 25))
            ctx = ContextSet(
                points=np.column_stack(
                    [rng.uniform(0, 1, n), rng.uniform(0, 2 * math.pi, n)]
                ),
                values=rng.standard_normal(n),
            )
            field = gp_fit_predict(ctx, grid, KERNEL)
            w = np.linalg.eigvalsh(field.cov)
            assert w.min() >= -1e-10 * max(w.max(), 1.0)

    def test_diagonal_mode_matches_full_diagonal(self):
        ctx = diffusion_context(30, seed=3)
        full = gp_fit_predict(ctx, GRID, KERNEL)
        diag = gp_fit_predict(ctx, GRID, KERNEL, diagonal=True)
        np.testing.assert_array_equal(diag.mean, full.mean)
        np.testing.assert_allclose(diag.cov, np.diag(full.cov), atol=1e-10)
        assert diag.is_diagonal

    def test_error_non_increasing_over_nested_contexts(self):
        # noise-free smooth data: adding observations never hurts the fit
        p = PdeInstance.canonical("diffusion", 1.0)
        truth = np.asarray(
            eval_exact(p, GRID.flat_points()[:, 0], GRID.flat_points()[:, 1])
        )
        full = diffusion_context(160, seed=11)
        errors = []
        for n in (20, 40, 80, 160):
            ctx = ContextSet(points=full.points[:n], values=full.values[:n])
            field = gp_fit_predict(ctx, GRID, KERNEL)
            errors.append(float(np.max(np.abs(field.mean - truth))))
        assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))


class TestFitHyperparameters:
    def test_recovers_known_lengthscale_within_factor_two(self, rng):
        true = KernelConfig(lengthscale_t=0.3, lengthscale_x=0.3,
                            signal_variance=1.0, noise_variance=1e-6)
        ctx = sample_from_gp(rng, true, 200)
        fitted = fit_hyperparameters(ctx)
        for name in ("lengthscale_t", "lengthscale_x"):
            ratio = getattr(fitted, name) / 0.3
            assert 0.5 <= ratio <= 2.0

    def test_signal_variance_scales_with_data(self, rng):
        true = KernelConfig(lengthscale_t=0.4, lengthscale_x=0.4,
                            signal_variance=1.0, noise_variance=1e-6)
        ctx = sample_from_gp(rng, true, 150)
        doubled = ContextSet(points=ctx.points, values=math.sqrt(2.0) * ctx.values)
        s1 = fit_hyperparameters(ctx).signal_variance
        s2 = fit_hyperparameters(doubled).signal_variance
        assert s2 / s1 == pytest.approx(2.0, rel=0.2)

    def test_noise_floor_on_noiseless_smooth_data(self):
        fitted = fit_hyperparameters(diffusion_context(80, seed=5))
        assert fitted.noise_variance <= 1e-3 * fitted.signal_variance

    def test_deterministic(self):
        ctx = diffusion_context(40, seed=9)
        assert fit_hyperparameters(ctx) == fit_hyperparameters(ctx)

    def test_needs_five_points(self):
        ctx = diffusion_context(4, seed=0)
        with pytest.raises(InsufficientDataError):
            fit_hyperparameters(ctx)

    def test_degenerate_context_rejected(self):
        ctx = ContextSet(points=np.tile([[0.5, 1.0]], (8, 1)), values=np.zeros(8))
        with pytest.raises(FitError):
            fit_hyperparameters(ctx)

    def test_improves_evidence_over_default(self):
        ctx = diffusion_context(60, seed=21)
        fitted = fit_hyperparameters(ctx, SearchConfig(passes=2, refine_passes=1))
        assert log_marginal_likelihood(ctx, fitted) >= log_marginal_likelihood(
            ctx, KernelConfig()
        )


class TestEnsembleToField:
    def test_identical_members_have_zero_variance(self):
        grid = Grid(times=[0.0], positions=np.arange(4.0))
        v = np.array([1.0, 2.0, 3.0, 4.0])
        field = ensemble_to_field([v, v], grid)
        np.testing.assert_array_equal(field.mean, v)
        np.testing.assert_array_equal(field.cov, np.zeros(4))

    def test_two_member_unbiased_variance_by_hand(self):
        grid = Grid(times=[0.0], positions=np.arange(3.0))
        field = ensemble_to_field([np.zeros(3), np.full(3, 2.0)], grid)
        np.testing.assert_array_equal(field.mean, np.ones(3))
        np.testing.assert_array_equal(field.cov, np.full(3, 2.0))

    def test_permutation_invariant(self, rng):
        grid = Grid(times=[0.0], positions=np.arange(5.0))
        members = [rng.standard_normal(5) for _ in range(6)]
        a = ensemble_to_field(members, grid)
        b = ensemble_to_field(members[::-1], grid)
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-15)
        np.testing.assert_allclose(a.cov, b.cov, atol=1e-15)

    def test_scale_equivariant(self, rng):
        grid = Grid(times=[0.0], positions=np.arange(5.0))
        members = [rng.standard_normal(5) for _ in range(4)]
        base = ensemble_to_field(members, grid)
        scaled = ensemble_to_field([3.0 * m for m in members], grid)
        np.testing.assert_allclose(scaled.mean, 3.0 * base.mean, atol=1e-12)
        np.testing.assert_allclose(scaled.cov, 9.0 * base.cov, atol=1e-12)

    def test_single_member_rejected(self):
        grid = Grid(times=[0.0], positions=np.arange(3.0))
        with pytest.raises(InsufficientDataError):
            ensemble_to_field([np.zeros(3)], grid)

    def test_length_mismatch_rejected(self):
        grid = Grid(times=[0.0], positions=np.arange(3.0))
        with pytest.raises(ShapeError):
            ensemble_to_field([np.zeros(4), np.zeros(4)], grid)
