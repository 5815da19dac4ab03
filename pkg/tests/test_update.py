"""Constrained update: limiting behavior, equivalences, smoothing, sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import information_form_update, random_instance
from conserv.errors import DomainError, ShapeError
from conserv.fields import GaussianField
from conserv.grids import Grid, LinearConstraint, build_smoothing_penalty, build_trapezoid
from conserv.trace import kkt_constrained_mean
from conserv.update import (
    apply_constraint,
    apply_constraint_factored,
    apply_diffusion_smoothing,
    hard_projection,
    posterior_sample,
)


def two_point_field():
    grid = Grid(times=[0.0], positions=[0.0, 1.0])
    return GaussianField(grid=grid, mean=np.zeros(2), cov=np.eye(2))


class TestApplyConstraint:
    def test_least_norm_solution_by_hand(self):
        # project (0,0) onto y1 + y2 = 1 with identity covariance
        out, report = apply_constraint(
            two_point_field(), LinearConstraint(np.ones((1, 2)), [1.0], 0.0)
        )
        np.testing.assert_allclose(out.mean, [0.5, 0.5], atol=1e-14)
        assert report.residual_out_norm <= 1e-12

    def test_feasible_mean_is_fixed_point(self, rng):
        field, g, b, _ = random_instance(rng, 2, 6)
        feasible = kkt_constrained_mean(field.mean, field.cov, g, b)
        field = GaussianField(grid=field.grid, mean=feasible, cov=field.cov)
        out, report = apply_constraint(field, LinearConstraint(g, b, 0.0))
        np.testing.assert_allclose(out.mean, feasible, atol=1e-10)
        assert report.residual_in_norm <= 1e-8
        # covariance still shrinks along the constrained directions
        shrink = np.diag(field.cov_full()) - np.diag(out.cov)
        assert np.max(shrink) > 1e-3
        assert np.min(shrink) >= -1e-12

    def test_residual_never_grows(self, rng):
        for sigma in (0.0, 1e-3, 0.5, 10.0):
            field, g, b, _ = random_instance(rng, 3, 5)
            _, report = apply_constraint(field, LinearConstraint(g, b, sigma))
            assert report.residual_out_norm <= report.residual_in_norm + 1e-12

    def test_zero_noise_residual_at_roundoff(self, rng):
        field, g, b, _ = random_instance(rng, 3, 8)
        _, report = apply_constraint(field, LinearConstraint(g, b, 0.0))
        assert report.residual_out_norm <= 1e-10 * (1.0 + np.linalg.norm(b))

    def test_matches_information_form(self, rng):
        # stable (Schur) form vs the textbook information form
        for sigma in (1e-2, 1e-4):
            for _ in range(10):
                field, g, b, _ = random_instance(rng, 2, 8)
                out, _ = apply_constraint(field, LinearConstraint(g, b, sigma))
                mean_ref, cov_ref = information_form_update(
                    field.mean, field.cov, g, b, sigma
                )
                scale_m = 1.0 + np.linalg.norm(mean_ref)
                scale_c = 1.0 + np.linalg.norm(cov_ref)
                assert np.linalg.norm(out.mean - mean_ref) <= 1e-8 * scale_m
                assert np.linalg.norm(out.cov - cov_ref) <= 1e-8 * scale_c

    def test_matches_kkt_oracle_at_zero_noise(self, rng):
        for _ in range(10):
            field, g, b, _ = random_instance(rng, 3, 7)
            out, _ = apply_constraint(field, LinearConstraint(g, b, 0.0))
            oracle = kkt_constrained_mean(field.mean, field.cov, g, b)
            assert np.linalg.norm(out.mean - oracle) <= 1e-8 * (1 + np.linalg.norm(oracle))

    def test_identity_covariance_reduces_to_projection(self, rng):
        n = 10
        grid = Grid(times=[0.0], positions=np.arange(n, dtype=float))
        g = rng.standard_normal((2, n))
        b = rng.standard_normal(2)
        field = GaussianField(grid=grid, mean=rng.standard_normal(n), cov=np.eye(n))
        out, _ = apply_constraint(field, LinearConstraint(g, b, 0.0))
        np.testing.assert_allclose(
            out.mean, hard_projection(field.mean, g, b), atol=1e-10
        )

    def test_diagonal_covariance_fast_path_matches_full(self, rng):
        grid = Grid(times=[0.0, 1.0], positions=np.arange(4.0))
        var = rng.uniform(0.2, 2.0, 8)
        mean = rng.standard_normal(8)
        g = rng.standard_normal((2, 8))
        b = rng.standard_normal(2)
        diag_field = GaussianField(grid=grid, mean=mean, cov=var)
        full_field = GaussianField(grid=grid, mean=mean, cov=np.diag(var))
        for sigma in (0.0, 1e-2):
            out_d, _ = apply_constraint(diag_field, LinearConstraint(g, b, sigma))
            out_f, _ = apply_constraint(full_field, LinearConstraint(g, b, sigma))
            np.testing.assert_allclose(out_d.mean, out_f.mean, atol=1e-12)
            np.testing.assert_allclose(out_d.cov, out_f.cov, atol=1e-12)

    def test_variance_never_increases(self, rng):
        for sigma in (0.0, 1e-2, 1.0):
            field, g, b, _ = random_instance(rng, 2, 10)
            out, _ = apply_constraint(field, LinearConstraint(g, b, sigma))
            assert np.all(np.diag(out.cov) <= field.variances() + 1e-12)

    def test_output_covariance_symmetric_psd(self, rng):
        field, g, b, _ = random_instance(rng, 3, 6)
        out, _ = apply_constraint(field, LinearConstraint(g, b, 0.0))
        np.testing.assert_allclose(out.cov, out.cov.T, atol=1e-12)
        w = np.linalg.eigvalsh(out.cov)
        assert w.min() >= -1e-10 * max(w.max(), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), sigma=st.floats(0.0, 10.0))
    def test_contraction_properties_hold_for_any_noise(self, seed, sigma):
        field, g, b, _ = random_instance(np.random.default_rng(seed), 2, 5)
        out, report = apply_constraint(field, LinearConstraint(g, b, sigma))
        assert report.residual_out_norm <= report.residual_in_norm + 1e-12
        assert np.all(np.diag(out.cov) <= field.variances() + 1e-12)


class TestFactoredConstraint:
    """The downdate form must agree with the materialized update exactly."""

    @pytest.mark.parametrize("sigma", [0.0, 1e-3, 0.7])
    def test_matches_full_update(self, rng, sigma):
        for cov_kind in ("diag", "full"):
            field, g, b, _ = random_instance(rng, 3, 6)
            if cov_kind == "diag":
                field = GaussianField(
                    grid=field.grid, mean=field.mean, cov=np.diag(field.cov).copy()
                )
            full, rep_full = apply_constraint(field, LinearConstraint(g, b, sigma))
            fact, rep_fact = apply_constraint_factored(
                field, LinearConstraint(g, b, sigma)
            )
            np.testing.assert_allclose(fact.mean, full.mean, atol=1e-13)
            np.testing.assert_allclose(fact.variances(), np.diag(full.cov), atol=1e-10)
            assert rep_fact.residual_out_norm == pytest.approx(
                rep_full.residual_out_norm, abs=1e-12
            )
            for ti in range(field.grid.n_times):
                block = fact.slice_field(ti)
                np.testing.assert_allclose(
                    block.cov, full.slice_field(ti).cov_full(), atol=1e-10
                )
                np.testing.assert_allclose(
                    fact.slice_variances(ti), full.slice_variances(ti), atol=1e-10
                )

    def test_memory_stays_linear_in_grid_size(self, rng):
        # a grid this size would need ~0.5 GB for the explicit covariance
        grid = Grid(times=np.arange(4.0), positions=np.arange(2000.0))
        n = grid.size
        field = GaussianField(
            grid=grid, mean=rng.standard_normal(n), cov=rng.uniform(0.5, 1.5, n)
        )
        g = np.zeros((4, n))
        for i in range(4):
            g[i, i * 2000 : (i + 1) * 2000] = 1.0 / 2000
        out, report = apply_constraint_factored(
            field, LinearConstraint(g, np.zeros(4), 0.0)
        )
        assert out.downdate.shape == (4, n)
        assert report.residual_out_norm <= 1e-12
        assert out.slice_field(2).cov.shape == (2000, 2000)


class TestInformationMatrixAction:
    """Action of A = I + sigma^{-2} Sigma G' G on and off the null space."""

    def test_identity_on_null_space(self, rng):
        field, g, _, _ = random_instance(rng, 2, 8)
        sigma = 1e-2
        a = np.eye(field.grid.size) + field.cov_full() @ g.T @ g / sigma**2
        null_basis = np.linalg.svd(g)[2][2:].T  # columns span ker G
        for k in range(null_basis.shape[1]):
            v = null_basis[:, k]
            np.testing.assert_allclose(a @ v, v, atol=1e-10)

    def test_never_contracts_off_null_space_with_identity_covariance(self, rng):
        n = 12
        g = rng.standard_normal((3, n))
        sigma = 0.5
        a = np.eye(n) + g.T @ g / sigma**2
        row_basis = np.linalg.svd(g)[2][:3].T  # orthogonal complement of ker G
        for k in range(3):
            v = row_basis[:, k]
            assert np.linalg.norm(a @ v) >= np.linalg.norm(v)


class TestHardProjection:
    def test_feasible_point_unchanged(self, rng):
        g = rng.standard_normal((2, 6))
        y = rng.standard_normal(6)
        b = g @ y
        np.testing.assert_allclose(hard_projection(y, g, b), y, atol=1e-12)

    def test_projection_by_hand(self):
        np.testing.assert_allclose(
            hard_projection(np.zeros(2), np.ones((1, 2)), [1.0]), [0.5, 0.5], atol=1e-14
        )

    def test_idempotent(self, rng):
        g = rng.standard_normal((3, 9))
        b = rng.standard_normal(3)
        once = hard_projection(rng.standard_normal(9), g, b)
        twice = hard_projection(once, g, b)
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_constraint_satisfied(self, rng):
        g = rng.standard_normal((3, 9))
        b = rng.standard_normal(3)
        out = hard_projection(rng.standard_normal(9), g, b)
        np.testing.assert_allclose(g @ out, b, atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hard_projection(np.zeros(3), np.ones((1, 2)), [1.0])


class TestDiffusionSmoothing:
    def test_affine_mean_unchanged(self):
        grid = Grid.regular((0, 1), (0, 1), 1, 9)
        field = GaussianField(
            grid=grid, mean=3.0 * grid.positions + 1.0, cov=np.eye(9)
        )
        gt = build_smoothing_penalty(grid)
        out, report = apply_diffusion_smoothing(field, gt, np.full(gt.shape[0], 0.5))
        np.testing.assert_allclose(out.mean, field.mean, atol=1e-12)
        assert report.residual_in_norm <= 1e-12

    def test_penalty_energy_shrinks(self, rng):
        grid = Grid.regular((0, 1), (0, 1), 2, 12)
        field = GaussianField(
            grid=grid,
            mean=rng.standard_normal(24),
            cov=np.diag(rng.uniform(0.5, 1.5, 24)),
        )
        gt = build_smoothing_penalty(grid)
        out, _ = apply_diffusion_smoothing(field, gt, np.full(gt.shape[0], 0.3))
        assert np.linalg.norm(gt @ out.mean) <= np.linalg.norm(gt @ field.mean)

    def test_huge_row_variance_disables_the_penalty(self, rng):
        grid = Grid.regular((0, 1), (0, 1), 1, 8)
        field = GaussianField(grid=grid, mean=rng.standard_normal(8), cov=np.eye(8))
        gt = build_smoothing_penalty(grid)
        out, _ = apply_diffusion_smoothing(field, gt, np.full(gt.shape[0], 1e14))
        np.testing.assert_allclose(out.mean, field.mean, atol=1e-9)

    def test_zero_row_variance_rejected(self):
        grid = Grid.regular((0, 1), (0, 1), 1, 5)
        field = GaussianField(grid=grid, mean=np.zeros(5), cov=np.eye(5))
        gt = build_smoothing_penalty(grid)
        with pytest.raises(DomainError):
            apply_diffusion_smoothing(field, gt, np.zeros(gt.shape[0]))

    def test_preserves_exact_conservation(self, rng):
        # once mass is pinned exactly, smoothing moves mean only within ker G
        grid = Grid.regular((0, 1), (0, 1), 2, 9)
        g = build_trapezoid(grid)
        b = np.array([0.3, 0.4])
        field = GaussianField(
            grid=grid,
            mean=rng.standard_normal(18),
            cov=np.diag(rng.uniform(0.1, 1.0, 18)),
        )
        conserving, _ = apply_constraint(field, LinearConstraint(g, b, 0.0))
        gt = build_smoothing_penalty(grid)
        smoothed, _ = apply_diffusion_smoothing(conserving, gt, np.full(gt.shape[0], 0.2))
        np.testing.assert_allclose(g @ smoothed.mean, b, atol=1e-9)


class TestPosteriorSample:
    def test_degenerate_covariance_returns_mean(self):
        grid = Grid(times=[0.0], positions=np.arange(4.0))
        mean = np.array([1.0, -2.0, 3.0, 0.5])
        for cov in (np.zeros(4), np.zeros((4, 4))):
            field = GaussianField(grid=grid, mean=mean, cov=cov)
            samples = posterior_sample(field, 5, seed=1)
            np.testing.assert_array_equal(samples, np.tile(mean, (5, 1)))

    def test_same_seed_reproduces(self, rng):
        field, _, _, _ = random_instance(rng, 2, 5)
        a = posterior_sample(field, 7, seed=123)
        b = posterior_sample(field, 7, seed=123)
        np.testing.assert_array_equal(a, b)
        c = posterior_sample(field, 7, seed=124)
        assert not np.array_equal(a, c)

    def test_sample_mean_within_monte_carlo_error(self, rng):
        field, _, _, _ = random_instance(rng, 1, 6)
        n = 100_000
        samples = posterior_sample(field, n, seed=7)
        std = np.sqrt(field.variances())
        np.testing.assert_array_less(
            np.abs(samples.mean(axis=0) - field.mean), 4.0 * std / np.sqrt(n) + 1e-12
        )

    def test_sample_count_validated(self):
        field = two_point_field()
        with pytest.raises(DomainError):
            posterior_sample(field, 0, seed=0)
