"""Small-noise convergence checks: monotone traces and the KKT cross-check."""

import numpy as np
import pytest

from conftest import random_instance
from conserv.errors import DomainError, MonotonicityError
from conserv.fields import GaussianField
from conserv.grids import LinearConstraint
from conserv.trace import (
    convergence_trace,
    default_sigma_schedule,
    kkt_constrained_mean,
    run_convergence_suite,
)
from conserv.update import apply_constraint

SIGMAS = default_sigma_schedule()


class TestConvergenceTrace:
    def test_random_instances_pass_all_checks(self, rng):
        for _ in range(10):
            field, g, b, u = random_instance(rng, 3, 8)
            trace = convergence_trace(field, g, b, u, SIGMAS)
            assert trace.all_passed
            assert trace.truth_feasible

    def test_feasible_mean_is_a_fixed_point_of_the_whole_trace(self, rng):
        field, g, b, u = random_instance(rng, 2, 6)
        feasible = kkt_constrained_mean(field.mean, field.cov, g, b)
        pinned = GaussianField(grid=field.grid, mean=feasible, cov=field.cov)
        trace = convergence_trace(pinned, g, b, feasible, SIGMAS)
        np.testing.assert_allclose(trace.dist_to_limit, 0.0, atol=1e-7)
        np.testing.assert_allclose(trace.residual_norm, 0.0, atol=1e-9)
        np.testing.assert_allclose(trace.dist_to_truth, 0.0, atol=1e-7)

    def test_limit_matches_kkt_oracle(self, rng):
        field, g, b, u = random_instance(rng, 3, 10)
        trace = convergence_trace(field, g, b, u, SIGMAS)
        assert trace.kkt_relative_error <= 1e-8

    def test_monotone_values_decrease_towards_zero(self, rng):
        field, g, b, u = random_instance(rng, 2, 9)
        trace = convergence_trace(field, g, b, u, SIGMAS)
        assert np.all(np.diff(trace.dist_to_limit) <= 1e-10)
        assert np.all(np.diff(trace.residual_norm) <= 1e-10)
        assert trace.dist_to_limit[-1] <= 1e-8
        assert trace.residual_norm[-1] <= 1e-8

    def test_truth_distance_decreases_to_limit_distance(self, rng):
        field, g, b, u = random_instance(rng, 2, 7)
        trace = convergence_trace(field, g, b, u, SIGMAS)
        assert np.all(np.diff(trace.dist_to_truth) <= 1e-10)
        assert trace.dist_to_truth[-1] >= trace.limit_dist_to_truth - 1e-10
        assert trace.dist_to_truth[-1] <= trace.limit_dist_to_truth + 1e-8

    def test_ll_improves_over_unconstrained(self, rng):
        field, g, b, u = random_instance(rng, 2, 7)
        trace = convergence_trace(field, g, b, u, SIGMAS)
        assert trace.log_likelihood[-1] >= trace.ll_unconstrained - 1e-10
        assert trace.ll_crossover_sigma is not None

    def test_infeasible_truth_skips_conditional_checks(self, rng):
        field, g, b, u = random_instance(rng, 2, 6)
        trace = convergence_trace(field, g, b + 1.0, u, SIGMAS, strict=False)
        assert not trace.truth_feasible
        assert trace.dist_to_truth is None
        assert "truth_monotone" not in trace.checks
        # unconditional parts still verified
        assert trace.checks["limit_monotone"]["passed"]
        assert trace.checks["residual_monotone"]["passed"]

    def test_pythagorean_split_of_truth_distance(self, rng):
        # distance to truth splits exactly into limit offset plus truth offset
        field, g, b, u = random_instance(rng, 2, 8)
        trace = convergence_trace(field, g, b, u, SIGMAS)
        lhs = trace.dist_to_truth**2
        rhs = trace.dist_to_limit**2 + trace.limit_dist_to_truth**2
        np.testing.assert_allclose(lhs, rhs, rtol=1e-8)

    def test_residual_matches_contraction_formula(self, rng):
        # per-noise residual equals (I - S (sigma^2 I + S)^{-1}) r0 with
        # S = G Sigma G'
        field, g, b, _ = random_instance(rng, 3, 6)
        sigma = 0.37
        out, report = apply_constraint(field, LinearConstraint(g, b, sigma))
        s = g @ field.cov_full() @ g.T
        r0 = g @ field.mean - b
        expected = (np.eye(3) - s @ np.linalg.inv(sigma**2 * np.eye(3) + s)) @ r0
        np.testing.assert_allclose(g @ out.mean - b, expected, atol=1e-9)

    def test_schedule_validation(self, rng):
        field, g, b, u = random_instance(rng, 2, 6)
        with pytest.raises(DomainError):
            convergence_trace(field, g, b, u, [1.0, 0.1, 0.01])  # missing zero
        with pytest.raises(DomainError):
            convergence_trace(field, g, b, u, [0.1, 1.0, 0.0])  # not decreasing

    def test_strict_mode_raises_on_violation(self, rng):
        field, g, b, u = random_instance(rng, 2, 6)
        with pytest.raises(MonotonicityError):
            # an impossible tolerance forces the limit check to fail
            convergence_trace(field, g, b, u, SIGMAS, limit_tol=1e-300)

    def test_indefinite_covariance_surfaces_conditioning_error(self):
        from conserv.errors import ConditioningError
        from conserv.grids import Grid

        grid = Grid(times=[0.0], positions=np.arange(4.0))
        field = GaussianField(
            grid=grid, mean=np.zeros(4), cov=np.diag([1.0, 1.0, 1.0, -5.0])
        )
        with pytest.raises(ConditioningError):
            convergence_trace(field, np.ones((1, 4)), np.ones(1), None, SIGMAS)


class TestSuite:
    def test_small_suite_passes(self):
        report = run_convergence_suite(n_instances=5, seed=1, include_gp_instance=False)
        assert report.all_passed
        assert report.parts["limit_is_kkt"]["n_checked"] == 5

    def test_gp_instance_included(self):
        report = run_convergence_suite(n_instances=1, seed=2, include_gp_instance=True)
        assert report.gp_instance_included
        assert report.parts["limit_monotone"]["n_checked"] == 2
        assert report.all_passed
