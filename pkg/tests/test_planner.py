"""Planner contracts: proxy formulas, the closed-form rule, QP, grid planning."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transfer_budget.planner import (
    FeasibilityError,
    Regime,
    TransferProblem,
    optimal_single,
    plan_transfer,
    project_capped_simplex,
    proxy_derivative,
    proxy_multi,
    proxy_value,
    regime_curve,
    solve_alpha_qp,
)


class TestProxyValue:
    def test_no_transfer_reduces_to_target_only_rate(self):
        assert proxy_value(100, 0, 0.37) == pytest.approx(0.005, abs=1e-15)
        for t in (0.0, 0.01, 5.0):
            assert proxy_value(100, 0, t) == pytest.approx(1 / 200, abs=1e-15)

    def test_single_source_arithmetic(self):
        assert proxy_value(100, 100, 0.01) == pytest.approx(0.00375, abs=1e-15)

    def test_high_dimensional_scaling(self):
        assert proxy_value(100, 0, 0.3, dim=5) == pytest.approx(0.025, abs=1e-15)
        assert proxy_value(100, 100, 0.01, dim=2) == pytest.approx(0.0075, abs=1e-15)
        assert proxy_value(250, 17, 0.04, dim=1) == pytest.approx(
            proxy_value(250, 17, 0.04, dim=7) / 7, abs=1e-15
        )

    @given(
        n0=st.integers(1, 10_000),
        n1=st.integers(0, 10_000),
        t=st.floats(0.0, 10.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_positive_and_decreasing_in_target_count(self, n0, n1, t):
        value = proxy_value(n0, n1, t)
        assert value > 0.0
        assert proxy_value(n0 + 50, n1, t) < value

    def test_derivative_is_central_difference(self):
        for n0, s, t, dim in [(100, 40, 0.01, 1), (50, 300, 0.002, 4)]:
            h = 1e-4
            numeric = (proxy_value(n0, s + h, t, dim) - proxy_value(n0, s - h, t, dim)) / (2 * h)
            assert proxy_derivative(n0, s, t, dim) == pytest.approx(numeric, rel=1e-6)


class TestOptimalSingle:
    def test_monotone_regime_takes_the_cap(self):
        plan = optimal_single(100, 1000, 0.004)
        assert plan.n_star == 1000
        assert plan.regime is Regime.MONOTONE_DECREASING

    def test_interior_regime(self):
        plan = optimal_single(100, 1000, 0.01)
        assert plan.n_star == 100
        assert plan.regime is Regime.INTERIOR_MINIMUM
        assert plan.interior == pytest.approx(100.0)

    def test_cap_binds(self):
        assert optimal_single(100, 50, 0.01).n_star == 50

    def test_boundary_belongs_to_monotone_case(self):
        plan = optimal_single(100, 500, 0.005)  # n0 * t exactly 0.5
        assert plan.regime is Regime.MONOTONE_DECREASING
        assert plan.n_star == 500

    def test_stationary_point_zeroes_the_derivative(self):
        for n0, t in [(100, 0.01), (250, 0.004), (40, 0.9)]:
            if n0 * t <= 0.5:
                continue
            interior = n0 / (2 * n0 * t - 1)
            assert abs(proxy_derivative(n0, interior, t)) < 1e-10

    def test_beats_every_integer_on_random_instances(self):
        """Brute force over every integer in [0, cap] for 200 random triples."""
        rng = np.random.default_rng(60)
        for _ in range(200):
            n0 = int(rng.integers(1, 501))
            cap = int(rng.integers(1, 2001))
            t = float(rng.uniform(0.0, 0.1))
            plan = optimal_single(n0, cap, t)
            grid = np.arange(cap + 1)
            values = proxy_value(n0, grid, t)
            best = int(np.argmin(values))  # ties resolve to the smaller quantity
            assert plan.n_star == best


class TestRegimeCurve:
    def test_monotone_curve_strictly_decreases(self):
        curve = regime_curve(100, 1000, 0.004, 101)
        assert curve.regime is Regime.MONOTONE_DECREASING
        assert (np.diff(curve.values) < 0).all()

    def test_interior_curve_dips_at_the_stationary_point(self):
        curve = regime_curve(100, 1000, 0.01, 101)
        assert curve.regime is Regime.INTERIOR_MINIMUM
        assert curve.interior == pytest.approx(100.0)
        drop = np.diff(curve.values)
        sign_changes = np.sum(np.diff(np.sign(drop)) != 0)
        assert sign_changes == 1
        assert curve.quantities[np.argmin(curve.values)] == 100

    def test_two_point_curve_is_just_the_endpoints(self):
        curve = regime_curve(100, 400, 0.01, 2)
        np.testing.assert_array_equal(curve.quantities, [0, 400])

    def test_quantities_strictly_increase(self):
        curve = regime_curve(10, 7, 0.2, 50)  # more points than integers available
        assert (np.diff(curve.quantities) > 0).all()
        assert np.isfinite(curve.values).all() and (curve.values > 0).all()


def _random_capped_instance(rng, k=3):
    a = rng.normal(size=(k, k))
    gram = a @ a.T
    gram /= np.abs(gram).max()
    caps = rng.integers(1, 2000, size=k)
    s = int(rng.integers(1, caps.sum() + 1))
    return gram, s, caps


class TestCappedSimplexProjection:
    @given(
        y=st.lists(st.floats(-5, 5), min_size=1, max_size=8),
        raw_caps=st.lists(st.floats(0.01, 3.0), min_size=1, max_size=8),
        data=st.data(),
    )
    @settings(max_examples=200, deadline=None)
    def test_feasible_output(self, y, raw_caps, data):
        k = min(len(y), len(raw_caps))
        y = np.array(y[:k])
        upper = np.array(raw_caps[:k])
        if upper.sum() < 1.0:
            upper = upper + (1.0 - upper.sum() + 0.1) / k
        x = project_capped_simplex(y, upper)
        assert abs(x.sum() - 1.0) <= 1e-12
        assert (x >= -1e-15).all()
        assert (x <= upper + 1e-12).all()

    def test_projection_is_idempotent_on_feasible_points(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            upper = rng.uniform(0.3, 1.0, size=4)
            if upper.sum() < 1:
                continue
            x = rng.dirichlet(np.ones(4))
            x = np.minimum(x, upper)
            x = x / x.sum() if x.sum() > 0 else x
            if (x > upper).any() or abs(x.sum() - 1) > 1e-12:
                continue
            np.testing.assert_allclose(project_capped_simplex(x, upper), x, atol=1e-12)

    def test_projection_is_closest_feasible_point(self):
        """No random feasible point lies closer to the query than the projection."""
        rng = np.random.default_rng(3)
        for _ in range(20):
            upper = rng.uniform(0.2, 1.0, size=5)
            if upper.sum() < 1.0:
                continue
            y = rng.normal(size=5)
            x = project_capped_simplex(y, upper)
            base = np.linalg.norm(x - y)
            for _ in range(500):
                cand = rng.dirichlet(np.ones(5))
                if (cand <= upper).all():
                    assert np.linalg.norm(cand - y) >= base - 1e-9

    def test_empty_set_rejected(self):
        with pytest.raises(FeasibilityError):
            project_capped_simplex(np.array([0.5, 0.5]), np.array([0.3, 0.3]))


class TestAlphaQP:
    def test_symmetric_instance_is_uniform(self):
        alpha = solve_alpha_qp(np.eye(3), 30, [100, 100, 100])
        np.testing.assert_allclose(alpha, 1 / 3, atol=1e-9)

    def test_unconstrained_stationarity(self):
        alpha = solve_alpha_qp(np.diag([1.0, 4.0]), 10, [100, 100])
        np.testing.assert_allclose(alpha, [0.8, 0.2], atol=1e-6)
        assert alpha @ np.diag([1.0, 4.0]) @ alpha == pytest.approx(0.8, abs=1e-9)

    def test_active_cap(self):
        alpha = solve_alpha_qp(np.diag([1.0, 4.0]), 100, [1000, 10])
        np.testing.assert_allclose(alpha, [0.9, 0.1], atol=1e-9)
        assert alpha @ np.diag([1.0, 4.0]) @ alpha == pytest.approx(0.85, abs=1e-9)

    def test_infeasible_total_rejected(self):
        with pytest.raises(FeasibilityError):
            solve_alpha_qp(np.eye(2), 300, [100, 100])

    def test_matches_brute_force_grid(self):
        """Seeded PSD instances: objective within 1e-6 of a 1e-3-resolution grid."""
        rng = np.random.default_rng(101)
        grid = np.arange(0, 1.0005, 0.001)
        a1, a2 = np.meshgrid(grid, grid, indexing="ij")
        a3 = 1.0 - a1 - a2
        keep = a3 >= -1e-12
        points = np.stack([a1[keep], a2[keep], np.maximum(a3[keep], 0.0)], axis=1)
        for _ in range(10):
            gram, s, caps = _random_capped_instance(rng)
            feasible = points[(points <= np.minimum(caps / s, 1.0) + 1e-12).all(axis=1)]
            objective = np.einsum("gi,ij,gj->g", feasible, gram, feasible)
            alpha = solve_alpha_qp(gram, s, caps)
            assert alpha @ gram @ alpha <= objective.min() + 1e-6

    def test_never_beaten_by_random_feasible_points(self):
        rng = np.random.default_rng(7)
        gram, s, caps = _random_capped_instance(rng)
        alpha = solve_alpha_qp(gram, s, caps)
        best = alpha @ gram @ alpha
        upper = np.minimum(caps / s, 1.0)
        found = 0
        while found < 100_000:
            cand = rng.dirichlet(np.ones(3), size=4096)
            cand = cand[(cand <= upper + 0.0).all(axis=1)]
            found += cand.shape[0]
            if cand.size:
                assert np.einsum("gi,ij,gj->g", cand, gram, cand).min() >= best - 1e-12

    def test_scale_invariant_argmin(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            gram, s, caps = _random_capped_instance(rng)
            a1 = solve_alpha_qp(gram, s, caps)
            a2 = solve_alpha_qp(37.5 * gram, s, caps)
            np.testing.assert_allclose(a1, a2, atol=1e-8)

    def test_feasibility_residuals(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            gram, s, caps = _random_capped_instance(rng)
            alpha = solve_alpha_qp(gram, s, caps)
            assert abs(alpha.sum() - 1.0) <= 1e-12
            assert (alpha >= -1e-15).all()
            assert (s * alpha <= caps + 1e-9 * s).all()


class TestProxyMulti:
    def _problem(self, gram=None, caps=(100, 100), n0=100, dim=1):
        gram = np.zeros((len(caps), len(caps))) if gram is None else np.asarray(gram)
        return TransferProblem(n0=n0, dim=dim, caps=list(caps), gram=gram)

    def test_zero_total_is_target_only_rate(self):
        problem = self._problem(dim=3, n0=60)
        assert proxy_multi(problem, 0, np.zeros(2)) == pytest.approx(3 / 120)

    def test_single_source_reduction(self):
        problem = self._problem(gram=[[0.04]], caps=(500,), dim=4)
        expected = proxy_value(100, 120, 0.01, dim=4)
        assert proxy_multi(problem, 120, np.array([1.0])) == pytest.approx(expected, abs=1e-15)

    def test_matches_single_proxy_example(self):
        problem = self._problem(gram=[[0.01]], caps=(200,), dim=1)
        assert proxy_multi(problem, 100, np.array([1.0])) == pytest.approx(0.00375, abs=1e-15)

    def test_infeasible_alpha_rejected(self):
        problem = self._problem(caps=(10, 100))
        with pytest.raises(FeasibilityError):
            proxy_multi(problem, 100, np.array([0.5, 0.5]))
        with pytest.raises(FeasibilityError):
            proxy_multi(problem, 50, np.array([0.9, 0.3]))


class TestPlanTransfer:
    def test_zero_gram_transfers_everything_uniformly(self):
        problem = TransferProblem(n0=100, dim=1, caps=[300, 300, 300], gram=np.zeros((3, 3)))
        plan = plan_transfer(problem)
        assert plan.s_star == 900
        np.testing.assert_array_equal(plan.n_star, [300, 300, 300])
        np.testing.assert_allclose(plan.alpha_star, 1 / 3, atol=1e-12)

    def test_single_source_matches_closed_form(self):
        rng = np.random.default_rng(44)
        for _ in range(100):
            n0 = int(rng.integers(10, 500))
            cap = int(rng.integers(1, 2000))
            t = float(rng.uniform(0.0, 0.1))
            problem = TransferProblem(n0=n0, dim=1, caps=[cap], gram=[[t]])
            plan = plan_transfer(problem)
            single = optimal_single(n0, cap, t)
            assert abs(plan.n_star[0] - single.n_star) <= cap / 1000 + 1

    def test_shifted_source_is_excluded(self):
        problem = TransferProblem(n0=100, dim=1, caps=[500, 500], gram=np.diag([0.0, 10.0]))
        plan = plan_transfer(problem)
        assert plan.n_star[1] == 0
        assert plan.n_star[0] == 500

    def test_plan_is_feasible_and_consistent(self):
        rng = np.random.default_rng(45)
        for _ in range(20):
            gram, _, caps = _random_capped_instance(rng)
            problem = TransferProblem(n0=int(rng.integers(5, 400)), dim=3,
                                      caps=caps, gram=gram * 0.05)
            plan = plan_transfer(problem)
            assert plan.n_star.sum() == plan.s_star
            assert (plan.n_star >= 0).all() and (plan.n_star <= caps).all()
            if plan.s_star > 0:
                assert plan.alpha_star.sum() == pytest.approx(1.0, abs=1e-12)
            assert plan.predicted_proxy == pytest.approx(
                proxy_multi(problem, plan.s_star, plan.alpha_star), abs=1e-15
            )
            # integerization can cost at most the proxy variation over a grid step
            assert plan.rounding_gap >= -1e-15

    def test_included_curve_tabulates_the_grid(self):
        problem = TransferProblem(n0=50, dim=2, caps=[40, 60], gram=0.02 * np.eye(2))
        plan = plan_transfer(problem, include_curve=True)
        assert plan.curve is not None
        assert plan.curve.quantities[0] == 0
        assert plan.curve.quantities[-1] == 100
        assert (np.diff(plan.curve.quantities) > 0).all()

    def test_ties_prefer_smaller_total(self):
        # a flat stretch: gram tuned so two grid points score equally is rare,
        # but s = 0 vs s = total must resolve deterministically under exact flatness
        problem = TransferProblem(n0=100, dim=1, caps=[10], gram=[[0.0]])
        plan = plan_transfer(problem)
        assert plan.s_star == 10  # strictly better than zero: variance shrinks

    def test_integerization_gap_is_bounded_by_one_grid_step(self):
        """Rounding s* alpha* to integers costs at most the proxy variation
        across the neighbouring grid totals."""
        rng = np.random.default_rng(46)
        for _ in range(20):
            gram, _, caps = _random_capped_instance(rng)
            problem = TransferProblem(n0=int(rng.integers(5, 400)), dim=3,
                                      caps=caps, gram=gram * 0.02)
            plan = plan_transfer(problem, include_curve=True)
            position = int(np.searchsorted(plan.curve.quantities, plan.s_star))
            lo = max(position - 1, 0)
            hi = min(position + 1, plan.curve.quantities.shape[0] - 1)
            neighbourhood = plan.curve.values[lo:hi + 1]
            variation = neighbourhood.max() - neighbourhood.min()
            assert -1e-15 <= plan.rounding_gap <= variation + 1e-12


class TestApportionment:
    @given(
        s=st.integers(1, 5000),
        weights=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6),
        data=st.data(),
    )
    @settings(max_examples=200, deadline=None)
    def test_integer_split_preserves_total_and_caps(self, s, weights, data):
        from transfer_budget.planner import _apportion

        weights = np.array(weights) + 1e-9
        alpha = weights / weights.sum()
        k = alpha.shape[0]
        caps = np.array(
            data.draw(st.lists(st.integers(1, 5000), min_size=k, max_size=k))
        )
        if s > caps.sum():
            return
        # feasible alpha for this total: project the proportions under the caps
        alpha = project_capped_simplex(alpha, np.minimum(caps / s, 1.0))
        n = _apportion(s, alpha, caps)
        assert n.sum() == s
        assert (n >= 0).all() and (n <= caps).all()

    def test_ties_go_to_the_lower_index(self):
        from transfer_budget.planner import _apportion

        n = _apportion(1, np.array([0.5, 0.5]), np.array([10, 10]))
        np.testing.assert_array_equal(n, [1, 0])
