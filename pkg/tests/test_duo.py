"""Joint two-unit solver: ordering, inner sweeps, reductions, invariances."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from duostore.core import (
    CostModel,
    InvalidInstanceError,
    ProblemInstance,
    StorageUnit,
    total_cost,
)
from duostore.duo import (
    inner_solve_unit2,
    near_separable_compare,
    order_units,
    reduce_equal_ratio,
    solve_two,
    state_match_check,
)
from duostore.scalar import EnlargedParam, xhat_pair
from duostore.stage import Boundary, solve_single
from duostore.verify import compare, oracle_dp, oracle_dp_single


def make_instance(prices, lam, u1, u2, s0=(0.0, 0.0), sT=None):
    if sT is None:
        sT = s0
    return ProblemInstance(
        unit1=StorageUnit(*u1),
        unit2=StorageUnit(*u2),
        costs=CostModel.quadratic(np.asarray(prices, dtype=float), lam),
        initial_levels=s0,
        final_levels=sT,
    )


def random_instance(rng, tmax=20, lam_frac=(0.05, 0.5)):
    T = int(rng.integers(2, tmax + 1))
    P1 = float(rng.uniform(0.5, 5.0))
    P2 = float(rng.uniform(0.5, 5.0))
    r1 = float(rng.uniform(1.2, 10.0))
    r2 = float(rng.uniform(1.2, 10.0))
    while abs(r1 - r2) < 1e-2:
        r2 = float(rng.uniform(1.2, 10.0))
    lam = 0.4 / (P1 + P2) * float(rng.uniform(*lam_frac))
    prices = rng.uniform(10.0, 100.0, T)
    return make_instance(prices, lam, (r1 * P1, P1), (r2 * P2, P2))


class TestOrderUnits:
    def test_station_pair_orders_by_duration(self):
        slow = StorageUnit(7000.0, 500.0)
        fast = StorageUnit(9000.0, 2000.0)
        order = order_units(slow, fast)
        assert order.unit1 is slow
        assert not order.swapped
        assert not order.equal_ratio
        flipped = order_units(fast, slow)
        assert flipped.unit1 is slow
        assert flipped.swapped

    def test_equal_ratios_are_flagged(self):
        order = order_units(StorageUnit(10.0, 1.0), StorageUnit(20.0, 2.0))
        assert order.equal_ratio

    def test_mixed_sizes(self):
        order = order_units(StorageUnit(4.0, 2.0), StorageUnit(9.0, 3.0))
        assert order.unit1.capacity_E == 9.0
        assert order.swapped


class TestInnerSolve:
    def test_extreme_reward_saturates_the_pinned_unit(self):
        """A pinned multiplier above every marginal cost makes the induced
        unit-1 increments buy at full rate regardless of unit 2."""
        rng = np.random.default_rng(3)
        inst = make_instance(rng.uniform(10.0, 100.0, 10), 1e-3, (8.0, 2.0), (3.0, 1.0))
        inner = inner_solve_unit2(inst, 1e6)
        assert_allclose(inner.x1_induced, np.full(10, 2.0), atol=1e-12)
        inner_dn = inner_solve_unit2(inst, -1e6)
        assert_allclose(inner_dn.x1_induced, np.full(10, -2.0), atol=1e-12)

    def test_unit2_path_is_feasible_and_telescopes(self):
        rng = np.random.default_rng(5)
        inst = make_instance(rng.uniform(10.0, 100.0, 14), 2e-3, (8.0, 2.0), (3.0, 1.0))
        inner = inner_solve_unit2(inst, 55.0)
        tol = inst.tol()
        assert inner.levels2[0] == inst.initial_levels[1]
        assert abs(inner.levels2[-1] - inst.final_levels[1]) <= 4 * tol.eps_S
        assert np.all(inner.levels2 >= -tol.eps_S)
        assert np.all(inner.levels2 <= inst.unit2.capacity_E + tol.eps_S)
        assert_allclose(np.diff(inner.levels2), inner.x2, atol=1e-12)
        assert np.all(np.abs(inner.x1_induced) <= inst.unit1.rate_P + 1e-12)

    def test_matches_reduced_cost_dp(self):
        """Proves: the inner sweep solves the one-unit problem whose per-step
        cost is the pair cost partially minimized over the pinned unit.

        The check prices unit 2's moves by G(t, x2) = min over x1 of
        C_t(x1 + x2) - mu1 * x1 and compares against a grid DP on that
        reduced cost, two-sided within the discretization band.
        """
        rng = np.random.default_rng(11)
        for _ in range(6):
            T = int(rng.integers(4, 14))
            prices = rng.uniform(10.0, 100.0, T)
            lam = float(rng.uniform(5e-4, 5e-3))
            inst = make_instance(prices, lam, (6.0, 2.0), (3.0, 1.0))
            mu1 = float(rng.uniform(20.0, 90.0))
            inner = inner_solve_unit2(inst, mu1)

            P1 = inst.unit1.rate_P
            costs = inst.costs

            def reduced(t, x2):
                p = prices[t - 1]
                x1 = np.clip((mu1 - p) / (2.0 * lam * p) - x2, -P1, P1)
                return costs.value(t, x1 + x2) - mu1 * x1

            own = sum(reduced(t, float(inner.x2[t - 1])) for t in range(1, T + 1))
            delta = inst.unit2.capacity_E / 200.0
            dp_cost, _ = oracle_dp_single(
                inst.unit2, costs, 0.0, 0.0, delta, cost_of=reduced
            )
            tol = inst.tol()
            lip = max(
                costs.slope_plus(t, P1 + inst.unit2.rate_P) for t in range(1, T + 1)
            )
            assert own <= dp_cost + tol.eps_cost
            assert abs(own - dp_cost) <= lip * delta * T + tol.eps_cost

    def test_recorded_multipliers_reproduce_the_moves(self):
        """The per-time (mu2, kappa2) records must regenerate both units'
        increments through the pair minimizer."""
        rng = np.random.default_rng(17)
        inst = make_instance(rng.uniform(10.0, 100.0, 12), 2e-3, (8.0, 2.0), (3.0, 1.0))
        mu1 = 47.0
        inner = inner_solve_unit2(inst, mu1)
        for t in range(1, 13):
            nu = EnlargedParam(mu1, float(inner.mu2[t - 1]), float(inner.kappa2[t - 1]))
            x1, x2 = xhat_pair(t, nu, 2.0, 1.0, inst.costs)
            assert x1 == pytest.approx(inner.x1_induced[t - 1], abs=1e-6)
            assert x2 == pytest.approx(inner.x2[t - 1], abs=1e-6)


class TestSolveTwo:
    def test_constant_prices_idle(self):
        inst = make_instance(np.full(8, 40.0), 1e-3, (4.0, 2.0), (9.0, 3.0))
        res = solve_two(inst)
        assert_allclose(res.strategy.increments_total, np.zeros(8), atol=1e-9)
        assert total_cost(res.strategy, inst) == pytest.approx(0.0, abs=1e-9)
        assert res.certificate.overall

    def test_certified_on_random_instances(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            inst = random_instance(rng, tmax=16)
            res = solve_two(inst)
            assert res.certificate.overall, res.certificate
            viol = res.strategy.feasibility_violations(
                inst, max(inst.tol().eps_x, inst.tol().eps_S)
            )
            assert not viol

    def test_small_instances_match_grid_oracle(self):
        """Proves: on exhaustively tractable horizons the nested construction
        never loses to the joint grid DP (criterion-2 regime)."""
        rng = np.random.default_rng(29)
        for _ in range(8):
            T = int(rng.integers(2, 7))
            inst = random_instance(rng, tmax=6, lam_frac=(0.05, 1.0))
            res = solve_two(inst)
            oracle = oracle_dp(
                inst,
                (inst.unit1.capacity_E / 100.0, inst.unit2.capacity_E / 100.0),
            )
            report = compare(res, oracle, inst)
            assert report.ok
            assert report.within_lip_bound

    def test_state_match_records_are_consistent(self):
        rng = np.random.default_rng(31)
        seen = 0
        for _ in range(12):
            inst = random_instance(rng, tmax=20, lam_frac=(0.01, 0.2))
            res = solve_two(inst)
            if res.horizons.outer_unit == 0:
                continue
            for st in res.horizons.stages:
                if st.stage.boundary is Boundary.TERMINAL:
                    assert st.state_match is None
                    continue
                seen += 1
                rec = state_match_check(
                    res.strategy,
                    inst,
                    st.stage.decision_tau,
                    st.stage.boundary,
                    outer_unit=res.horizons.outer_unit,
                )
                assert rec.matched == st.state_match
                assert rec.time == st.stage.decision_tau
        assert seen >= 5

    def test_multipliers_reproduce_committed_increments(self):
        """The reported multiplier path regenerates the committed strategy
        through the pair minimizer, up to boundary-snap adjustments."""
        prices = 50.0 + 30.0 * np.sin(np.arange(1, 19) * 0.7)
        inst = make_instance(prices, 2e-3, (8.0, 1.0), (4.0, 2.0))
        assert inst.unit1.ratio() > inst.unit2.ratio()
        res = solve_two(inst)
        x1 = res.strategy.increments1
        x2 = res.strategy.increments2
        m = res.multipliers
        for t in range(1, 19):
            nu = EnlargedParam(float(m.mu1[t - 1]), *m.nu2(t))
            h1, h2 = xhat_pair(t, nu, 1.0, 2.0, inst.costs)
            assert h1 == pytest.approx(x1[t - 1], abs=1e-3)
            assert h2 == pytest.approx(x2[t - 1], abs=1e-3)

    def test_forecast_horizon_invariance_joint(self):
        """Proves: neither unit's first committed prefix reads cost data
        beyond the stage's reported forecast horizon."""
        rng = np.random.default_rng(37)
        exercised = 0
        for _ in range(30):
            T = 24
            prices = 55.0 + 25.0 * np.sin(np.arange(1, T + 1) * rng.uniform(0.6, 1.4))
            prices = prices + rng.uniform(-4.0, 4.0, T)
            P1, P2 = 1.0, 2.0
            inst = make_instance(prices, 0.3 / (P1 + P2), (6.0, P1), (3.0, P2))
            tol = inst.tol()
            res = solve_two(inst, tol)
            first = res.horizons.stages[0].stage
            if first.forecast_tau >= T:
                continue
            exercised += 1
            perturbed = prices.copy()
            perturbed[first.forecast_tau :] *= rng.uniform(0.8, 1.2, T - first.forecast_tau)
            inst2 = make_instance(perturbed, 0.3 / (P1 + P2), (6.0, P1), (3.0, P2))
            res2 = solve_two(inst2, tol)
            tau = first.decision_tau
            np.testing.assert_array_equal(
                res2.strategy.levels1[: tau + 1], res.strategy.levels1[: tau + 1]
            )
            np.testing.assert_array_equal(
                res2.strategy.levels2[: tau + 1], res.strategy.levels2[: tau + 1]
            )
        assert exercised >= 3


class TestEqualRatioReduction:
    def _instance(self):
        rng = np.random.default_rng(7)
        prices = rng.uniform(10.0, 100.0, 16)
        return make_instance(
            prices, 2e-3, (10.0, 1.0), (20.0, 2.0), s0=(1.0, 2.0), sT=(2.0, 4.0)
        )

    def test_aggregate_cost_equality(self):
        """Proves: scaling the aggregate-unit path by the capacity shares
        loses nothing, because per-time combined increments are identical."""
        inst = self._instance()
        res = solve_two(inst)
        assert res.horizons.outer_unit == 0
        assert any("aggregate" in n for n in res.notes)

        agg = solve_single(StorageUnit(30.0, 3.0), inst.costs, 3.0, 6.0)
        agg_cost = sum(
            inst.costs.value(t, float(d)) for t, d in enumerate(np.diff(agg.levels), 1)
        )
        joint_cost = total_cost(res.strategy, inst)
        assert abs(joint_cost - agg_cost) <= 1e-10 * max(1.0, abs(agg_cost))

    def test_split_shares_and_certificate(self):
        inst = self._instance()
        res = solve_two(inst)
        assert res.certificate.overall
        assert_allclose(res.strategy.levels1 * 2.0, res.strategy.levels2, atol=1e-9)

    def test_rejects_unequal_ratios(self):
        inst = make_instance(np.full(4, 30.0), 1e-3, (4.0, 2.0), (9.0, 3.0))
        with pytest.raises(InvalidInstanceError, match="equal duration ratios"):
            reduce_equal_ratio(inst)

    def test_rejects_disproportionate_levels(self):
        inst = make_instance(
            np.full(4, 30.0), 1e-3, (10.0, 1.0), (20.0, 2.0), s0=(5.0, 2.0)
        )
        with pytest.raises(InvalidInstanceError, match="proportion"):
            reduce_equal_ratio(inst)


class TestNearSeparable:
    def test_vanishing_impact_decouples(self):
        rng = np.random.default_rng(19)
        prices = rng.uniform(10.0, 100.0, 20)
        inst = make_instance(prices, 1e-8, (6.0, 2.0), (3.0, 1.0))
        report = near_separable_compare(inst)
        assert report.gap_rel < 1e-4

    def test_gap_grows_with_impact(self):
        rng = np.random.default_rng(19)
        prices = rng.uniform(10.0, 100.0, 20)
        gaps = []
        for lam in (1e-8, 1e-5, 1e-3):
            inst = make_instance(prices, lam, (6.0, 2.0), (3.0, 1.0))
            gaps.append(abs(near_separable_compare(inst).gap_abs))
        assert gaps[0] < gaps[-1]
