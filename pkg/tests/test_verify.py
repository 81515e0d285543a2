"""Certificates, grid oracles, and the solver-versus-oracle comparison."""

import hashlib
import json
import types

import numpy as np
import pytest
from numpy.testing import assert_allclose

from duostore.core import (
    CostModel,
    OracleBudgetError,
    OracleGapError,
    ProblemInstance,
    StorageUnit,
    Strategy,
    total_cost,
)
from duostore.duo import MultiplierPath, solve_two
from duostore.verify import (
    certify,
    compare,
    oracle_dp,
    oracle_dp_single,
    write_counterexample,
)


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


def random_instance(rng, tmax=12):
    T = int(rng.integers(2, tmax + 1))
    P1 = float(rng.uniform(0.5, 3.0))
    P2 = float(rng.uniform(0.5, 3.0))
    r1 = float(rng.uniform(1.5, 6.0))
    r2 = float(rng.uniform(1.5, 6.0))
    while abs(r1 - r2) < 1e-2:
        r2 = float(rng.uniform(1.5, 6.0))
    lam = 0.4 / (P1 + P2) * float(rng.uniform(0.05, 0.5))
    prices = rng.uniform(10.0, 100.0, T)
    return make_instance(prices, lam, (r1 * P1, P1), (r2 * P2, P2))


def random_feasible_strategy(rng, instance):
    """Uniform draw from the reachable band of each unit, boundaries pinned."""
    T = instance.T
    paths = []
    for j in (1, 2):
        unit = instance.unit(j)
        E, P = unit.capacity_E, unit.rate_P
        s0 = instance.initial_levels[j - 1]
        sT = instance.final_levels[j - 1]
        lv = [s0]
        for t in range(1, T):
            remaining = (T - t) * P
            lo = max(0.0, lv[-1] - P, sT - remaining)
            hi = min(E, lv[-1] + P, sT + remaining)
            lv.append(float(rng.uniform(lo, hi)))
        lv.append(sT)
        paths.append(np.array(lv))
    return Strategy(levels1=paths[0], levels2=paths[1])


class TestCertify:
    def test_accepts_solver_output(self):
        t = np.arange(12)
        prices = 50.0 + 30.0 * np.sin(t)
        inst = make_instance(prices, 2e-3, (8.0, 1.0), (4.0, 2.0))
        res = solve_two(inst)
        report = certify(res.strategy, res.multipliers, inst)
        assert report.overall
        assert report.worst_objective_gap <= inst.tol().eps_cost

    def test_interior_multiplier_jump_fails_slackness(self):
        # Constant prices with mid-level boundaries: the optimum idles, every
        # level is interior, and any multiplier step is a slackness breach.
        inst = make_instance(
            np.full(6, 40.0), 1e-3, (6.0, 1.0), (4.0, 2.0), s0=(3.0, 2.0)
        )
        res = solve_two(inst)
        assert certify(res.strategy, res.multipliers, inst).overall
        mu1 = res.multipliers.mu1.copy()
        mu1[3] += 1.0
        bumped = MultiplierPath(
            mu1=mu1, mu2=res.multipliers.mu2, kappa2=res.multipliers.kappa2
        )
        report = certify(res.strategy, bumped, inst)
        assert not report.slackness_ok
        assert (1, 3) in report.slackness_violations or (1, 4) in report.slackness_violations
        assert not report.overall

    def test_idle_strategy_with_marginal_price_multipliers(self):
        # At zero trade the one-sided marginal costs collapse to the price,
        # so mu = p certifies the idle strategy under constant prices.
        T = 5
        inst = make_instance(
            np.full(T, 25.0), 5e-3, (6.0, 1.0), (4.0, 2.0), s0=(3.0, 2.0)
        )
        levels1 = np.full(T + 1, 3.0)
        levels2 = np.full(T + 1, 2.0)
        strat = Strategy(levels1=levels1, levels2=levels2)
        path = MultiplierPath(
            mu1=np.full(T, 25.0), mu2=np.full(T, 25.0), kappa2=np.zeros(T)
        )
        report = certify(strat, path, inst)
        assert report.overall
        assert report.worst_objective_gap <= 1e-12
        assert report.max_kkt_residual <= 1e-12

    def test_infeasible_levels_are_flagged(self):
        T = 4
        inst = make_instance(np.full(T, 30.0), 1e-3, (2.0, 1.0), (2.0, 1.0))
        levels1 = np.array([0.0, 1.0, 2.5, 1.0, 0.0])  # exceeds E1 = 2
        levels2 = np.zeros(T + 1)
        strat = Strategy(levels1=levels1, levels2=levels2)
        path = MultiplierPath(
            mu1=np.full(T, 30.0), mu2=np.full(T, 30.0), kappa2=np.zeros(T)
        )
        report = certify(strat, path, inst)
        assert not report.feasible
        assert report.max_feasibility_violation >= 0.5

    def test_rejects_mismatched_lengths(self):
        inst = make_instance(np.full(4, 30.0), 1e-3, (2.0, 1.0), (2.0, 1.0))
        strat = Strategy(levels1=np.zeros(5), levels2=np.zeros(5))
        path = MultiplierPath(mu1=np.zeros(3), mu2=np.zeros(3), kappa2=np.zeros(3))
        with pytest.raises(ValueError, match="length"):
            certify(strat, path, inst)

    def test_random_feasible_strategies_never_beat_certified_cost(self):
        rng = np.random.default_rng(11)
        inst = make_instance(
            rng.uniform(20.0, 80.0, 10), 3e-3, (6.0, 1.5), (5.0, 2.5),
            s0=(3.0, 2.5),
        )
        res = solve_two(inst)
        assert certify(res.strategy, res.multipliers, inst).overall
        best = total_cost(res.strategy, inst)
        tol = inst.tol()
        for _ in range(100):
            rival = random_feasible_strategy(rng, inst)
            assert total_cost(rival, inst) >= best - tol.eps_cost


class TestOracleSingle:
    def test_two_step_hand_value(self):
        # Buy one unit at p=10, sell it at p=20 with lam = 0.01:
        # 10*1*(1 + 0.01) - 20*1*(1 - 0.01) = 10.1 - 19.8 = -9.7.
        costs = CostModel.quadratic(np.array([10.0, 20.0]), 0.01)
        cost, path = oracle_dp_single(StorageUnit(1.0, 1.0), costs, 0.0, 0.0, 0.25)
        assert cost == pytest.approx(-9.7, rel=1e-12)
        assert_allclose(path, [0.0, 1.0, 0.0])

    def test_zero_trade_under_constant_prices(self):
        costs = CostModel.quadratic(np.full(6, 50.0), 0.01)
        cost, path = oracle_dp_single(StorageUnit(2.0, 1.0), costs, 1.0, 1.0, 0.25)
        assert cost == 0.0
        assert_allclose(path, np.full(7, 1.0))

    def test_refining_the_grid_never_raises_the_cost(self):
        rng = np.random.default_rng(7)
        costs = CostModel.quadratic(rng.uniform(10.0, 100.0, 8), 5e-3)
        unit = StorageUnit(4.0, 1.0)
        values = [
            oracle_dp_single(unit, costs, 2.0, 2.0, delta)[0]
            for delta in (0.5, 0.25, 0.125)
        ]
        assert values[1] <= values[0] + 1e-12
        assert values[2] <= values[1] + 1e-12

    def test_budget_refusal(self):
        costs = CostModel.quadratic(np.full(10, 30.0), 1e-3)
        with pytest.raises(OracleBudgetError, match="budget"):
            oracle_dp_single(StorageUnit(4.0, 1.0), costs, 0.0, 0.0, 0.01, budget=100)

    def test_rate_below_one_cell_is_refused(self):
        costs = CostModel.quadratic(np.full(4, 30.0), 1e-3)
        with pytest.raises(OracleBudgetError, match="grid cell"):
            oracle_dp_single(StorageUnit(1.0, 0.1), costs, 0.0, 0.0, 0.25)


class TestOracleJoint:
    def test_two_step_hand_value(self):
        # Both (1, 1) units cycle together: C(2)@p=10 + C(-2)@p=20 with
        # lam = 0.01 gives 20*1.02 - 40*0.98 = 20.4 - 39.2 = -18.8.
        inst = make_instance([10.0, 20.0], 0.01, (1.0, 1.0), (1.0, 1.0))
        res = oracle_dp(inst, 0.25)
        assert res.cost == pytest.approx(-18.8, rel=1e-12)
        assert res.boundary_snap == 0.0
        assert_allclose(res.strategy.levels1, [0.0, 1.0, 0.0])
        assert_allclose(res.strategy.levels2, [0.0, 1.0, 0.0])

    def test_grid_strategy_is_feasible_for_the_instance(self):
        rng = np.random.default_rng(13)
        inst = random_instance(rng, tmax=8)
        E1, E2 = inst.unit1.capacity_E, inst.unit2.capacity_E
        res = oracle_dp(inst, (E1 / 7, E2 / 5))
        viol = res.strategy.feasibility_violations(inst, inst.tol())
        assert not viol

    def test_budget_refusal(self):
        inst = make_instance(np.full(12, 30.0), 1e-3, (4.0, 1.0), (4.0, 1.0))
        with pytest.raises(OracleBudgetError, match="exceeds budget"):
            oracle_dp(inst, 0.01, budget=1000)


class TestCompare:
    def test_solver_matches_oracle_on_the_hand_case(self):
        inst = make_instance([10.0, 20.0], 0.01, (1.0, 1.0), (1.0, 1.0))
        res = solve_two(inst)
        oracle = oracle_dp(inst, 0.05)
        report = compare(res, oracle, inst)
        assert report.ok
        assert report.within_lip_bound
        assert report.gap == pytest.approx(0.0, abs=inst.tol().eps_cost)

    def test_random_instances_stay_within_the_lip_band(self):
        rng = np.random.default_rng(29)
        checked = 0
        for _ in range(6):
            inst = random_instance(rng, tmax=6)
            res = solve_two(inst)
            E1, E2 = inst.unit1.capacity_E, inst.unit2.capacity_E
            oracle = oracle_dp(inst, (E1 / 60, E2 / 60))
            report = compare(res, oracle, inst)
            assert report.ok
            assert report.within_lip_bound
            checked += 1
        assert checked == 6

    def test_losing_strategy_writes_a_bundle_and_raises(self, tmp_path):
        # Idling through a 10 -> 20 price swing loses 18.8 to the oracle,
        # far beyond eps_cost.
        inst = make_instance([10.0, 20.0], 0.01, (1.0, 1.0), (1.0, 1.0))
        idle = Strategy(levels1=np.zeros(3), levels2=np.zeros(3))
        fake = types.SimpleNamespace(strategy=idle)
        oracle = oracle_dp(inst, 0.25)
        with pytest.raises(OracleGapError, match="lost to the grid oracle"):
            compare(fake, oracle, inst, bundle_dir=str(tmp_path))
        bundles = list(tmp_path.glob("counterexample_*.json"))
        assert len(bundles) == 1
        payload = json.loads(bundles[0].read_text())
        assert payload["config"]["lambda"] == 0.01
        assert payload["prices"] == [10.0, 20.0]
        assert payload["strategy_alg"]["levels1"] == [0.0, 0.0, 0.0]
        assert payload["strategy_oracle"]["levels1"] == [0.0, 1.0, 0.0]

    def test_counterexample_roundtrip(self, tmp_path):
        inst = make_instance([15.0, 35.0, 25.0], 2e-3, (3.0, 1.0), (2.0, 1.0))
        alg = Strategy(
            levels1=np.array([0.0, 1.0, 0.5, 0.0]),
            levels2=np.array([0.0, 1.0, 1.0, 0.0]),
        )
        other = Strategy(levels1=np.zeros(4), levels2=np.zeros(4))
        path = write_counterexample(str(tmp_path), inst, alg, other, note="probe")
        text = open(path).read()
        digest = hashlib.sha256(text.encode()).hexdigest()[:12]
        assert path.endswith(f"counterexample_{digest}.json")
        payload = json.loads(text)
        assert payload["note"] == "probe"
        assert payload["config"]["units"] == [
            {"E": 3.0, "P": 1.0},
            {"E": 2.0, "P": 1.0},
        ]
        assert payload["config"]["initial_levels"] == [0.0, 0.0]
        assert payload["strategy_alg"]["levels2"] == [0.0, 1.0, 1.0, 0.0]
        rebuilt = ProblemInstance(
            unit1=StorageUnit(
                payload["config"]["units"][0]["E"], payload["config"]["units"][0]["P"]
            ),
            unit2=StorageUnit(
                payload["config"]["units"][1]["E"], payload["config"]["units"][1]["P"]
            ),
            costs=CostModel.quadratic(
                np.array(payload["prices"]), payload["config"]["lambda"]
            ),
            initial_levels=tuple(payload["config"]["initial_levels"]),
            final_levels=tuple(payload["config"]["final_levels"]),
        )
        assert rebuilt.T == inst.T
        assert total_cost(alg, rebuilt) == pytest.approx(total_cost(alg, inst))
