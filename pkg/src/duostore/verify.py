"""Independent optimality certification and grid dynamic-programming oracles.

The certifier checks the three sufficient conditions for joint optimality of
a strategy plus multiplier paths, none of which rely on how the solver found
them:

(i)   feasibility of both level paths (capacity, rate, boundary levels);
(ii)  pointwise minimization: at every time the strategy's increments must
      minimize ``C_t(x1+x2) - mu1*x1 - mu2*x2`` over the rate box. Checked
      two ways, because each alone has a blind spot: domination over a
      201 x 201 grid (misses sub-grid minima) and the KKT stationarity
      residual of the reduced scalar problem in the combined increment
      (can be fooled exactly at clamps);
(iii) complementary slackness: each unit's multiplier stays constant while
      its level is interior, may only fall across a time at empty and only
      rise across a time at full.

The oracles solve the same instances by brute force on a discretized level
grid, giving ground truth that shares no code with the solver beyond the
cost model itself.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import (
    CostModel,
    InfeasibleProblemError,
    OracleBudgetError,
    OracleGapError,
    ProblemInstance,
    StorageUnit,
    Strategy,
    ToleranceSet,
    total_cost,
)

__all__ = [
    "CertificateReport",
    "certify",
    "certify_single",
    "OracleResult",
    "oracle_dp",
    "oracle_dp_single",
    "GapReport",
    "compare",
    "write_counterexample",
]

_DEFAULT_BUDGET = 2_000_000  # time steps times joint grid states


@dataclass(frozen=True)
class CertificateReport:
    """Outcome of the three-condition optimality check."""

    feasible: bool
    max_feasibility_violation: float
    minimization_ok: bool
    worst_objective_gap: float
    max_kkt_residual: float
    slackness_ok: bool
    slackness_violations: tuple[tuple[int, int], ...]
    overall: bool

    def as_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "max_feasibility_violation": self.max_feasibility_violation,
            "minimization_ok": self.minimization_ok,
            "worst_objective_gap": self.worst_objective_gap,
            "max_kkt_residual": self.max_kkt_residual,
            "slackness_ok": self.slackness_ok,
            "slackness_violations": [list(v) for v in self.slackness_violations],
            "overall": self.overall,
        }


def _feasibility(strategy: Strategy, instance: ProblemInstance, tol: ToleranceSet):
    # Rates are checked at the level tolerance, not eps_x: committed levels
    # are only trusted to eps_S, so their differences cannot be tighter.
    worst = 0.0
    ok = True
    rate_slack = max(tol.eps_x, tol.eps_S)
    for j in (1, 2):
        unit = instance.unit(j)
        lv = strategy.levels(j)
        checks = [
            (abs(lv[0] - instance.initial_levels[j - 1]), tol.eps_S),
            (abs(lv[-1] - instance.final_levels[j - 1]), tol.eps_S),
            (float(np.max(-lv)), tol.eps_S),
            (float(np.max(lv - unit.capacity_E)), tol.eps_S),
            (float(np.max(np.abs(np.diff(lv)))) - unit.rate_P, rate_slack),
        ]
        for violation, slack in checks:
            worst = max(worst, violation)
            if violation > slack:
                ok = False
    return ok, worst


def _slackness(
    levels: np.ndarray,
    mu: np.ndarray,
    capacity_E: float,
    tol: ToleranceSet,
    unit_index: int,
    mu_slack: float,
) -> list[tuple[int, int]]:
    out = []
    eq = tol.eps_mu + mu_slack
    T = mu.size
    for t in range(1, T):
        s = levels[t]
        d = mu[t] - mu[t - 1]
        near0 = abs(s) <= tol.eps_S
        nearE = abs(s - capacity_E) <= tol.eps_S
        if near0 and nearE:
            continue
        if near0:
            if d > eq:
                out.append((unit_index, t))
        elif nearE:
            if d < -eq:
                out.append((unit_index, t))
        elif abs(d) > eq:
            out.append((unit_index, t))
    return out


def _kkt_residual_pair(
    costs: CostModel,
    t: int,
    x1: float,
    x2: float,
    mu1: float,
    mu2: float,
    P1: float,
    P2: float,
    eps_clamp: float,
) -> float:
    """Stationarity residual of the reduced scalar problem at the strategy point.

    Pushing the combined increment up moves whichever unit is not clamped at
    its upper rate and is best paid for it; pushing down moves the cheapest
    unclamped unit. Zero must lie between the resulting one-sided reduced
    derivatives, with the sides dropped where no unit can move. A unit
    counts as clamped within ``eps_clamp`` of its rate bound; that slack has
    to match the accuracy of the committed levels, or an increment sitting a
    hair inside a genuine clamp picks up the whole saturation gap.
    """
    xi = x1 + x2
    up_mus = [m for m, x, P in ((mu1, x1, P1), (mu2, x2, P2)) if x < P - eps_clamp]
    dn_mus = [m for m, x, P in ((mu1, x1, P1), (mu2, x2, P2)) if x > -P + eps_clamp]
    resid = 0.0
    if up_mus:
        resid = max(resid, max(up_mus) - costs.slope_plus(t, xi))
    if dn_mus:
        resid = max(resid, costs.slope_minus(t, xi) - min(dn_mus))
    return resid


def certify(
    strategy: Strategy,
    multipliers,
    instance: ProblemInstance,
    tol: ToleranceSet | None = None,
    threads: int = 1,
    mu_slack: float = 0.0,
    grid_points: int = 201,
) -> CertificateReport:
    """Check conditions (i) through (iii) for a strategy and multiplier paths.

    ``multipliers`` needs attributes ``mu1``, ``mu2`` (arrays of length T);
    the tie coordinate plays no role in optimality and is ignored here.
    ``mu_slack`` widens the multiplier-equality tolerance, for callers whose
    paths went through limited-precision serialization. ``threads`` > 1
    splits the per-time minimization checks across a thread pool.
    """
    tol = tol if tol is not None else instance.tol()
    T = instance.T
    P1, P2 = instance.unit1.rate_P, instance.unit2.rate_P
    mu1 = np.asarray(multipliers.mu1, dtype=np.float64)
    mu2 = np.asarray(multipliers.mu2, dtype=np.float64)
    if strategy.T != T or mu1.size != T or mu2.size != T:
        raise ValueError("strategy and multiplier path lengths must match the horizon")

    feas_ok, feas_worst = _feasibility(strategy, instance, tol)

    x1 = strategy.increments1
    x2 = strategy.increments2
    g1 = np.linspace(-P1, P1, grid_points)
    g2 = np.linspace(-P2, P2, grid_points)
    XI = g1[:, None] + g2[None, :]

    def check_range(lo: int, hi: int) -> tuple[float, float]:
        worst_gap = -math.inf
        worst_resid = 0.0
        costs = instance.costs
        for i in range(lo, hi):
            t = i + 1
            if costs.kind == "quadratic":
                p = float(costs.prices[i])
                vals = (p + costs.impact_lambda * p * XI) * XI
            else:
                vals = costs.value_array(t, XI)
            vals = vals - mu1[i] * g1[:, None] - mu2[i] * g2[None, :]
            vmin = float(np.min(vals))
            xi = float(x1[i] + x2[i])
            v_strat = costs.value(t, xi) - mu1[i] * float(x1[i]) - mu2[i] * float(x2[i])
            worst_gap = max(worst_gap, v_strat - vmin)
            worst_resid = max(
                worst_resid,
                _kkt_residual_pair(
                    costs, t, float(x1[i]), float(x2[i]),
                    float(mu1[i]), float(mu2[i]), P1, P2,
                    max(tol.eps_x, tol.eps_S),
                ),
            )
        return worst_gap, worst_resid

    if threads > 1 and T > 1:
        from concurrent.futures import ThreadPoolExecutor

        n = min(threads, T)
        bounds = np.linspace(0, T, n + 1).astype(int)
        with ThreadPoolExecutor(max_workers=n) as pool:
            parts = list(pool.map(lambda se: check_range(*se), zip(bounds[:-1], bounds[1:])))
        worst_gap = max(p[0] for p in parts)
        worst_resid = max(p[1] for p in parts)
    else:
        worst_gap, worst_resid = check_range(0, T)

    min_ok = worst_gap <= tol.eps_cost and worst_resid <= tol.eps_cost

    violations: list[tuple[int, int]] = []
    violations += _slackness(strategy.levels1, mu1, instance.unit1.capacity_E, tol, 1, mu_slack)
    violations += _slackness(strategy.levels2, mu2, instance.unit2.capacity_E, tol, 2, mu_slack)
    slack_ok = not violations

    return CertificateReport(
        feasible=feas_ok,
        max_feasibility_violation=feas_worst,
        minimization_ok=min_ok,
        worst_objective_gap=worst_gap,
        max_kkt_residual=worst_resid,
        slackness_ok=slack_ok,
        slackness_violations=tuple(violations),
        overall=feas_ok and min_ok and slack_ok,
    )


def certify_single(
    levels: np.ndarray,
    mu_path: np.ndarray,
    unit: StorageUnit,
    costs: CostModel,
    initial_level: float,
    final_level: float,
    tol: ToleranceSet,
    grid_points: int = 401,
) -> CertificateReport:
    """Single-unit version of :func:`certify`, same three conditions."""
    levels = np.asarray(levels, dtype=np.float64)
    mu = np.asarray(mu_path, dtype=np.float64)
    T = mu.size
    x = np.diff(levels)
    P = unit.rate_P

    worst = max(
        abs(levels[0] - initial_level),
        abs(levels[-1] - final_level),
        float(np.max(-levels)),
        float(np.max(levels - unit.capacity_E)),
    )
    rate_slack = max(tol.eps_x, tol.eps_S)
    feas_ok = worst <= tol.eps_S and float(np.max(np.abs(x))) <= P + rate_slack
    worst = max(worst, float(np.max(np.abs(x))) - P)

    grid = np.linspace(-P, P, grid_points)
    worst_gap = -math.inf
    worst_resid = 0.0
    for i in range(T):
        t = i + 1
        if costs.kind == "quadratic":
            p = float(costs.prices[i])
            vals = (p + costs.impact_lambda * p * grid) * grid
        else:
            vals = costs.value_array(t, grid)
        vmin = float(np.min(vals - mu[i] * grid))
        v_strat = costs.value(t, float(x[i])) - mu[i] * float(x[i])
        worst_gap = max(worst_gap, v_strat - vmin)
        resid = 0.0
        if x[i] < P - rate_slack:
            resid = max(resid, mu[i] - costs.slope_plus(t, float(x[i])))
        if x[i] > -P + rate_slack:
            resid = max(resid, costs.slope_minus(t, float(x[i])) - mu[i])
        worst_resid = max(worst_resid, resid)
    min_ok = worst_gap <= tol.eps_cost and worst_resid <= tol.eps_cost

    violations = _slackness(levels, mu, unit.capacity_E, tol, 1, 0.0)
    return CertificateReport(
        feasible=feas_ok,
        max_feasibility_violation=worst,
        minimization_ok=min_ok,
        worst_objective_gap=worst_gap,
        max_kkt_residual=worst_resid,
        slackness_ok=not violations,
        slackness_violations=tuple(violations),
        overall=feas_ok and min_ok and not violations,
    )


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    """Grid-restricted optimum: exact on its grid, within Lip*delta*T off it.

    ``boundary_snap`` is the total energy by which the four boundary levels
    moved to reach grid points. When nonzero the oracle solved a nearby
    problem, and cost comparisons must allow roughly ``Lip * boundary_snap``
    of slack in either direction.
    """

    cost: float
    strategy: Strategy
    delta1: float
    delta2: float
    states: int
    boundary_snap: float


def _grid_geometry(E: float, P: float, delta: float) -> tuple[int, float, int]:
    n = max(1, round(E / delta))
    d = E / n
    a = int(math.floor(P / d + 1e-9))
    if a < 1:
        raise OracleBudgetError(
            f"rate {P} below one grid cell {d}; refine the grid or widen the rate"
        )
    return n, d, a


def oracle_dp(
    instance: ProblemInstance,
    grid_delta,
    budget: int | None = None,
) -> OracleResult:
    """Exact minimum over joint level paths restricted to a delta-grid.

    ``grid_delta`` is one spacing for both units or a per-unit pair. Each
    spacing is adjusted to divide its capacity exactly; boundary levels are
    snapped to the nearest grid point; rate bounds are floored to whole
    cells, so every grid strategy is feasible for the continuous instance
    and the solver must match or beat the oracle cost.
    """
    budget = budget if budget is not None else _DEFAULT_BUDGET
    if isinstance(grid_delta, (tuple, list)):
        d1_req, d2_req = grid_delta
    else:
        d1_req = d2_req = float(grid_delta)
    u1, u2 = instance.unit1, instance.unit2
    n1, d1, a1 = _grid_geometry(u1.capacity_E, u1.rate_P, d1_req)
    n2, d2, a2 = _grid_geometry(u2.capacity_E, u2.rate_P, d2_req)
    T = instance.T
    states = (n1 + 1) * (n2 + 1)
    if T * states > budget:
        raise OracleBudgetError(
            f"T*(n1+1)*(n2+1) = {T * states} exceeds budget {budget}; "
            f"need budget >= {T * states}"
        )

    i0 = round(instance.initial_levels[0] / d1)
    j0 = round(instance.initial_levels[1] / d2)
    iT = round(instance.final_levels[0] / d1)
    jT = round(instance.final_levels[1] / d2)
    snap = (
        abs(i0 * d1 - instance.initial_levels[0])
        + abs(iT * d1 - instance.final_levels[0])
        + abs(j0 * d2 - instance.initial_levels[1])
        + abs(jT * d2 - instance.final_levels[1])
    )
    if abs(iT - i0) > T * a1 or abs(jT - j0) > T * a2:
        raise InfeasibleProblemError("final grid level unreachable under floored rates")

    moves1 = np.arange(-a1, a1 + 1) * d1
    moves2 = np.arange(-a2, a2 + 1) * d2
    xi = moves1[:, None] + moves2[None, :]
    costs = instance.costs
    if costs.kind == "quadratic":
        p = costs.prices[:, None, None]
        table = (p + costs.impact_lambda * p * xi[None, :, :]) * xi[None, :, :]
    else:
        table = np.empty((T, moves1.size, moves2.size))
        for i in range(T):
            table[i] = costs.value_array(i + 1, xi)

    V, parent = _kernels.dp_forward(np.ascontiguousarray(table), n1, n2, a1, a2, i0, j0)
    final = iT * (n2 + 1) + jT
    cost = float(V[final])
    if not (cost < 1e299):
        raise InfeasibleProblemError("no feasible grid path reaches the final levels")

    # backtrack
    idx = final
    path = [idx]
    for t in range(T - 1, -1, -1):
        idx = int(parent[t, idx])
        path.append(idx)
    path.reverse()
    arr = np.array(path)
    levels1 = (arr // (n2 + 1)) * d1
    levels2 = (arr % (n2 + 1)) * d2
    return OracleResult(
        cost=cost,
        strategy=Strategy(levels1=levels1, levels2=levels2),
        delta1=d1,
        delta2=d2,
        states=states,
        boundary_snap=snap,
    )


def oracle_dp_single(
    unit: StorageUnit,
    costs: CostModel,
    initial_level: float,
    final_level: float,
    delta: float,
    budget: int | None = None,
    cost_of=None,
) -> tuple[float, np.ndarray]:
    """Single-unit grid DP: (cost, level path on the grid).

    ``cost_of`` overrides the per-step cost as ``cost_of(t, x)``; the
    default evaluates the cost model. Used both as the spec-level oracle on
    one-unit instances and as the independent check for inner sweeps, where
    the effective cost is a reduced two-unit expression.
    """
    budget = budget if budget is not None else _DEFAULT_BUDGET
    n, d, a = _grid_geometry(unit.capacity_E, unit.rate_P, delta)
    T = costs.horizon_T
    if T * (n + 1) > budget:
        raise OracleBudgetError(
            f"T*(n+1) = {T * (n + 1)} exceeds budget {budget}"
        )
    i0 = round(initial_level / d)
    iT = round(final_level / d)
    if abs(iT - i0) > T * a:
        raise InfeasibleProblemError("final grid level unreachable under floored rate")

    INF = 1e300
    V = np.full(n + 1, INF)
    V[i0] = 0.0
    parent = np.full((T, n + 1), -1, dtype=np.int64)
    evaluate = cost_of if cost_of is not None else (lambda t, x: costs.value(t, x))
    for i in range(T):
        t = i + 1
        W = np.full(n + 1, INF)
        for m in range(-a, a + 1):
            c = evaluate(t, m * d)
            if m >= 0:
                cand = V[: n + 1 - m] + c
                seg = W[m:]
                upd = cand < seg
                seg[upd] = cand[upd]
                parent[i, m:][upd] = np.flatnonzero(upd)
            else:
                cand = V[-m:] + c
                seg = W[: n + 1 + m]
                upd = cand < seg
                seg[upd] = cand[upd]
                parent[i, : n + 1 + m][upd] = np.flatnonzero(upd) - m
        V = W
    cost = float(V[iT])
    if not (cost < 1e299):
        raise InfeasibleProblemError("no feasible grid path reaches the final level")
    idx = iT
    path = [idx]
    for i in range(T - 1, -1, -1):
        idx = int(parent[i, idx])
        path.append(idx)
    path.reverse()
    return cost, np.array(path) * d


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GapReport:
    cost_alg: float
    cost_dp: float
    gap: float
    ok: bool
    lip_bound: float
    within_lip_bound: bool


def compare(
    solution,
    oracle: OracleResult,
    instance: ProblemInstance,
    tol: ToleranceSet | None = None,
    bundle_dir: str | None = None,
) -> GapReport:
    """Solver cost against the grid oracle; raises on a genuine loss.

    The continuous solver must match or beat every grid-restricted strategy,
    so ``cost_alg > cost_dp + eps_cost`` is a hard failure: a counterexample
    bundle is serialized (to ``bundle_dir`` or ``./counterexamples``) and
    :class:`OracleGapError` is raised. The report also evaluates the
    discretization band ``Lip * (delta1 + delta2) * T`` for callers checking
    two-sided closeness.
    """
    tol = tol if tol is not None else instance.tol()
    cost_alg = total_cost(solution.strategy, instance)
    gap = cost_alg - oracle.cost
    D = instance.rate_total
    lip = max(
        instance.costs.slope_plus(t, D) for t in range(1, instance.T + 1)
    )
    bound = lip * (oracle.delta1 + oracle.delta2) * instance.T
    # Snapped boundary levels mean the oracle solved a nearby problem whose
    # optimum can undercut ours by up to Lip times the total snap energy.
    slack = tol.eps_cost + lip * oracle.boundary_snap
    report = GapReport(
        cost_alg=cost_alg,
        cost_dp=oracle.cost,
        gap=gap,
        ok=gap <= slack,
        lip_bound=bound,
        within_lip_bound=abs(gap) <= bound + lip * oracle.boundary_snap,
    )
    if not report.ok:
        directory = bundle_dir if bundle_dir is not None else "counterexamples"
        path = write_counterexample(
            directory, instance, solution.strategy, oracle.strategy,
            note=f"cost_alg {cost_alg!r} > cost_dp {oracle.cost!r} + eps_cost {tol.eps_cost!r}",
        )
        raise OracleGapError(
            f"solver lost to the grid oracle by {gap:.6g}; bundle at {path}"
        )
    return report


def write_counterexample(
    directory: str,
    instance: ProblemInstance,
    strategy_alg: Strategy,
    strategy_other: Strategy | None,
    note: str,
) -> str:
    """Serialize one self-contained reproduction file (cli instance format)."""
    os.makedirs(directory, exist_ok=True)
    if instance.costs.kind != "quadratic":
        prices = [instance.costs.slope_plus(t, 0.0) for t in range(1, instance.T + 1)]
        note = note + " [custom costs: prices column holds C_t'(0)]"
        lam = 0.0
    else:
        prices = [float(p) for p in instance.costs.prices]
        lam = instance.costs.impact_lambda
    payload = {
        "config": {
            "units": [
                {"E": instance.unit1.capacity_E, "P": instance.unit1.rate_P},
                {"E": instance.unit2.capacity_E, "P": instance.unit2.rate_P},
            ],
            "lambda": lam,
            "initial_levels": list(instance.initial_levels),
            "final_levels": list(instance.final_levels),
        },
        "prices": prices,
        "strategy_alg": {
            "levels1": [float(v) for v in strategy_alg.levels1],
            "levels2": [float(v) for v in strategy_alg.levels2],
        },
        "note": note,
    }
    if strategy_other is not None:
        payload["strategy_oracle"] = {
            "levels1": [float(v) for v in strategy_other.levels1],
            "levels2": [float(v) for v in strategy_other.levels2],
        }
    text = json.dumps(payload, indent=2, sort_keys=True)
    import hashlib

    digest = hashlib.sha256(text.encode()).hexdigest()[:12]
    path = os.path.join(directory, f"counterexample_{digest}.json")
    with open(path, "w") as fh:
        fh.write(text)
    return path
