"""Joint dispatch of two storage units by nested stagewise decomposition.

The joint problem couples the units only through the combined increment in
the per-step cost. Its Lagrangian structure mirrors the single-unit case,
with one multiplier path per unit, each constant between that unit's own
boundary events. The construction here nests two stagewise sweeps:

* The *outer* sweep handles the unit with the strictly larger duration
  ``E / P`` (called unit 1 internally). Its parameter is a scalar ``mu1``.
* For each probed ``mu1`` the *inner* sweep solves unit 2's problem to
  optimality under that pinned reward: at each step both increments come
  from the pair minimizer :func:`duostore.scalar.xhat_pair`, unit 2's
  constraints are enforced stagewise over the enlarged lexicographic
  parameter ``(mu2, kappa2)``, and unit 1's *induced* increments are
  recorded. The outer sweep treats ``mu1 -> induced unit-1 increments`` as
  a monotone family and runs the same envelope scan on unit 1's constraints.

When the outer envelope crosses, both units' prefixes are committed through
unit 1's decision horizon and the whole construction restarts from there.
The committed prefix only ever depended on cost data up to the largest time
any search examined, which is recorded and reported as the stage's forecast
horizon.

Monotonicity of the induced family is not guaranteed in general. Every
search therefore audits its own samples, falls back to a monotone envelope
of them when they are inconsistent, and records the evidence; an optional
ladder audit sweeps all three families on a fixed grid. Certificates from
:mod:`duostore.verify` arbitrate the result regardless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels, verify
from .core import (
    CostModel,
    InvalidInstanceError,
    ProblemInstance,
    StorageUnit,
    Strategy,
    ToleranceSet,
    validate_instance,
)
from .scalar import tie_segment, xhat_pair, EnlargedParam
from .stage import (
    Boundary,
    MonotoneIncrementFamily,
    MonotonicityViolation,
    StageResult,
    StagewiseRun,
    _cost_slope_bounds,
    repair_rate_cap,
    run_stage,
    solve_single,
    theta_level_resolution,
)

__all__ = [
    "OrderResult",
    "order_units",
    "Lex2Family",
    "OuterFamily",
    "InnerSolve",
    "inner_solve_unit2",
    "MultiplierPath",
    "OuterStage",
    "DuoHorizons",
    "StateMatchFailure",
    "StateMatchRecord",
    "state_match_check",
    "AuditRecord",
    "SolveResult",
    "solve_two",
    "reduce_equal_ratio",
    "SeparableReport",
    "near_separable_compare",
]

# Tie coordinate resolution for the kappa bisection phase. Not part of the
# tolerance bundle: kappa is dimensionless and its scale never varies.
_EPS_KAPPA = 1e-9
# Comparison slack for kappa in envelope crossings and slackness checks.
_EPS_KAPPA_CMP = 1e-6
# Relative slack under which two duration ratios count as equal.
_RATIO_EQ_REL = 1e-12


@dataclass(frozen=True)
class StateMatchFailure:
    """Unit 2 was not at unit 1's same-named boundary at a decision horizon."""

    time: int
    boundary: Boundary
    inner_level: float
    inner_target: float


@dataclass(frozen=True)
class StateMatchRecord:
    """Outcome of :func:`state_match_check` at one decision horizon."""

    time: int
    boundary: Boundary
    matched: bool
    inner_level: float
    inner_target: float


@dataclass(frozen=True)
class AuditRecord:
    """Monotonicity ladder result for one family over one outer stage."""

    family: str
    stage_start: int
    points: int
    violations: int
    worst_drop: float


@dataclass(frozen=True)
class OrderResult:
    """Internal unit ordering: ``unit1`` carries the strictly larger ``E/P``."""

    unit1: StorageUnit
    unit2: StorageUnit
    swapped: bool
    equal_ratio: bool


def order_units(a: StorageUnit, b: StorageUnit) -> OrderResult:
    """Order two units by duration ratio for the nested construction.

    Equal ratios (within relative slack) are flagged rather than broken by
    an arbitrary rule; callers divert those to :func:`reduce_equal_ratio`.
    """
    ra, rb = a.ratio(), b.ratio()
    if abs(ra - rb) <= _RATIO_EQ_REL * max(abs(ra), abs(rb)):
        return OrderResult(unit1=a, unit2=b, swapped=False, equal_ratio=True)
    if ra > rb:
        return OrderResult(unit1=a, unit2=b, swapped=False, equal_ratio=False)
    return OrderResult(unit1=b, unit2=a, swapped=True, equal_ratio=False)


# ---------------------------------------------------------------------------
# inner family: theta = (mu2, kappa2) at pinned mu1
# ---------------------------------------------------------------------------


class Lex2Family(MonotoneIncrementFamily):
    """Unit-2 increments of the pair minimizer, swept lexicographically.

    At pinned ``mu1``, unit 2's increment is nondecreasing in
    ``(mu2, kappa2)`` ordered lexicographically; the tie coordinate only
    matters where ``mu2`` crosses ``mu1``. Refinement pins the tie before
    bisecting past it so a bracket never straddles the tie unawares, and the
    kappa phase is resolved by exact linear interpolation (the level is
    affine in kappa on the tie).
    """

    def __init__(
        self,
        costs: CostModel,
        mu1: float,
        P1: float,
        P2: float,
        start_time: int,
        end_time: int,
        eps_mu: float,
    ) -> None:
        self.costs = costs
        self.mu1 = float(mu1)
        self.P1 = P1
        self.P2 = P2
        self.rate_cap = P2
        self.start_time = start_time
        self.end_time = end_time
        self.eps_mu = eps_mu
        slope_lo, slope_hi = _cost_slope_bounds(costs, P1 + P2)
        window = slice(start_time, end_time)
        self._cummin_lo = np.minimum.accumulate(slope_lo[window])
        self._cummax_hi = np.maximum.accumulate(slope_hi[window])

    # -- evaluation ---------------------------------------------------------

    def pair_increments(self, theta, upto: int) -> tuple[np.ndarray, np.ndarray]:
        mu2, k2 = theta
        if self.costs.kind == "quadratic":
            x1, x2 = _kernels.q_pair_increments(
                self.costs.prices[self.start_time : upto],
                self.costs.impact_lambda,
                self.mu1,
                float(mu2),
                float(k2),
                self.P1,
                self.P2,
            )
            return x1, x2
        pts = [
            xhat_pair(t, EnlargedParam(self.mu1, float(mu2), float(k2)), self.P1, self.P2, self.costs)
            for t in range(self.start_time + 1, upto + 1)
        ]
        arr = np.array(pts, dtype=np.float64).reshape(-1, 2)
        return arr[:, 0].copy(), arr[:, 1].copy()

    def increments(self, theta, upto: int) -> np.ndarray:
        return self.pair_increments(theta, upto)[1]

    def sum_increments(self, theta, upto: int) -> float:
        mu2, k2 = theta
        if self.costs.kind == "quadratic":
            return float(
                _kernels.q_pair_sum2(
                    self.costs.prices[self.start_time : upto],
                    self.costs.impact_lambda,
                    self.mu1,
                    float(mu2),
                    float(k2),
                    self.P1,
                    self.P2,
                )
            )
        return float(np.sum(self.increments(theta, upto)))

    # -- search plumbing ----------------------------------------------------

    def bracket(self, upto: int) -> tuple:
        i = upto - self.start_time - 1
        return (float(self._cummin_lo[i] - 1.0), 0.0), (float(self._cummax_hi[i] + 1.0), 1.0)

    def refine(self, lo, hi):
        ml, kl = lo
        mh, kh = hi
        tie = self.mu1
        if ml == mh:
            if kh - kl <= _EPS_KAPPA:
                return None
            return (ml, 0.5 * (kl + kh))
        if ml < tie < mh:
            return (tie, 0.0)
        if ml == tie and kl < 1.0:
            return (tie, 1.0)
        if mh == tie and kh > 0.0:
            return (tie, 0.0)
        if mh - ml <= self.eps_mu:
            return None
        return (0.5 * (ml + mh), 0.5)

    def interpolate(self, lo, hi, v_lo, v_hi, target):
        ml, kl = lo
        mh, kh = hi
        span = v_hi - v_lo
        if span <= 1e-15 * (abs(v_lo) + abs(v_hi) + 1.0):
            return None
        if ml == mh:
            gap = kh - kl
            if gap <= _EPS_KAPPA:
                return None
            k = kl + (target - v_lo) / span * gap
            return (ml, min(max(k, kl + 0.02 * gap), kh - 0.02 * gap))
        if ml < self.mu1 < mh:
            # let refine pin the tie first
            return None
        gap = mh - ml
        if gap <= self.eps_mu:
            return None
        m = ml + (target - v_lo) / span * gap
        return (min(max(m, ml + 0.05 * gap), mh - 0.05 * gap), 0.5)

    def key(self, theta) -> tuple:
        return (float(theta[0]), float(theta[1]))

    def exceeds(self, a, b) -> bool:
        if abs(a[0] - b[0]) <= self.eps_mu:
            return a[1] > b[1] + _EPS_KAPPA_CMP
        return a[0] > b[0] + self.eps_mu

    def stage_channels(self, theta, start: int, tau: int) -> dict[str, np.ndarray]:
        x1, _ = self.pair_increments(theta, tau)
        n = tau - start
        return {
            "mu2": np.full(n, float(theta[0])),
            "kappa2": np.full(n, float(theta[1])),
            "x1": x1[:n],
        }


# ---------------------------------------------------------------------------
# outer family: theta = mu1, increments = induced unit-1 moves
# ---------------------------------------------------------------------------


class _InnerState:
    """One memoized inner solve at a pinned ``mu1``: run plus cumulative x1."""

    def __init__(self, outer: "OuterFamily", mu1: float) -> None:
        o = outer
        self.diagnostics: list = []
        self.run = StagewiseRun(
            family_factory=lambda pos, level: Lex2Family(
                o.costs, mu1, o.P1, o.P2, pos, o.end_time, o.eps_theta
            ),
            horizon_T=o.end_time,
            capacity_E=o.capacity2_E,
            final_level=o.final2,
            start_time=o.start_time,
            start_level=o.level2_start,
            tol=o.tol,
            diagnostics=self.diagnostics,
            channel_names=("mu2", "kappa2", "x1"),
        )
        self._cum1 = np.zeros(o.end_time + 1)
        self._cum_to = o.start_time

    def ensure(self, t: int) -> None:
        self.run.ensure(t)
        if self._cum_to < self.run.pos:
            lo, hi = self._cum_to, self.run.pos
            seg = np.cumsum(self.run.channels["x1"][lo:hi])
            self._cum1[lo + 1 : hi + 1] = self._cum1[lo] + seg
            self._cum_to = hi

    def sum1(self, upto: int) -> float:
        self.ensure(upto)
        return float(self._cum1[upto])


class OuterFamily(MonotoneIncrementFamily):
    """Unit-1 increments induced by inner-optimal unit-2 responses.

    Each probed ``mu1`` owns a lazily extended inner solve; evaluations only
    force the inner run as far as the scanned time, so the information a
    stage ever touches stays local to its window. ``max_reach`` reports the
    furthest time any owned inner run has examined.
    """

    def __init__(
        self,
        costs: CostModel,
        unit1: StorageUnit,
        unit2: StorageUnit,
        final2: float,
        start_time: int,
        end_time: int,
        level2_start: float,
        tol: ToleranceSet,
    ) -> None:
        self.costs = costs
        self.P1 = unit1.rate_P
        self.P2 = unit2.rate_P
        self.rate_cap = unit1.rate_P
        self.capacity2_E = unit2.capacity_E
        self.final2 = final2
        self.start_time = start_time
        self.end_time = end_time
        self.level2_start = level2_start
        self.tol = tol
        self.eps_theta = theta_level_resolution(costs, tol.eps_mu, tol.eps_S)
        slope_lo, slope_hi = _cost_slope_bounds(costs, self.P1 + self.P2)
        window = slice(start_time, end_time)
        self._cummin_lo = np.minimum.accumulate(slope_lo[window])
        self._cummax_hi = np.maximum.accumulate(slope_hi[window])
        self._states: dict[float, _InnerState] = {}

    def state_for(self, mu1: float) -> _InnerState:
        st = self._states.get(mu1)
        if st is None:
            st = _InnerState(self, mu1)
            self._states[mu1] = st
        return st

    @property
    def max_reach(self) -> int:
        if not self._states:
            return self.start_time
        return max(st.run.reach for st in self._states.values())

    def increments(self, theta, upto: int) -> np.ndarray:
        st = self.state_for(float(theta))
        st.ensure(upto)
        return st.run.channels["x1"][self.start_time : upto].copy()

    def sum_increments(self, theta, upto: int) -> float:
        return self.state_for(float(theta)).sum1(upto)

    def bracket(self, upto: int) -> tuple[float, float]:
        i = upto - self.start_time - 1
        return float(self._cummin_lo[i] - 1.0), float(self._cummax_hi[i] + 1.0)

    def refine(self, lo, hi):
        if hi - lo <= self.eps_theta:
            return None
        return 0.5 * (lo + hi)

    def interpolate(self, lo, hi, v_lo, v_hi, target):
        span = v_hi - v_lo
        gap = hi - lo
        if gap <= self.eps_theta or span <= 1e-15 * (abs(v_lo) + abs(v_hi) + 1.0):
            return None
        probe = lo + (target - v_lo) / span * gap
        return min(max(probe, lo + 0.05 * gap), hi - 0.05 * gap)

    def key(self, theta) -> tuple:
        return (float(theta),)

    def exceeds(self, a, b) -> bool:
        return a > b + self.tol.eps_mu


# ---------------------------------------------------------------------------
# public inner solve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InnerSolve:
    """Unit-2 response to a pinned unit-1 reward, with induced unit-1 moves.

    Unit 2's path is feasible for its own constraints and terminal target;
    the induced unit-1 increments ignore unit 1's constraints entirely
    (that is the outer sweep's job).
    """

    mu2: np.ndarray
    kappa2: np.ndarray
    x2: np.ndarray
    x1_induced: np.ndarray
    levels2: np.ndarray
    stages: tuple[StageResult, ...]
    reach: int
    diagnostics: tuple


def inner_solve_unit2(
    instance: ProblemInstance,
    mu1_fixed: float,
    start_time: int = 0,
    start_level2: float | None = None,
    tol: ToleranceSet | None = None,
) -> InnerSolve:
    """Solve unit 2 stagewise under pinned ``mu1``, in instance unit order.

    No unit reordering happens here: ``instance.unit1`` is the pinned unit.
    The sweep covers ``(start_time, T]`` and enforces unit 2's capacity and
    terminal level.
    """
    tol = tol if tol is not None else instance.tol()
    level2 = instance.initial_levels[1] if start_level2 is None else start_level2
    fam = OuterFamily(
        instance.costs,
        instance.unit1,
        instance.unit2,
        instance.final_levels[1],
        start_time,
        instance.T,
        level2,
        tol,
    )
    st = fam.state_for(float(mu1_fixed))
    st.ensure(instance.T)
    run = st.run
    return InnerSolve(
        mu2=run.channels["mu2"].copy(),
        kappa2=run.channels["kappa2"].copy(),
        x2=run.x.copy(),
        x1_induced=run.channels["x1"].copy(),
        levels2=run.levels.copy(),
        stages=tuple(run.stages),
        reach=run.reach,
        diagnostics=tuple(st.diagnostics),
    )


# ---------------------------------------------------------------------------
# result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiplierPath:
    """Per-time multiplier paths: ``mu1`` scalar, ``nu2 = (mu2, kappa2)``."""

    mu1: np.ndarray
    mu2: np.ndarray
    kappa2: np.ndarray

    def nu2(self, t: int) -> tuple[float, float]:
        return float(self.mu2[t - 1]), float(self.kappa2[t - 1])


@dataclass(frozen=True)
class OuterStage:
    """One committed outer stage with its nested inner sweep.

    ``stage.theta_star`` is the pinned outer multiplier; ``inner_stages``
    are the chosen inner run's stages as far as it was forced (they may
    extend past the committed window). ``state_match`` is None for terminal
    stages and otherwise says whether the inner unit sat at the same-named
    boundary at the decision horizon.
    """

    stage: StageResult
    inner_stages: tuple[StageResult, ...]
    state_match: bool | None
    inner_level_at_tau: float
    inner_target: float


@dataclass(frozen=True)
class DuoHorizons:
    """Outer stage list of a joint solve.

    ``outer_unit`` names the unit (in the caller's numbering) whose
    boundaries drive the outer stages; 0 means the equal-ratio reduction
    solved an aggregate unit instead. Stage contents (multipliers, induced
    increments, inner reports) are expressed in the internal ordering where
    the outer unit is unit 1.
    """

    outer_unit: int
    stages: tuple[OuterStage, ...]

    def decision_horizons(self) -> tuple[int, ...]:
        return tuple(s.stage.decision_tau for s in self.stages)

    def forecast_of(self, t: int) -> int:
        for s in self.stages:
            if s.stage.start_time < t <= s.stage.decision_tau:
                return s.stage.forecast_tau
        raise ValueError(f"time {t} not covered")


@dataclass(frozen=True)
class SolveResult:
    strategy: Strategy
    multipliers: MultiplierPath
    horizons: DuoHorizons
    diagnostics: tuple
    certificate: object
    audit: tuple = ()
    notes: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# state match
# ---------------------------------------------------------------------------


def _match_inner(level2: float, capacity2: float, final2: float, boundary: Boundary, eps_S: float):
    if boundary is Boundary.TERMINAL:
        return True, final2
    target = capacity2 if boundary is Boundary.FULL else 0.0
    return abs(level2 - target) <= max(eps_S, 1e-9 * (1.0 + abs(target))), target


def state_match_check(
    strategy: Strategy,
    instance: ProblemInstance,
    tau1: int,
    boundary: Boundary,
    outer_unit: int = 1,
    tol: ToleranceSet | None = None,
) -> StateMatchRecord:
    """Does the inner unit sit at the outer unit's same-named boundary at ``tau1``?

    Full means the inner unit at its own capacity, Empty at zero; terminal
    horizons always match (both units are pinned there by construction).
    """
    tol = tol if tol is not None else instance.tol()
    inner_unit = 2 if outer_unit == 1 else 1
    level2 = float(strategy.levels(inner_unit)[tau1])
    capacity2 = instance.unit(inner_unit).capacity_E
    final2 = instance.final_levels[inner_unit - 1]
    matched, target = _match_inner(level2, capacity2, final2, boundary, tol.eps_S)
    return StateMatchRecord(
        time=tau1, boundary=boundary, matched=bool(matched),
        inner_level=level2, inner_target=target,
    )


# ---------------------------------------------------------------------------
# joint solve
# ---------------------------------------------------------------------------


def _audit_ladders(
    fam: OuterFamily,
    chosen: _InnerState,
    res: StageResult,
    costs: CostModel,
    tol: ToleranceSet,
    points: int,
    diagnostics: list,
) -> list[AuditRecord]:
    """Fixed-grid monotonicity sweep of the three families over one stage."""
    records: list[AuditRecord] = []
    upto = res.forecast_tau
    eps = tol.eps_x

    def check(name: str, vectors: list[np.ndarray]) -> None:
        violations = 0
        worst = 0.0
        for a, b in zip(vectors, vectors[1:]):
            drop = float(np.max(a - b)) if a.size else 0.0
            if drop > eps:
                violations += 1
                worst = max(worst, drop)
        records.append(
            AuditRecord(
                family=name,
                stage_start=res.start_time,
                points=len(vectors),
                violations=violations,
                worst_drop=worst,
            )
        )
        if violations:
            diagnostics.append(
                MonotonicityViolation(
                    context=f"audit:{name}",
                    time=upto,
                    worst_drop=worst,
                    samples=(),
                )
            )

    # outer mu1 ladder: each point forces its own inner run
    lo, hi = fam.bracket(upto)
    grid = np.linspace(lo, hi, points)
    check("outer_mu1", [fam.increments(float(m), upto) for m in grid])

    # lexicographic inner ladders at the pinned mu1, one per inner stage
    mu1 = float(res.theta_star)
    for inner in chosen.run.stages:
        if inner.start_time >= res.decision_tau:
            break
        lexfam = Lex2Family(
            costs, mu1, fam.P1, fam.P2, inner.start_time, fam.end_time, tol.eps_mu
        )
        l2, h2 = lexfam.bracket(inner.forecast_tau)
        if not (l2[0] < mu1 < h2[0]):
            # The tie value sits outside the active bracket, so the tie
            # coordinate never matters; a plain mu ladder is the honest probe.
            ladder = [(float(m), 0.5) for m in np.linspace(l2[0], h2[0], points)]
        else:
            half = (points - 2) // 2
            ladder = (
                [(float(m), 0.0) for m in np.linspace(l2[0], mu1, half, endpoint=False)]
                + [(mu1, 0.0), (mu1, 0.5), (mu1, 1.0)]
                + [(float(m), 1.0) for m in np.linspace(mu1, h2[0], half + 1)[1:]]
            )
        check(
            f"inner_lex@{inner.start_time}",
            [lexfam.increments(th, inner.forecast_tau) for th in ladder],
        )

    # plain scalar ladders for each unit's own pointwise map
    for name, P in (("single_u1", fam.P1), ("single_u2", fam.P2)):
        slope_lo, slope_hi = _cost_slope_bounds(costs, P)
        w = slice(res.start_time, upto)
        mlo = float(np.min(slope_lo[w])) - 1.0
        mhi = float(np.max(slope_hi[w])) + 1.0
        vecs = []
        for m in np.linspace(mlo, mhi, points):
            if costs.kind == "quadratic":
                vecs.append(
                    _kernels.q_single_increments(
                        costs.prices[res.start_time : upto], costs.impact_lambda, float(m), P
                    )
                )
            else:
                from .scalar import xhat_single

                vecs.append(
                    np.array([
                        xhat_single(t, float(m), P, costs)
                        for t in range(res.start_time + 1, upto + 1)
                    ])
                )
        check(name, vecs)

    return records


def _prefer_mu(lo: float, hi: float) -> float:
    """Interior preference for a multiplier interval, tolerating open ends."""
    if lo == -math.inf and hi == math.inf:
        return 0.0
    if lo == -math.inf:
        return hi
    if hi == math.inf:
        return lo
    return 0.5 * (lo + hi)


def _chain_select(windows: list[tuple[int, int, float, float, str | None]], slack: float):
    """One value per window, inside its interval, honouring junction order.

    ``windows`` entries are ``(a, b, lo, hi, direction)`` with ``direction``
    the constraint across the junction after the window: "down" means the
    next value may not exceed this one, "up" the reverse, None unconstrained.
    Forward pass intersects each interval with what the previous window's
    reachable set lets through its junction; backward pass pins values from
    the last window back, clipping each preference against the already
    pinned right neighbour. Intervals empty by at most ``slack`` collapse to
    their midpoint, since committed levels only pin marginal costs to that
    accuracy. Returns None when some reachable interval is empty beyond the
    slack, i.e. no direction-consistent assignment exists.
    """
    reach: list[tuple[float, float]] = []
    for w, (_, _, lo, hi, _) in enumerate(windows):
        if w:
            prev_dir = windows[w - 1][4]
            p_lo, p_hi = reach[w - 1]
            if prev_dir == "down":
                hi = min(hi, p_hi)
            elif prev_dir == "up":
                lo = max(lo, p_lo)
        if lo > hi + slack:
            return None
        if lo > hi:
            lo = hi = 0.5 * (lo + hi)
        reach.append((lo, hi))
    chosen = [0.0] * len(windows)
    nxt: float | None = None
    for w in range(len(windows) - 1, -1, -1):
        lo, hi = reach[w]
        jlo = jhi = None
        if nxt is not None:
            if windows[w][4] == "down":
                jlo = nxt
                lo = max(lo, nxt)
            elif windows[w][4] == "up":
                jhi = nxt
                hi = min(hi, nxt)
        if lo > hi + slack:
            return None
        if lo > hi:
            # Collapse inside the slack, but never across the junction bound:
            # slackness is checked at eps_mu, so that side must hold exactly.
            mid = 0.5 * (lo + hi)
            if jlo is not None and mid < jlo:
                mid = jlo
            elif jhi is not None and mid > jhi:
                mid = jhi
            lo = hi = mid
        c = min(max(_prefer_mu(windows[w][2], windows[w][3]), lo), hi)
        chosen[w] = c
        nxt = c
    return chosen


def _witness_mu(
    levels: np.ndarray,
    x_own: np.ndarray,
    xi: np.ndarray,
    unit: StorageUnit,
    costs: CostModel,
    tol: ToleranceSet,
) -> np.ndarray:
    """Stagewise-constant multiplier path recovered from a committed strategy.

    The searches produce each stage's multiplier through separate runs whose
    independent stopping errors disagree across stage junctions by more than
    eps_mu, so they cannot serve as the certificate witness directly. The
    strategy itself pins a coherent one: within every window between
    boundary touches the multiplier must lie between the worst one-sided
    marginal costs at the times the unit can still move, and across a touch
    it may only step in the direction that boundary allows. Those intervals
    plus step directions form a chain; :func:`_chain_select` picks a
    consistent assignment whenever one exists, which keeps both slackness
    and the stationarity residual at the noise floor whenever the strategy
    is in fact stagewise optimal. When no consistent assignment exists the
    fallback clips interval midpoints greedily left to right, so slackness
    still holds exactly and the residual carries the incoherence.
    """
    T = x_own.size
    E, P = unit.capacity_E, unit.rate_P
    eps_clamp = max(tol.eps_x, tol.eps_S)
    windows: list[tuple[int, int, float, float, str | None]] = []
    a = 0
    for b in range(T):
        s_after = float(levels[b + 1])
        near0 = abs(s_after) <= tol.eps_S
        nearE = abs(s_after - E) <= tol.eps_S
        if not (near0 or nearE) and b < T - 1:
            continue
        lo, hi = -math.inf, math.inf
        for i in range(a, b + 1):
            x = float(x_own[i])
            v = float(xi[i])
            if x < P - eps_clamp:
                hi = min(hi, costs.slope_plus(i + 1, v))
            if x > -P + eps_clamp:
                lo = max(lo, costs.slope_minus(i + 1, v))
        if near0 and not nearE:
            direction = "down"
        elif nearE and not near0:
            direction = "up"
        else:
            direction = None
        windows.append((a, b, lo, hi, direction))
        a = b + 1

    # Committed levels pin marginal costs only to curvature times the level
    # accuracy, and a boundary snap may additionally move one interior
    # increment per stage by up to the snap tolerance (4 eps_S), so interval
    # intersections inherit both slacks.
    if costs.kind == "quadratic":
        curvature = 2.0 * costs.impact_lambda * float(np.max(costs.prices))
    else:
        span = float(np.max(np.abs(xi))) if xi.size else 0.0
        curvature = 0.0
        if span > 0.0:
            curvature = max(
                (costs.slope_plus(t, span) - costs.slope_minus(t, -span)) / (2.0 * span)
                for t in range(1, T + 1)
            )
    chosen = _chain_select(windows, tol.eps_mu + curvature * (eps_clamp + 4.0 * tol.eps_S))
    if chosen is None:
        chosen = []
        prev_c: float | None = None
        prev_dir: str | None = None
        for _, _, lo, hi, direction in windows:
            c = _prefer_mu(lo, hi)
            if prev_c is not None:
                if prev_dir == "down":
                    c = min(c, prev_c)
                elif prev_dir == "up":
                    c = max(c, prev_c)
            chosen.append(c)
            prev_c = c
            prev_dir = direction

    mu = np.empty(T)
    for (a, b, _, _, _), c in zip(windows, chosen):
        mu[a : b + 1] = c
    return mu


def solve_two(
    instance: ProblemInstance,
    tol: ToleranceSet | None = None,
    audit: bool = False,
    audit_points: int = 100,
) -> SolveResult:
    """Jointly optimal dispatch of both units, with certificate and horizons.

    Validates the instance, orders the units by duration ratio, diverts
    exactly proportionally split equal-ratio instances to
    :func:`reduce_equal_ratio`, and otherwise runs the nested outer/inner
    stagewise construction described in the module docstring. The returned
    strategy and multiplier paths are in the caller's unit order; the
    certificate is computed on exactly what is returned.
    """
    report = validate_instance(instance)
    if not report.ok:
        raise InvalidInstanceError("; ".join(report.violations))
    tol = tol if tol is not None else instance.tol()

    notes: list[str] = []
    order = order_units(instance.unit1, instance.unit2)
    if order.equal_ratio:
        alpha = instance.unit1.capacity_E / (
            instance.unit1.capacity_E + instance.unit2.capacity_E
        )
        consistent = all(
            abs(pair[0] - alpha * (pair[0] + pair[1])) <= max(tol.eps_S, 1e-9)
            for pair in (instance.initial_levels, instance.final_levels)
        )
        if consistent:
            return reduce_equal_ratio(instance, tol)
        notes.append(
            "equal duration ratios with non-proportional boundary levels: "
            "nested construction run with arbitrary unit order"
        )

    swapped = order.swapped
    u1, u2 = order.unit1, order.unit2
    idx1, idx2 = (2, 1) if swapped else (1, 2)
    init1 = instance.initial_levels[idx1 - 1]
    init2 = instance.initial_levels[idx2 - 1]
    fin1 = instance.final_levels[idx1 - 1]
    fin2 = instance.final_levels[idx2 - 1]
    T = instance.T
    costs = instance.costs

    diagnostics: list = []
    audit_records: list[AuditRecord] = []
    levels1 = np.full(T + 1, np.nan)
    levels2 = np.full(T + 1, np.nan)
    levels1[0] = init1
    levels2[0] = init2
    x1 = np.full(T, np.nan)
    x2 = np.full(T, np.nan)
    mu1 = np.full(T, np.nan)
    mu2 = np.full(T, np.nan)
    kappa2 = np.full(T, np.nan)
    outer_stages: list[OuterStage] = []

    pos = 0
    lev1, lev2 = init1, init2
    while pos < T:
        fam = OuterFamily(costs, u1, u2, fin2, pos, T, lev2, tol)
        res = run_stage(fam, pos, lev1, u1.capacity_E, (T, fin1), tol, diagnostics)
        theta1 = float(res.theta_star)
        st = fam.state_for(theta1)
        tau1 = res.decision_tau
        st.ensure(tau1)
        diagnostics.extend(st.diagnostics)

        seg1 = lev1 + np.cumsum(res.prefix_increments)
        target1 = {
            Boundary.FULL: u1.capacity_E,
            Boundary.EMPTY: 0.0,
            Boundary.TERMINAL: fin1,
        }[res.boundary]
        if abs(seg1[-1] - target1) <= max(4.0 * tol.eps_S, 1e-9 * (1.0 + abs(target1))):
            miss1 = target1 - float(seg1[-1])
            seg1[-1] = target1
            if miss1 != 0.0 and len(seg1) > 1:
                repair_rate_cap(seg1, lev1, miss1, u1.rate_P, u1.capacity_E, tol)
        levels1[pos + 1 : tau1 + 1] = seg1
        prev1 = np.concatenate(([lev1], seg1[:-1]))
        x1[pos:tau1] = seg1 - prev1
        levels2[pos + 1 : tau1 + 1] = st.run.levels[pos + 1 : tau1 + 1]
        x2[pos:tau1] = st.run.x[pos:tau1]
        mu1[pos:tau1] = theta1
        mu2[pos:tau1] = st.run.channels["mu2"][pos:tau1]
        kappa2[pos:tau1] = st.run.channels["kappa2"][pos:tau1]

        lev2_at_tau = float(st.run.levels[tau1])
        matched, target2 = _match_inner(
            lev2_at_tau, u2.capacity_E, fin2, res.boundary, tol.eps_S
        )
        if res.boundary is not Boundary.TERMINAL and not matched:
            diagnostics.append(
                StateMatchFailure(
                    time=tau1, boundary=res.boundary,
                    inner_level=lev2_at_tau, inner_target=target2,
                )
            )

        reach = max(res.forecast_tau, fam.max_reach)
        res_reported = replace(res, forecast_tau=reach)
        if audit:
            audit_records.extend(
                _audit_ladders(fam, st, res, costs, tol, audit_points, diagnostics)
            )
        outer_stages.append(
            OuterStage(
                stage=res_reported,
                inner_stages=tuple(st.run.stages),
                state_match=None if res.boundary is Boundary.TERMINAL else bool(matched),
                inner_level_at_tau=lev2_at_tau,
                inner_target=target2,
            )
        )
        pos = tau1
        lev1 = float(levels1[tau1])
        lev2 = float(levels2[tau1])

    if swapped:
        strategy = Strategy(levels1=levels2, levels2=levels1)
        kappa_out = 1.0 - kappa2
        outer_unit = 2
    else:
        strategy = Strategy(levels1=levels1, levels2=levels2)
        kappa_out = kappa2
        outer_unit = 1

    # The committed strategy, not the raw search channels, defines the
    # certified multiplier paths; see _witness_mu.
    xi = strategy.increments1 + strategy.increments2
    multipliers = MultiplierPath(
        mu1=_witness_mu(strategy.levels1, strategy.increments1, xi, instance.unit1, costs, tol),
        mu2=_witness_mu(strategy.levels2, strategy.increments2, xi, instance.unit2, costs, tol),
        kappa2=kappa_out,
    )

    certificate = verify.certify(strategy, multipliers, instance, tol)
    return SolveResult(
        strategy=strategy,
        multipliers=multipliers,
        horizons=DuoHorizons(outer_unit=outer_unit, stages=tuple(outer_stages)),
        diagnostics=tuple(diagnostics),
        certificate=certificate,
        audit=tuple(audit_records),
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# equal-ratio reduction
# ---------------------------------------------------------------------------


def reduce_equal_ratio(instance: ProblemInstance, tol: ToleranceSet | None = None) -> SolveResult:
    """Solve an equal-duration instance by aggregation and proportional split.

    Requires ``E1/P1 = E2/P2`` and boundary levels split in proportion
    ``alpha_share = E1/(E1+E2)``; anything else is a misuse error. The
    aggregate unit ``(E1+E2, P1+P2)`` is solved singly; scaling its path by
    the shares keeps every per-time combined increment identical, so the
    joint cost equals the aggregate cost exactly. The tie coordinate per
    time is recovered by inverting the tie-segment interpolation.
    """
    tol = tol if tol is not None else instance.tol()
    report = validate_instance(instance)
    if not report.ok:
        raise InvalidInstanceError("; ".join(report.violations))
    u1, u2 = instance.unit1, instance.unit2
    r1, r2 = u1.ratio(), u2.ratio()
    if abs(r1 - r2) > _RATIO_EQ_REL * max(abs(r1), abs(r2)):
        raise InvalidInstanceError(
            f"reduce_equal_ratio requires equal duration ratios, got {r1} and {r2}"
        )
    alpha = u1.capacity_E / (u1.capacity_E + u2.capacity_E)
    for name, pair in (("initial", instance.initial_levels), ("final", instance.final_levels)):
        if abs(pair[0] - alpha * (pair[0] + pair[1])) > max(tol.eps_S, 1e-9):
            raise InvalidInstanceError(
                f"{name} levels are not split in proportion alpha_share = {alpha:.12g}"
            )

    agg = StorageUnit(
        capacity_E=u1.capacity_E + u2.capacity_E, rate_P=u1.rate_P + u2.rate_P
    )
    single = solve_single(
        agg,
        instance.costs,
        instance.initial_levels[0] + instance.initial_levels[1],
        instance.final_levels[0] + instance.final_levels[1],
        tol=tol,
    )
    levels1 = alpha * single.levels
    levels2 = (1.0 - alpha) * single.levels
    strategy = Strategy(levels1=levels1, levels2=levels2)

    T = instance.T
    xi = np.diff(single.levels)
    kappa = np.zeros(T)
    for t in range(1, T + 1):
        seg = tie_segment(t, float(single.mu_path[t - 1]), u1.rate_P, u2.rate_P, instance.costs)
        span = seg.x1_max - seg.x1_min
        if span > 1e-12 * (1.0 + abs(seg.x1_max)):
            kappa[t - 1] = min(1.0, max(0.0, (seg.x1_max - alpha * xi[t - 1]) / span))
    multipliers = MultiplierPath(
        mu1=single.mu_path.copy(), mu2=single.mu_path.copy(), kappa2=kappa
    )

    outer = tuple(
        OuterStage(
            stage=s,
            inner_stages=(),
            state_match=None if s.boundary is Boundary.TERMINAL else True,
            inner_level_at_tau=float(levels2[s.decision_tau]),
            inner_target=(
                instance.final_levels[1]
                if s.boundary is Boundary.TERMINAL
                else (u2.capacity_E if s.boundary is Boundary.FULL else 0.0)
            ),
        )
        for s in single.horizons.stages
    )
    certificate = verify.certify(strategy, multipliers, instance, tol)
    return SolveResult(
        strategy=strategy,
        multipliers=multipliers,
        horizons=DuoHorizons(outer_unit=0, stages=outer),
        diagnostics=tuple(single.diagnostics),
        certificate=certificate,
        notes=("equal-ratio aggregate reduction, alpha_share = %.12g" % alpha,),
    )


# ---------------------------------------------------------------------------
# near-separable comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeparableReport:
    cost_joint: float
    cost_single1: float
    cost_single2: float
    gap_abs: float
    gap_rel: float


def _own_cost(costs: CostModel, increments: np.ndarray) -> float:
    """Cost of one unit trading alone (the other idle)."""
    if costs.kind == "quadratic":
        p = costs.prices
        lam = costs.impact_lambda
        return float(np.sum((p + lam * p * increments) * increments))
    return float(
        sum(costs.value(t, float(increments[t - 1])) for t in range(1, costs.horizon_T + 1))
    )


def near_separable_compare(instance: ProblemInstance, tol: ToleranceSet | None = None) -> SeparableReport:
    """Joint solve versus two independent single-unit solves.

    With vanishing impact the coupling term disappears and the two costs
    agree; the report carries the absolute and relative gaps so callers can
    assert the regime they expect.
    """
    tol = tol if tol is not None else instance.tol()
    joint = solve_two(instance, tol)
    from .core import total_cost

    cj = total_cost(joint.strategy, instance)
    singles = []
    for j in (1, 2):
        res = solve_single(
            instance.unit(j),
            instance.costs,
            instance.initial_levels[j - 1],
            instance.final_levels[j - 1],
        )
        singles.append(_own_cost(instance.costs, np.diff(res.levels)))
    gap = cj - (singles[0] + singles[1])
    return SeparableReport(
        cost_joint=cj,
        cost_single1=singles[0],
        cost_single2=singles[1],
        gap_abs=gap,
        gap_rel=abs(gap) / max(1.0, abs(cj)),
    )
