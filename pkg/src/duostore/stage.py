"""Stagewise decomposition of storage dispatch via multiplier envelopes.

The optimal dispatch of one storage unit (or one coordinate of the joint
problem) against convex per-step costs has a classic structure: between
boundary events the level path is generated by a *constant* multiplier
``theta`` through the pointwise minimizers of :mod:`duostore.scalar`, and the
multiplier may only decrease across a time where the unit is empty and only
increase across a time where it is full.

This module implements the construction of those segments. The object swept
is a :class:`MonotoneIncrementFamily`: a parametric family of increment
vectors, nondecreasing (componentwise) in an ordered parameter. For each
scanned time ``t`` two boundary parameters are computed by monotone search:

* ``mu_minus(t)``: the smallest parameter keeping the level at ``t`` at or
  above the lower bound (0, or the final target at ``t = T``),
* ``mu_plus(t)``: the largest parameter keeping the level at ``t`` at or
  below the upper bound (capacity, or the final target at ``t = T``).

A constant parameter serves the whole prefix while the running envelope
``[L_t, U_t] = [max mu_minus, min mu_plus]`` stays nonempty. The first time
it crosses, the binding side fixes the parameter, the latest boundary touch
before the crossing becomes the *decision horizon* ``tau`` (the prefix is
committed through it), and the crossing time is the *forecast horizon*
``tau_bar``: data beyond it was never examined, so it cannot change the
committed prefix. If the envelope survives to ``T`` the stage is terminal.

Vacuous constraints (a bound that holds for every parameter in the bracket)
contribute nothing to the envelope; the searches report them as ``None``
internally. The public :func:`boundary_multiplier` maps a vacuous search to
the corresponding bracket end, which is the infimum/supremum over the
bracketed parameter interval.
"""

from __future__ import annotations

import enum
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .core import (
    CostModel,
    InfeasibleProblemError,
    InvalidInstanceError,
    StorageUnit,
    ToleranceSet,
)

__all__ = [
    "Mode",
    "Boundary",
    "StageResult",
    "HorizonReport",
    "MonotoneIncrementFamily",
    "ScalarFamily",
    "MonotonicityViolation",
    "BoundaryTouchMiss",
    "SnapAnomaly",
    "boundary_multiplier",
    "run_stage",
    "repair_rate_cap",
    "theta_level_resolution",
    "StagewiseRun",
    "SingleSolveResult",
    "solve_single",
]


class Mode(enum.Enum):
    AT_LEAST = "at_least"
    AT_MOST = "at_most"


class Boundary(enum.Enum):
    EMPTY = "Empty"
    FULL = "Full"
    TERMINAL = "Terminal"


# ---------------------------------------------------------------------------
# diagnostics records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonotonicityViolation:
    """A boundary search observed the family decreasing where it must not.

    The search falls back to the monotone envelope of its samples; the
    record preserves the raw evidence for the caller's report.
    """

    context: str
    time: int
    worst_drop: float
    samples: tuple[tuple[tuple[float, ...], float], ...]


@dataclass(frozen=True)
class BoundaryTouchMiss:
    """No committed-prefix time touched the crossing boundary within tolerance."""

    boundary: Boundary
    scan_time: int
    nearest_time: int
    nearest_gap: float


@dataclass(frozen=True)
class SnapAnomaly:
    """A committed boundary level missed its nominal value by more than slack."""

    time: int
    boundary: Boundary
    level: float
    target: float


# ---------------------------------------------------------------------------
# increment families
# ---------------------------------------------------------------------------


class MonotoneIncrementFamily(ABC):
    """Parametric increment vectors over a window ``(start_time, end_time]``.

    The parameter is ordered (scalars or lexicographic tuples); increasing it
    must never decrease any increment in the window. Implementations provide
    evaluation, saturation brackets, and the refinement steps used by the
    boundary searches. ``sum_increments`` exists so the hot path can run as
    one fused kernel call instead of materializing vectors.

    ``rate_cap`` bounds every increment's magnitude; the commit path uses it
    to keep boundary snaps from pushing a saturated step past the rate.
    """

    start_time: int
    end_time: int
    rate_cap: float | None = None

    @abstractmethod
    def increments(self, theta, upto: int) -> np.ndarray:
        """Increment vector for times ``start_time + 1 .. upto``."""

    def sum_increments(self, theta, upto: int) -> float:
        return float(np.sum(self.increments(theta, upto)))

    @abstractmethod
    def bracket(self, upto: int) -> tuple:
        """Parameters saturating every increment in the window low and high."""

    @abstractmethod
    def refine(self, lo, hi):
        """A parameter strictly between ``lo`` and ``hi``, or None when resolved."""

    def interpolate(self, lo, hi, v_lo: float, v_hi: float, target: float):
        """Optional value-informed probe strictly inside ``(lo, hi)``."""
        return None

    @abstractmethod
    def key(self, theta) -> tuple:
        """Sort key realizing the parameter order."""

    @abstractmethod
    def exceeds(self, a, b) -> bool:
        """True when ``a`` is above ``b`` by more than the resolution slack."""

    def stage_channels(self, theta, start: int, tau: int) -> dict[str, np.ndarray]:
        """Per-time records a committed stage should persist, times ``(start, tau]``."""
        return {}


def _cost_slope_bounds(costs: CostModel, D: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-time marginal cost at -D and +D, as arrays over t = 1..T."""
    if costs.kind == "quadratic":
        lo = costs.prices * (1.0 - 2.0 * costs.impact_lambda * D)
        hi = costs.prices * (1.0 + 2.0 * costs.impact_lambda * D)
        return lo, hi
    T = costs.horizon_T
    lo = np.array([costs.slope_minus(t, -D) for t in range(1, T + 1)])
    hi = np.array([costs.slope_plus(t, D) for t in range(1, T + 1)])
    return lo, hi


class ScalarFamily(MonotoneIncrementFamily):
    """Single-unit family: ``theta = mu`` maps to ``xhat_single`` per time."""

    def __init__(
        self,
        costs: CostModel,
        rate_P: float,
        start_time: int,
        end_time: int,
        eps_mu: float,
    ) -> None:
        self.costs = costs
        self.rate_P = rate_P
        self.rate_cap = rate_P
        self.start_time = start_time
        self.end_time = end_time
        self.eps_mu = eps_mu
        slope_lo, slope_hi = _cost_slope_bounds(costs, rate_P)
        window = slice(start_time, end_time)
        self._cummin_lo = np.minimum.accumulate(slope_lo[window])
        self._cummax_hi = np.maximum.accumulate(slope_hi[window])

    def increments(self, theta, upto: int) -> np.ndarray:
        if self.costs.kind == "quadratic":
            return _kernels.q_single_increments(
                self.costs.prices[self.start_time : upto],
                self.costs.impact_lambda,
                float(theta),
                self.rate_P,
            )
        from .scalar import xhat_single

        return np.array(
            [xhat_single(t, float(theta), self.rate_P, self.costs)
             for t in range(self.start_time + 1, upto + 1)]
        )

    def sum_increments(self, theta, upto: int) -> float:
        if self.costs.kind == "quadratic":
            return float(
                _kernels.q_single_sum(
                    self.costs.prices[self.start_time : upto],
                    self.costs.impact_lambda,
                    float(theta),
                    self.rate_P,
                )
            )
        return float(np.sum(self.increments(theta, upto)))

    def bracket(self, upto: int) -> tuple[float, float]:
        i = upto - self.start_time - 1
        return float(self._cummin_lo[i] - 1.0), float(self._cummax_hi[i] + 1.0)

    def refine(self, lo, hi):
        if hi - lo <= self.eps_mu:
            return None
        return 0.5 * (lo + hi)

    def interpolate(self, lo, hi, v_lo, v_hi, target):
        span = v_hi - v_lo
        gap = hi - lo
        if gap <= self.eps_mu or span <= 1e-15 * (abs(v_lo) + abs(v_hi) + 1.0):
            return None
        probe = lo + (target - v_lo) / span * gap
        return min(max(probe, lo + 0.05 * gap), hi - 0.05 * gap)

    def key(self, theta) -> tuple:
        return (float(theta),)

    def exceeds(self, a, b) -> bool:
        return a > b + self.eps_mu

    def stage_channels(self, theta, start: int, tau: int) -> dict[str, np.ndarray]:
        return {"mu": np.full(tau - start, float(theta))}


# ---------------------------------------------------------------------------
# boundary searches
# ---------------------------------------------------------------------------


def _monotone_repair(
    samples: list[tuple[tuple, float]],
    target: float,
    mode: Mode,
):
    """Answer a search from the monotone envelope of inconsistent samples."""
    ordered = sorted(samples, key=lambda s: s[0])
    if mode is Mode.AT_LEAST:
        best = -math.inf
        for k, v in ordered:
            best = max(best, v)
            if best >= target:
                return k
        return None
    best = math.inf
    for k, v in reversed(ordered):
        best = min(best, v)
        if best <= target:
            return k
    return None


def _search_boundary(
    family: MonotoneIncrementFamily,
    t: int,
    target: float,
    start_level: float,
    mode: Mode,
    level_tol: float,
    diagnostics: list | None,
    context: str,
    bracket=None,
    bracket_values=None,
):
    """Weak threshold search on ``S_t(theta) = start_level + sum of increments``.

    AT_LEAST returns the smallest parameter with ``S_t >= target`` and
    AT_MOST the largest with ``S_t <= target``, both at the family's
    refinement resolution. Returns None when the constraint is vacuous over
    the bracket; raises :class:`InfeasibleProblemError` when it cannot be met
    anywhere in the bracket. Alternates value-informed probes with midpoint
    refinement so the bracket provably shrinks. Samples are checked for
    monotonicity; an inversion is recorded and repaired via the sample
    envelope rather than trusted.

    ``bracket`` narrows the search to a caller-verified parameter interval,
    with ``bracket_values`` optionally carrying the already-computed levels
    at its ends to save two evaluations.
    """
    lo, hi = bracket if bracket is not None else family.bracket(t)
    if bracket_values is not None:
        v_lo, v_hi = bracket_values
    else:
        v_lo = start_level + family.sum_increments(lo, t)
        v_hi = start_level + family.sum_increments(hi, t)
    samples: list[tuple[tuple, float]] = [(family.key(lo), v_lo), (family.key(hi), v_hi)]

    if mode is Mode.AT_LEAST:
        if v_lo >= target:
            return None
        if v_hi < target:
            raise InfeasibleProblemError(
                f"{context}: level at t={t} cannot reach {target:.6g} "
                f"(max attainable {v_hi:.6g})"
            )
    else:
        if v_hi <= target:
            return None
        if v_lo > target:
            raise InfeasibleProblemError(
                f"{context}: level at t={t} cannot stay at or below {target:.6g} "
                f"(min attainable {v_lo:.6g})"
            )

    use_interp = True
    while True:
        probe = family.refine(lo, hi)
        if probe is None:
            break
        if use_interp:
            cand = family.interpolate(lo, hi, v_lo, v_hi, target)
            if cand is not None:
                probe = cand
        use_interp = not use_interp
        v = start_level + family.sum_increments(probe, t)
        samples.append((family.key(probe), v))
        if mode is Mode.AT_LEAST:
            if v >= target:
                hi, v_hi = probe, v
            else:
                lo, v_lo = probe, v
        else:
            if v <= target:
                lo, v_lo = probe, v
            else:
                hi, v_hi = probe, v

    answer = hi if mode is Mode.AT_LEAST else lo

    worst_drop = 0.0
    ordered = sorted(samples, key=lambda s: s[0])
    running = -math.inf
    for _, v in ordered:
        if running - v > worst_drop:
            worst_drop = running - v
        running = max(running, v)
    if worst_drop > level_tol:
        if diagnostics is not None:
            diagnostics.append(
                MonotonicityViolation(
                    context=context,
                    time=t,
                    worst_drop=worst_drop,
                    samples=tuple(ordered),
                )
            )
        repaired = _monotone_repair(samples, target, mode)
        if repaired is not None:
            return _key_to_theta(repaired)
    return answer


def _key_to_theta(key):
    """Map a sample key back to the parameter that produced it.

    Keys are exactly the ``family.key`` images of probed parameters, and
    for both family kinds the key is the parameter up to tuple wrapping.
    """
    if len(key) == 1:
        return key[0]
    return key


def boundary_multiplier(
    family: MonotoneIncrementFamily,
    t: int,
    target: float,
    start_level: float,
    mode: Mode,
    diagnostics: list | None = None,
    level_tol: float = 0.0,
) -> float:
    """Threshold parameter for one level constraint at time ``t``.

    The infimum (AT_LEAST) or supremum (AT_MOST) over the family's bracket
    of the parameters satisfying the constraint; a constraint satisfied over
    the whole bracket yields the corresponding bracket end.
    """
    tol = level_tol if level_tol > 0.0 else 1e-12 * (1.0 + abs(target))
    res = _search_boundary(
        family, t, target, start_level, mode, tol, diagnostics, "boundary_multiplier"
    )
    if res is None:
        lo, hi = family.bracket(t)
        return lo if mode is Mode.AT_LEAST else hi
    return res


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageResult:
    """One committed segment of a stagewise solve.

    ``theta_star`` generated the increments; ``decision_tau`` is the last
    committed time (the level there sits on the named boundary), and
    ``forecast_tau`` the last time whose cost data the stage examined.
    ``prefix_increments`` covers ``(start_time, decision_tau]``.
    Invariant: ``start_time < decision_tau <= forecast_tau <= T``.
    """

    start_time: int
    start_level: float
    theta_star: object
    decision_tau: int
    forecast_tau: int
    boundary: Boundary
    prefix_increments: np.ndarray

    def __post_init__(self) -> None:
        if not (self.start_time < self.decision_tau <= self.forecast_tau):
            raise ValueError(
                f"stage ordering violated: start {self.start_time}, "
                f"tau {self.decision_tau}, tau_bar {self.forecast_tau}"
            )
        if len(self.prefix_increments) != self.decision_tau - self.start_time:
            raise ValueError("prefix_increments length must equal decision_tau - start_time")


@dataclass(frozen=True)
class HorizonReport:
    """Contiguous stages covering ``(start, T]``; the last one is terminal."""

    stages: tuple[StageResult, ...]

    def __post_init__(self) -> None:
        for a, b in zip(self.stages, self.stages[1:]):
            if b.start_time != a.decision_tau:
                raise ValueError("stages must be contiguous")
        if self.stages and self.stages[-1].boundary is not Boundary.TERMINAL:
            raise ValueError("the last stage must be terminal")

    def decision_horizons(self) -> tuple[int, ...]:
        return tuple(s.decision_tau for s in self.stages)

    def forecast_of(self, t: int) -> int:
        """Forecast horizon of the stage whose committed window contains ``t``."""
        for s in self.stages:
            if s.start_time < t <= s.decision_tau:
                return s.forecast_tau
        raise ValueError(f"time {t} not covered by this report")


def run_stage(
    family: MonotoneIncrementFamily,
    start_time: int,
    start_level: float,
    capacity_E: float,
    terminal: tuple[int, float],
    tol: ToleranceSet,
    diagnostics: list | None = None,
) -> StageResult:
    """Scan forward from ``start_time`` until the multiplier envelope crosses.

    Implements the envelope reconstruction described in the module
    docstring. Each scan time costs two level evaluations, one per envelope
    end; a boundary search only runs when its end actually violates the
    floor or the cap at the new time, and then it searches inside the
    current envelope rather than the whole bracket. On a crossing at ``t*``
    the parameter is pinned to the side that remained feasible (``U``
    before a Full crossing, ``L`` before an Empty one); without a crossing
    the stage is terminal at ``T`` and the parameter is pinned to the
    envelope's lower end, which meets the final target exactly whenever the
    level is strictly increasing through it.
    """
    T, final_level = terminal
    if not (start_time < T):
        raise ValueError(f"stage must start before the horizon: {start_time} >= {T}")
    L = None
    U = None
    for t in range(start_time + 1, T + 1):
        if t < T:
            target_lo, target_hi = 0.0, capacity_E
        else:
            target_lo = target_hi = final_level
        # A side without a bound yet falls back to the feasibility bracket
        # so vacuity keeps its whole-bracket meaning.
        br = family.bracket(t) if (L is None or U is None) else None
        lo_t = L if L is not None else br[0]
        hi_t = U if U is not None else br[1]
        v_lo = start_level + family.sum_increments(lo_t, t)
        v_hi = start_level + family.sum_increments(hi_t, t)
        if U is not None and v_hi < target_lo:
            # Even the envelope's upper end sinks below the floor, so the
            # floor multiplier has climbed past the cap one.
            return _commit_crossing(
                family, start_time, start_level, U, t, Boundary.FULL,
                capacity_E, tol, diagnostics,
            )
        if L is not None and v_lo > target_hi:
            return _commit_crossing(
                family, start_time, start_level, L, t, Boundary.EMPTY,
                0.0, tol, diagnostics,
            )
        mu_minus = None
        mu_plus = None
        if v_lo < target_lo:
            mu_minus = _search_boundary(
                family, t, target_lo, start_level, Mode.AT_LEAST, tol.eps_S,
                diagnostics, f"run_stage lower@{t}",
                bracket=(lo_t, hi_t), bracket_values=(v_lo, v_hi),
            )
        if v_hi > target_hi:
            mu_plus = _search_boundary(
                family, t, target_hi, start_level, Mode.AT_MOST, tol.eps_S,
                diagnostics, f"run_stage upper@{t}",
                bracket=(lo_t, hi_t), bracket_values=(v_lo, v_hi),
            )
        if mu_minus is not None and mu_plus is not None and family.exceeds(mu_minus, mu_plus):
            # The searches stop within a level tolerance each, so their
            # parameters can cross by noise when the feasible window pinches
            # (at t = T both target the same final level). Arbitrate in level
            # space: if the floor parameter also respects the cap to snap
            # accuracy, collapse the envelope to it instead of raising.
            v_chk = start_level + family.sum_increments(mu_minus, t)
            slack = max(4.0 * tol.eps_S, 1e-9 * (1.0 + abs(target_hi)))
            if v_chk > target_hi + slack:
                raise InfeasibleProblemError(
                    f"conflicting bounds at t={t}: needs parameter above {mu_minus} "
                    f"and below {mu_plus}"
                )
            mu_plus = mu_minus
        if mu_minus is not None and (L is None or family.key(mu_minus) > family.key(L)):
            L = mu_minus
        if mu_plus is not None and (U is None or family.key(mu_plus) < family.key(U)):
            U = mu_plus

    theta = L if L is not None else U
    if theta is None:
        # Both envelope sides vacuous over the whole window: any parameter
        # works; report the low bracket end for determinism.
        theta = family.bracket(T)[0]
    xs = family.increments(theta, T)
    return StageResult(
        start_time=start_time,
        start_level=start_level,
        theta_star=theta,
        decision_tau=T,
        forecast_tau=T,
        boundary=Boundary.TERMINAL,
        prefix_increments=xs,
    )


def _commit_crossing(
    family: MonotoneIncrementFamily,
    start_time: int,
    start_level: float,
    theta,
    cross_t: int,
    boundary: Boundary,
    bound_level: float,
    tol: ToleranceSet,
    diagnostics: list | None,
) -> StageResult:
    """Pin the stage parameter and locate the decision horizon."""
    xs = family.increments(theta, cross_t - 1)
    levels = start_level + np.cumsum(xs)
    touch_tol = max(tol.eps_S, 1e-9 * (1.0 + abs(bound_level)))
    gaps = np.abs(levels - bound_level)
    touches = np.flatnonzero(gaps <= touch_tol)
    if touches.size:
        tau = start_time + 1 + int(touches[-1])
    else:
        nearest = int(np.argmin(gaps))
        if diagnostics is not None:
            diagnostics.append(
                BoundaryTouchMiss(
                    boundary=boundary,
                    scan_time=cross_t,
                    nearest_time=start_time + 1 + nearest,
                    nearest_gap=float(gaps[nearest]),
                )
            )
        tau = start_time + 1 + nearest
    return StageResult(
        start_time=start_time,
        start_level=start_level,
        theta_star=theta,
        decision_tau=tau,
        forecast_tau=cross_t,
        boundary=boundary,
        prefix_increments=xs[: tau - start_time],
    )


# ---------------------------------------------------------------------------
# stagewise driver
# ---------------------------------------------------------------------------


def repair_rate_cap(
    seg: np.ndarray,
    start_level: float,
    delta: float,
    cap: float,
    capacity_E: float,
    tol: ToleranceSet,
) -> None:
    """Move a boundary snap off the final step without blurring any class.

    Snapping a segment's last level moves the final increment by the miss
    ``delta``, which can push a step already at ``±cap`` past the rate, or
    leave it a hair inside a genuine clamp where the certificate's
    movability classification flips. Shifting a suffix of levels by
    ``delta`` transfers the miss to the first earlier step that is firmly
    interior: pass-through steps keep their exact values (both ends move
    together) and the absorber stays clear of the saturation band. Levels
    that would shift into or out of a boundary-touch band veto the
    transfer, leaving the miss on the final step for the certificate to
    judge; segments saturated end to end do the same.
    """
    n = len(seg)
    eps_clamp = max(tol.eps_x, tol.eps_S)
    keep = 2.0 * eps_clamp + abs(delta)
    band = max(tol.eps_S, 1e-9 * (1.0 + capacity_E)) + abs(delta)
    prev = start_level if n == 1 else float(seg[n - 2])
    if abs(float(seg[n - 1]) - delta - prev) <= cap - keep:
        return
    for k in range(n - 2, -1, -1):
        lev = float(seg[k])
        if (
            abs(lev) <= band
            or abs(lev - capacity_E) <= band
            or abs(lev + delta) <= band
            or abs(lev + delta - capacity_E) <= band
        ):
            return
        prev = start_level if k == 0 else float(seg[k - 1])
        if abs(lev - prev) <= cap - keep:
            seg[k : n - 1] += delta
            return


class StagewiseRun:
    """Drives :func:`run_stage` across the horizon, committing as it goes.

    Lazily extensible: ``ensure(t)`` advances the committed position to at
    least ``t`` (capped at ``T``), so outer searches only pay for the prefix
    they actually examine. Committed boundary levels are snapped to their
    nominal values when within slack; the increments absorb the snap so the
    level path telescopes exactly.

    ``channels`` collects per-time records named by the family (multiplier
    paths, induced increments); ``reach`` tracks the largest time any stage
    scan has examined, which is what forecast-horizon reporting needs.
    """

    def __init__(
        self,
        family_factory: Callable[[int, float], MonotoneIncrementFamily],
        horizon_T: int,
        capacity_E: float,
        final_level: float,
        start_time: int,
        start_level: float,
        tol: ToleranceSet,
        diagnostics: list | None = None,
        channel_names: Sequence[str] = (),
    ) -> None:
        self._factory = family_factory
        self.T = horizon_T
        self.capacity_E = capacity_E
        self.final_level = final_level
        self.start_time = start_time
        self.tol = tol
        self.diagnostics = diagnostics if diagnostics is not None else []
        self.levels = np.full(horizon_T + 1, np.nan)
        self.levels[start_time] = start_level
        self.x = np.full(horizon_T, np.nan)
        self.channels = {name: np.full(horizon_T, np.nan) for name in channel_names}
        self.stages: list[StageResult] = []
        self.pos = start_time
        self.level = float(start_level)
        self.reach = start_time

    def ensure(self, t: int) -> None:
        stop = min(t, self.T)
        while self.pos < stop:
            self._advance()

    def run_all(self) -> None:
        self.ensure(self.T)

    def _advance(self) -> None:
        fam = self._factory(self.pos, self.level)
        res = run_stage(
            fam, self.pos, self.level, self.capacity_E,
            (self.T, self.final_level), self.tol, self.diagnostics,
        )
        self.reach = max(self.reach, res.forecast_tau)
        tau = res.decision_tau
        seg = self.level + np.cumsum(res.prefix_increments)
        target = {
            Boundary.FULL: self.capacity_E,
            Boundary.EMPTY: 0.0,
            Boundary.TERMINAL: self.final_level,
        }[res.boundary]
        snap_tol = max(4.0 * self.tol.eps_S, 1e-9 * (1.0 + abs(target)))
        if abs(seg[-1] - target) <= snap_tol:
            miss = target - float(seg[-1])
            seg[-1] = target
            if miss != 0.0 and fam.rate_cap is not None and len(seg) > 1:
                repair_rate_cap(
                    seg, self.level, miss, fam.rate_cap, self.capacity_E, self.tol
                )
        else:
            self.diagnostics.append(
                SnapAnomaly(time=tau, boundary=res.boundary, level=float(seg[-1]), target=target)
            )
        self.levels[self.pos + 1 : tau + 1] = seg
        prev = np.concatenate(([self.level], seg[:-1]))
        self.x[self.pos : tau] = seg - prev
        for name, values in fam.stage_channels(res.theta_star, self.pos, tau).items():
            self.channels[name][self.pos : tau] = values
        self.stages.append(res)
        self.pos = tau
        self.level = float(seg[-1])


# ---------------------------------------------------------------------------
# single-unit solve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SingleSolveResult:
    levels: np.ndarray
    mu_path: np.ndarray
    horizons: HorizonReport
    diagnostics: tuple


def theta_level_resolution(costs: CostModel, eps_mu: float, eps_S: float) -> float:
    """Parameter resolution fine enough to land levels inside the touch band.

    Threshold searches stop when the parameter bracket closes, but commits
    judge the resulting level against a boundary at ``eps_S`` scale. With
    weak market impact the level responds to the multiplier at up to
    ``sum_t 1/(2 lambda p_t)``, so an ``eps_mu``-wide bracket can leave a
    level residue orders of magnitude past the touch band and the committed
    stage then misses the boundary it was searched to hit. The resolution
    returned keeps that residue at a quarter of ``eps_S``, floored so
    bisection still terminates in floating point.
    """
    if costs.kind != "quadratic" or costs.impact_lambda <= 0.0:
        return eps_mu
    sens = float(np.sum(1.0 / (2.0 * costs.impact_lambda * costs.prices)))
    if sens <= 0.0:
        return eps_mu
    floor = 1e-13 * (1.0 + float(np.max(costs.prices)))
    return max(min(eps_mu, 0.25 * eps_S / sens), floor)


def single_tolerances(unit: StorageUnit, costs: CostModel) -> ToleranceSet:
    """Scale-aware defaults for a one-unit problem (rate stands in for P1+P2)."""
    P = unit.rate_P
    slope_lo, slope_hi = _cost_slope_bounds(costs, P)
    if costs.kind == "quadratic":
        spend = float(np.sum(costs.prices)) * P
    else:
        spend = sum(costs.slope_plus(t, 0.0) for t in range(1, costs.horizon_T + 1)) * P
    return ToleranceSet(
        eps_mu=1e-9 * float(np.max(slope_hi)),
        eps_x=1e-9 * P,
        eps_S=1e-6 * unit.capacity_E,
        eps_cost=1e-6 * spend,
    )


def solve_single(
    unit: StorageUnit,
    costs: CostModel,
    initial_level: float,
    final_level: float,
    tol: ToleranceSet | None = None,
) -> SingleSolveResult:
    """Optimal dispatch of one unit: levels, multiplier path, horizon report.

    The multiplier path is constant inside each stage and the level path
    starts at ``initial_level`` and meets ``final_level`` at ``T`` (up to the
    level slack; committed boundary values are snapped exactly).
    """
    T = costs.horizon_T
    for name, v in (("initial", initial_level), ("final", final_level)):
        if not (0.0 <= v <= unit.capacity_E):
            raise InvalidInstanceError(
                f"{name} level {v} outside [0, {unit.capacity_E}]"
            )
    if abs(final_level - initial_level) > T * unit.rate_P + 1e-12 * unit.capacity_E:
        raise InvalidInstanceError("final level unreachable at maximum rate")
    if tol is None:
        tol = single_tolerances(unit, costs)

    diagnostics: list = []
    eps_theta = theta_level_resolution(costs, tol.eps_mu, tol.eps_S)
    run = StagewiseRun(
        family_factory=lambda pos, level: ScalarFamily(
            costs, unit.rate_P, pos, T, eps_theta
        ),
        horizon_T=T,
        capacity_E=unit.capacity_E,
        final_level=final_level,
        start_time=0,
        start_level=initial_level,
        tol=tol,
        diagnostics=diagnostics,
        channel_names=("mu",),
    )
    run.run_all()
    return SingleSolveResult(
        levels=run.levels,
        mu_path=run.channels["mu"],
        horizons=HorizonReport(stages=tuple(run.stages)),
        diagnostics=tuple(diagnostics),
    )
