"""Domain types and elementary arithmetic for two-unit storage dispatch.

The model: two energy-storage units are operated jointly against a common
electricity price. At each time step ``t`` (1-based, ``t = 1..T``) unit ``j``
buys or sells the energy increment ``x_{j,t}``, bounded by its rate
``|x_{j,t}| <= P_j``. The stored level ``S_{j,t}`` is the running sum of
increments from a fixed starting level and must stay inside ``[0, E_j]``; the
final level ``S_{j,T}`` is pinned to a given target. Because both units trade
in the same market, the purchase cost at time ``t`` depends on the combined
increment ``xi_t = x_{1,t} + x_{2,t}``: the per-step cost is ``C_t(xi_t)``,
convex and increasing in ``xi_t``, and the planning objective is the sum of
the per-step costs over the horizon.

The default cost family models linear market impact on a positive base price:

    C_t(xi) = (p_t + lam * p_t * xi) * xi

i.e. buying pushes the effective price up and selling pushes it down, each in
proportion to the traded volume. Strict convexity requires ``lam > 0`` and
``p_t > 0``; the model is additionally required to keep the effective price
positive over the tradable range, which bounds ``lam * (P_1 + P_2)`` away
from one half.

This module holds the passive data types (units, cost models, instances,
strategies, tolerance bundles), instance validation, total cost evaluation,
and the conversions between increment and level representations. The solver
lives in :mod:`duostore.stage` and :mod:`duostore.duo`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "StorageUnit",
    "CostModel",
    "ToleranceSet",
    "ProblemInstance",
    "Strategy",
    "ValidationReport",
    "InvalidInstanceError",
    "CostDomainError",
    "InfeasibleProblemError",
    "OracleBudgetError",
    "OracleGapError",
    "validate_instance",
    "default_tolerances",
    "total_cost",
    "levels_from_increments",
    "increments_from_levels",
]


class InvalidInstanceError(ValueError):
    """Raised when an operation is handed an instance that fails validation."""


class CostDomainError(ValueError):
    """Raised when a cost function is evaluated outside ``[-(P1+P2), P1+P2]``."""


class InfeasibleProblemError(RuntimeError):
    """Raised when a boundary search cannot bracket a feasible multiplier.

    For validated instances this indicates an internal inconsistency rather
    than expected behaviour, so it carries enough context to reproduce.
    """


class OracleBudgetError(RuntimeError):
    """Raised when a dynamic-programming oracle would exceed its state budget."""


class OracleGapError(AssertionError):
    """Raised when the solver cost exceeds the oracle cost beyond tolerance."""


# ---------------------------------------------------------------------------
# units and costs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StorageUnit:
    """One storage unit: energy capacity ``E`` and per-step rate bound ``P``.

    Both are strictly positive. ``ratio()`` is the duration ``E / P``, the
    number of steps needed to traverse the full capacity at maximum rate; the
    joint solver orders units by this ratio.
    """

    capacity_E: float
    rate_P: float

    def __post_init__(self) -> None:
        if not (self.capacity_E > 0.0) or not math.isfinite(self.capacity_E):
            raise InvalidInstanceError(f"capacity_E must be positive, got {self.capacity_E}")
        if not (self.rate_P > 0.0) or not math.isfinite(self.rate_P):
            raise InvalidInstanceError(f"rate_P must be positive, got {self.rate_P}")

    def ratio(self) -> float:
        return self.capacity_E / self.rate_P


@dataclass(frozen=True)
class CostModel:
    """Per-step trading cost family ``C_t`` on the combined increment.

    Two kinds are supported:

    * ``"quadratic"``: ``C_t(xi) = (p_t + lam * p_t * xi) * xi`` built from a
      price vector and an impact coefficient. This is the fast path; closed
      forms exist for all pointwise minimizers.
    * ``"custom"``: arbitrary convex increasing per-step costs given as
      callables ``value(t, xi)``, ``slope_plus(t, xi)`` and
      ``slope_minus(t, xi)`` (one-sided derivatives, 1-based ``t``). Only the
      convexity actually present in the callables is available to the solver,
      which falls back to derivative-sign bisection for minimizers.

    ``prices`` is stored as a read-only float64 array of length ``horizon_T``.
    """

    horizon_T: int
    kind: str
    prices: np.ndarray | None = None
    impact_lambda: float | None = None
    value_fn: Callable[[int, float], float] | None = None
    slope_plus_fn: Callable[[int, float], float] | None = None
    slope_minus_fn: Callable[[int, float], float] | None = None

    @classmethod
    def quadratic(cls, prices: Sequence[float], impact_lambda: float) -> "CostModel":
        arr = np.asarray(prices, dtype=np.float64).copy()
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidInstanceError("prices must be a non-empty 1-d sequence")
        arr.setflags(write=False)
        return cls(
            horizon_T=int(arr.size),
            kind="quadratic",
            prices=arr,
            impact_lambda=float(impact_lambda),
        )

    @classmethod
    def custom(
        cls,
        horizon_T: int,
        value: Callable[[int, float], float],
        slope_plus: Callable[[int, float], float],
        slope_minus: Callable[[int, float], float] | None = None,
    ) -> "CostModel":
        if horizon_T < 1:
            raise InvalidInstanceError("horizon_T must be at least 1")
        return cls(
            horizon_T=int(horizon_T),
            kind="custom",
            value_fn=value,
            slope_plus_fn=slope_plus,
            slope_minus_fn=slope_minus if slope_minus is not None else slope_plus,
        )

    # -- evaluation --------------------------------------------------------

    def value(self, t: int, xi: float) -> float:
        """Cost of trading the combined increment ``xi`` at time ``t``."""
        if self.kind == "quadratic":
            p = float(self.prices[t - 1])
            return (p + self.impact_lambda * p * xi) * xi
        return float(self.value_fn(t, xi))

    def value_array(self, t: int, xi: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`value` over an array of combined increments."""
        if self.kind == "quadratic":
            p = float(self.prices[t - 1])
            return (p + self.impact_lambda * p * xi) * xi
        return np.array([self.value_fn(t, float(v)) for v in np.ravel(xi)]).reshape(np.shape(xi))

    def slope_plus(self, t: int, xi: float) -> float:
        """Right derivative of ``C_t`` at ``xi``."""
        if self.kind == "quadratic":
            p = float(self.prices[t - 1])
            return p * (1.0 + 2.0 * self.impact_lambda * xi)
        return float(self.slope_plus_fn(t, xi))

    def slope_minus(self, t: int, xi: float) -> float:
        """Left derivative of ``C_t`` at ``xi``."""
        if self.kind == "quadratic":
            return self.slope_plus(t, xi)
        return float(self.slope_minus_fn(t, xi))


@dataclass(frozen=True)
class ToleranceSet:
    """Numerical tolerances used across the solver and the certifier.

    eps_mu    multiplier resolution (bisection stop, envelope-crossing slack)
    eps_x     increment slack for rate-bound checks
    eps_S     level slack for capacity and boundary-level checks
    eps_cost  objective slack for per-step minimization and oracle gaps
    """

    eps_mu: float
    eps_x: float
    eps_S: float
    eps_cost: float

    def __post_init__(self) -> None:
        for name in ("eps_mu", "eps_x", "eps_S", "eps_cost"):
            v = getattr(self, name)
            if not (v > 0.0) or not math.isfinite(v):
                raise InvalidInstanceError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class ProblemInstance:
    """A complete planning problem for two units over a common cost family."""

    unit1: StorageUnit
    unit2: StorageUnit
    costs: CostModel
    initial_levels: tuple[float, float]
    final_levels: tuple[float, float]
    tolerances: ToleranceSet | None = None

    @property
    def T(self) -> int:
        return self.costs.horizon_T

    @property
    def rate_total(self) -> float:
        return self.unit1.rate_P + self.unit2.rate_P

    def unit(self, j: int) -> StorageUnit:
        return self.unit1 if j == 1 else self.unit2

    def tol(self) -> ToleranceSet:
        """The instance tolerances, falling back to :func:`default_tolerances`."""
        if self.tolerances is not None:
            return self.tolerances
        return default_tolerances(self)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate_instance`: ``ok`` plus human-readable violations."""

    ok: bool
    violations: tuple[str, ...] = ()


def default_tolerances(instance: ProblemInstance) -> ToleranceSet:
    """Scale-aware defaults derived from the instance data.

    eps_mu scales with the largest marginal cost at full combined rate,
    eps_x with the combined rate, eps_S with the larger capacity, and
    eps_cost with a horizon-sum bound on per-step spend. For custom costs
    the slope at zero stands in for the base price.
    """
    D = instance.rate_total
    costs = instance.costs
    if costs.kind == "quadratic":
        pmax = float(np.max(costs.prices))
        slope_hi = pmax * (1.0 + 2.0 * costs.impact_lambda * D)
        spend = float(np.sum(costs.prices)) * D
    else:
        slopes0 = [costs.slope_plus(t, 0.0) for t in range(1, costs.horizon_T + 1)]
        slopes_hi = [costs.slope_plus(t, D) for t in range(1, costs.horizon_T + 1)]
        slope_hi = max(slopes_hi)
        spend = sum(slopes0) * D
    return ToleranceSet(
        eps_mu=1e-9 * slope_hi,
        eps_x=1e-9 * D,
        eps_S=1e-6 * max(instance.unit1.capacity_E, instance.unit2.capacity_E),
        eps_cost=1e-6 * spend,
    )


def validate_instance(instance: ProblemInstance) -> ValidationReport:
    """Check the structural preconditions every solver entry point relies on.

    Report style: all violations are collected rather than raising on the
    first. Checks cover positivity of prices, strict convexity with the
    effective price staying positive over the tradable range
    (``lam * (P1 + P2) < 1/2``), boundary levels inside ``[0, E_j]``, and
    reachability of the final level from the initial one within ``T`` steps
    at maximum rate. Custom costs are spot-checked on a coarse grid for
    zero-at-zero, strict increase and midpoint convexity.
    """
    out: list[str] = []
    T = instance.costs.horizon_T
    D = instance.rate_total
    costs = instance.costs

    if costs.kind == "quadratic":
        if costs.prices is None or costs.prices.size != T:
            out.append(f"price vector length {0 if costs.prices is None else costs.prices.size} != horizon {T}")
        else:
            if not np.all(np.isfinite(costs.prices)):
                out.append("prices contain non-finite entries")
            elif float(np.min(costs.prices)) <= 0.0:
                t_bad = int(np.argmin(costs.prices)) + 1
                out.append(f"nonpositive price at t={t_bad}")
        lam = costs.impact_lambda
        if lam is None or not math.isfinite(lam) or lam <= 0.0:
            out.append(f"impact_lambda must be positive, got {lam}")
        elif lam * D >= 0.5:
            out.append(f"impact_lambda*(P1+P2) = {lam * D:.6g} >= 1/2; effective price can reach zero")
    elif costs.kind == "custom":
        grid = np.linspace(-D, D, 17)
        for t in range(1, T + 1):
            vals = [costs.value(t, float(x)) for x in grid]
            if abs(costs.value(t, 0.0)) > 1e-12 * (1.0 + max(abs(v) for v in vals)):
                out.append(f"custom cost at t={t} has C_t(0) != 0")
                break
            if any(b <= a for a, b in zip(vals, vals[1:])):
                out.append(f"custom cost at t={t} is not strictly increasing on the sampled grid")
                break
            mids = [(a + c) / 2.0 - costs.value(t, float((grid[i] + grid[i + 2]) / 2.0))
                    for i, (a, c) in enumerate(zip(vals, vals[2:]))]
            if any(m < -1e-9 * (1.0 + abs(vals[-1])) for m in mids):
                out.append(f"custom cost at t={t} fails midpoint convexity on the sampled grid")
                break
    else:
        out.append(f"unknown cost kind {costs.kind!r}")

    for j, unit in ((1, instance.unit1), (2, instance.unit2)):
        s0 = instance.initial_levels[j - 1]
        sT = instance.final_levels[j - 1]
        for name, v in (("initial", s0), ("final", sT)):
            if not math.isfinite(v) or v < 0.0 or v > unit.capacity_E:
                out.append(f"unit {j} {name} level {v} outside [0, {unit.capacity_E}]")
        if abs(sT - s0) > T * unit.rate_P + 1e-12 * unit.capacity_E:
            out.append(
                f"unit {j} final level unreachable: |{sT} - {s0}| > T*P = {T * unit.rate_P}"
            )

    return ValidationReport(ok=not out, violations=tuple(out))


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


def _as_levels(levels: Sequence[float]) -> np.ndarray:
    arr = np.asarray(levels, dtype=np.float64).copy()
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("levels must be a 1-d sequence with at least the starting entry")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Strategy:
    """Joint dispatch plan, stored as level paths of length ``T + 1``.

    ``levels1[t]`` is unit 1's stored energy after step ``t`` (entry 0 is the
    starting level). Increments are the first differences. Feasibility is a
    property of a strategy *relative to an instance*: see :meth:`feasible`.
    """

    levels1: np.ndarray
    levels2: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels1", _as_levels(self.levels1))
        object.__setattr__(self, "levels2", _as_levels(self.levels2))
        if self.levels1.size != self.levels2.size:
            raise ValueError("levels1 and levels2 must have equal length")

    @property
    def T(self) -> int:
        return self.levels1.size - 1

    def levels(self, j: int) -> np.ndarray:
        return self.levels1 if j == 1 else self.levels2

    @property
    def increments1(self) -> np.ndarray:
        return np.diff(self.levels1)

    @property
    def increments2(self) -> np.ndarray:
        return np.diff(self.levels2)

    @property
    def increments_total(self) -> np.ndarray:
        return self.increments1 + self.increments2

    def feasibility_violations(self, instance: ProblemInstance, eps: float) -> tuple[str, ...]:
        """All constraint violations beyond slack ``eps`` (levels) and rates.

        Rate bounds are checked with the same ``eps`` interpreted as an
        increment slack; callers wanting the asymmetric default should use
        the instance tolerances and call twice. Kept single-knob on purpose:
        the spec-level operation is the one-epsilon predicate.
        """
        out: list[str] = []
        if self.T != instance.T:
            return (f"strategy horizon {self.T} != instance horizon {instance.T}",)
        for j in (1, 2):
            unit = instance.unit(j)
            lv = self.levels(j)
            if abs(lv[0] - instance.initial_levels[j - 1]) > eps:
                out.append(f"unit {j} start level {lv[0]} != {instance.initial_levels[j - 1]}")
            if abs(lv[-1] - instance.final_levels[j - 1]) > eps:
                out.append(f"unit {j} final level {lv[-1]} != {instance.final_levels[j - 1]}")
            lo = float(np.min(lv))
            hi = float(np.max(lv))
            if lo < -eps:
                out.append(f"unit {j} level {lo} below 0")
            if hi > unit.capacity_E + eps:
                out.append(f"unit {j} level {hi} above capacity {unit.capacity_E}")
            xmax = float(np.max(np.abs(np.diff(lv)))) if lv.size > 1 else 0.0
            if xmax > unit.rate_P + eps:
                out.append(f"unit {j} increment {xmax} above rate {unit.rate_P}")
        return tuple(out)

    def feasible(self, instance: ProblemInstance, eps: float) -> bool:
        """True when every constraint holds within slack ``eps``."""
        return not self.feasibility_violations(instance, eps)


def levels_from_increments(start_level: float, increments: Sequence[float]) -> np.ndarray:
    """Level path of length ``len(increments) + 1`` starting at ``start_level``."""
    inc = np.asarray(increments, dtype=np.float64)
    out = np.empty(inc.size + 1, dtype=np.float64)
    out[0] = start_level
    np.cumsum(inc, out=out[1:])
    out[1:] += start_level
    return out


def increments_from_levels(levels: Sequence[float]) -> np.ndarray:
    """First differences; inverse of :func:`levels_from_increments`."""
    return np.diff(np.asarray(levels, dtype=np.float64))


def total_cost(strategy: Strategy, instance: ProblemInstance) -> float:
    """Sum of per-step trading costs of the combined increments.

    Feasibility is deliberately not checked here (infeasible strategies have
    well-defined costs and the certifier wants them comparable); the combined
    increment must stay inside the cost domain ``[-(P1+P2), P1+P2]`` though,
    since the cost family is undefined beyond it.
    """
    if strategy.T != instance.T:
        raise ValueError(f"strategy horizon {strategy.T} != instance horizon {instance.T}")
    xi = strategy.increments_total
    D = instance.rate_total
    slack = 1e-9 * D
    if xi.size and float(np.max(np.abs(xi))) > D + slack:
        t_bad = int(np.argmax(np.abs(xi))) + 1
        raise CostDomainError(
            f"combined increment {xi[t_bad - 1]:.6g} at t={t_bad} outside [-{D}, {D}]"
        )
    costs = instance.costs
    if costs.kind == "quadratic":
        p = costs.prices
        return float(np.sum((p + costs.impact_lambda * p * xi) * xi))
    return float(sum(costs.value(t, float(xi[t - 1])) for t in range(1, instance.T + 1)))
