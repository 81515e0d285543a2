"""Pointwise Lagrangian minimizers for one time step.

Every stage of the solver reduces to minimizing, over the rate box, the
per-step cost minus a linear reward on the traded increments:

    single unit:  C_t(x) - mu * x           over x in [-P, P]
    two units:    C_t(x1 + x2) - mu1 * x1 - mu2 * x2
                                            over [-P1, P1] x [-P2, P2]

When the two multipliers are equal the pair problem is degenerate: the
objective depends on the increments only through their sum, so the minimizers
form a segment of constant combined increment. The enlarged parameter adds a
tie coordinate ``kappa2`` selecting a point on that segment, with the whole
parameter ordered lexicographically in ``(mu2, kappa2)``; sweeping it makes
unit 2's increment a nondecreasing function again, which is what the stage
machinery needs.

Quadratic-impact costs use closed forms (see :mod:`duostore._kernels`);
custom convex costs fall back to derivative-sign bisection at increment
resolution, so results there are exact only up to the bisection stop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import _kernels
from .core import CostModel

__all__ = [
    "EnlargedParam",
    "TieSegment",
    "xhat_single",
    "tie_segment",
    "xhat_pair",
]

# Increment resolution of the custom-cost bisections. Quadratic costs do not
# use it. Relative to the rate that bounds the search interval.
_X_BISECT_REL = 1e-12


@dataclass(frozen=True)
class EnlargedParam:
    """Multiplier pair plus tie coordinate, ordered as ``(mu2, kappa2)``.

    ``mu1`` is carried along but fixed in every comparison: the inner solves
    sweep ``(mu2, kappa2)`` at a pinned ``mu1``. ``kappa2 = 0`` gives unit 2
    its smallest share on a tie segment and ``kappa2 = 1`` its largest, so
    unit 2's increment is nondecreasing in the lexicographic order.
    """

    mu1: float
    mu2: float
    kappa2: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.kappa2 <= 1.0):
            raise ValueError(f"kappa2 must lie in [0, 1], got {self.kappa2}")

    def key(self) -> tuple[float, float]:
        return (self.mu2, self.kappa2)


@dataclass(frozen=True)
class TieSegment:
    """Minimizer segment of the pair problem at equal multipliers.

    The combined increment is pinned at ``gamma_star``; unit 1's share ranges
    over ``[x1_min, x1_max]`` (both ends inside its rate box and keeping
    unit 2 inside its own). ``point(kappa2)`` resolves the convention used by
    :class:`EnlargedParam`: ``kappa2 = 0`` maps to ``x1_max``.
    """

    gamma_star: float
    x1_min: float
    x1_max: float

    def point(self, kappa2: float) -> tuple[float, float]:
        x1 = (1.0 - kappa2) * self.x1_max + kappa2 * self.x1_min
        return x1, self.gamma_star - x1


def _argmin_convex_1d(
    slope_minus,
    slope_plus,
    lo: float,
    hi: float,
) -> float:
    """Minimizer of a convex function on [lo, hi] from one-sided slopes.

    The predicate "slope_plus(x) >= 0" is monotone in x for convex functions;
    bisection pins the sign change. Callables take the point only.
    """
    if slope_plus(lo) >= 0.0:
        return lo
    if slope_minus(hi) <= 0.0:
        return hi
    a, b = lo, hi
    eps = _X_BISECT_REL * max(1.0, abs(hi - lo))
    while b - a > eps:
        m = 0.5 * (a + b)
        if slope_plus(m) >= 0.0:
            b = m
        else:
            a = m
    return 0.5 * (a + b)


def xhat_single(t: int, mu: float, P: float, costs: CostModel) -> float:
    """Minimizer of ``C_t(x) - mu * x`` over ``[-P, P]``.

    Nondecreasing in ``mu``; hits ``-P`` once ``mu <= C_t'(-P)`` and ``P``
    once ``mu >= C_t'(P)``.
    """
    if costs.kind == "quadratic":
        return float(
            _kernels.q_single_point(float(costs.prices[t - 1]), costs.impact_lambda, mu, P)
        )
    return _argmin_convex_1d(
        lambda x: costs.slope_minus(t, x) - mu,
        lambda x: costs.slope_plus(t, x) - mu,
        -P,
        P,
    )


def tie_segment(t: int, mu: float, P1: float, P2: float, costs: CostModel) -> TieSegment:
    """Minimizer segment of the pair problem at ``mu1 = mu2 = mu``.

    The combined increment solves the single problem at rate ``P1 + P2``;
    the split is free on the segment where both boxes allow it.
    """
    gamma = xhat_single(t, mu, P1 + P2, costs)
    x1_min = max(-P1, gamma - P2)
    x1_max = min(P1, gamma + P2)
    if x1_min > x1_max:
        # Saturation can misorder the ends by one rounding ulp; collapse to
        # a single point kept inside unit 1's rate box.
        v = min(P1, max(-P1, 0.5 * (x1_min + x1_max)))
        x1_min = x1_max = v
    return TieSegment(gamma_star=gamma, x1_min=x1_min, x1_max=x1_max)


def xhat_pair(t: int, nu: EnlargedParam, P1: float, P2: float, costs: CostModel) -> tuple[float, float]:
    """Minimizer of the pair problem under the enlarged parameter ``nu``.

    Off the tie the result is the unique box minimizer and ``kappa2`` is
    ignored; on the tie it is ``tie_segment(...).point(kappa2)``.
    """
    if costs.kind == "quadratic":
        x1, x2 = _kernels.q_pair_point(
            float(costs.prices[t - 1]),
            costs.impact_lambda,
            nu.mu1,
            nu.mu2,
            nu.kappa2,
            P1,
            P2,
        )
        return float(x1), float(x2)
    return _xhat_pair_custom(t, nu, P1, P2, costs)


def _xhat_pair_custom(
    t: int, nu: EnlargedParam, P1: float, P2: float, costs: CostModel
) -> tuple[float, float]:
    """Bisection route for custom costs, mirroring the closed-form case split."""
    mu1, mu2 = nu.mu1, nu.mu2
    D = P1 + P2
    if mu1 == mu2:
        return tie_segment(t, mu1, P1, P2, costs).point(nu.kappa2)
    # Reduce over xi = x1 + x2. The better-paid unit takes min(its rate,
    # xi + other rate); the reduced objective h(xi) = C_t(xi) - (linear in
    # xi with a kink where that unit's rate saturates) stays convex.
    if mu1 > mu2:
        kink = P1 - P2
        mu_left, mu_right = mu1, mu2
    else:
        kink = P2 - P1
        mu_left, mu_right = mu2, mu1

    def hp(xi: float) -> float:
        mu = mu_left if xi < kink else mu_right
        return costs.slope_plus(t, xi) - mu

    def hm(xi: float) -> float:
        mu = mu_left if xi <= kink else mu_right
        return costs.slope_minus(t, xi) - mu

    xi_star = _argmin_convex_1d(hm, hp, -D, D)
    if mu1 > mu2:
        x1 = min(P1, xi_star + P2)
        return x1, xi_star - x1
    x2 = min(P2, xi_star + P1)
    return xi_star - x2, x2
