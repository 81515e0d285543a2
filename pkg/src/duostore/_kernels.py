"""Numba kernels for the quadratic-impact fast path.

Everything here works on raw float64 arrays and scalars; the typed wrappers
live in :mod:`duostore.scalar`. Prices are passed as the slice covering the
times being summed, so callers own the time bookkeeping.

Cost shorthand used throughout: C_t(xi) = (p + lam*p*xi) * xi with derivative
C_t'(xi) = p * (1 + 2*lam*xi). The unconstrained root of C_t'(xi) = mu is
(mu/p - 1) / (2*lam).
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "q_single_point",
    "q_single_sum",
    "q_single_increments",
    "q_pair_point",
    "q_pair_sum2",
    "q_pair_increments",
    "dp_forward",
]


@njit(cache=True, fastmath=False)
def q_single_point(p, lam, mu, P):
    """argmin over [-P, P] of C(x) - mu*x for one price p."""
    x = (mu / p - 1.0) / (2.0 * lam)
    if x > P:
        return P
    if x < -P:
        return -P
    return x


@njit(cache=True, fastmath=False)
def q_single_sum(prices, lam, mu, P):
    """Sum of q_single_point over a window of prices."""
    acc = 0.0
    for i in range(prices.size):
        acc += q_single_point(prices[i], lam, mu, P)
    return acc


@njit(cache=True, fastmath=False)
def q_single_increments(prices, lam, mu, P):
    out = np.empty(prices.size, dtype=np.float64)
    for i in range(prices.size):
        out[i] = q_single_point(prices[i], lam, mu, P)
    return out


@njit(cache=True, fastmath=False)
def q_pair_point(p, lam, mu1, mu2, k2, P1, P2):
    """argmin over the rate box of C(x1+x2) - mu1*x1 - mu2*x2.

    Off the tie (mu1 != mu2) the minimizer is unique: the better-paid unit
    absorbs as much of the optimal combined increment as its rate allows.
    On the tie the minimizers form a segment of constant sum; k2 in [0, 1]
    selects the point, 0 favouring unit 1's largest share and 1 unit 2's.
    Returns (x1, x2).
    """
    D = P1 + P2
    if mu1 == mu2:
        g = (mu1 / p - 1.0) / (2.0 * lam)
        if g > D:
            g = D
        elif g < -D:
            g = -D
        x1_hi = g + P2
        if x1_hi > P1:
            x1_hi = P1
        x1_lo = g - P2
        if x1_lo < -P1:
            x1_lo = -P1
        x1 = (1.0 - k2) * x1_hi + k2 * x1_lo
        return x1, g - x1
    if mu1 > mu2:
        kink = P1 - P2
        r_hi = (mu1 / p - 1.0) / (2.0 * lam)
        r_lo = (mu2 / p - 1.0) / (2.0 * lam)
        if r_hi <= kink:
            xi = r_hi if r_hi > -D else -D
        elif r_lo >= kink:
            xi = r_lo if r_lo < D else D
        else:
            xi = kink
        x1 = xi + P2
        if x1 > P1:
            x1 = P1
        return x1, xi - x1
    kink = P2 - P1
    r_hi = (mu2 / p - 1.0) / (2.0 * lam)
    r_lo = (mu1 / p - 1.0) / (2.0 * lam)
    if r_hi <= kink:
        xi = r_hi if r_hi > -D else -D
    elif r_lo >= kink:
        xi = r_lo if r_lo < D else D
    else:
        xi = kink
    x2 = xi + P1
    if x2 > P2:
        x2 = P2
    return xi - x2, x2


@njit(cache=True, fastmath=False)
def q_pair_sum2(prices, lam, mu1, mu2, k2, P1, P2):
    """Sum of unit-2 increments of q_pair_point over a price window."""
    acc = 0.0
    for i in range(prices.size):
        x1, x2 = q_pair_point(prices[i], lam, mu1, mu2, k2, P1, P2)
        acc += x2
    return acc


@njit(cache=True, fastmath=False)
def q_pair_increments(prices, lam, mu1, mu2, k2, P1, P2):
    out1 = np.empty(prices.size, dtype=np.float64)
    out2 = np.empty(prices.size, dtype=np.float64)
    for i in range(prices.size):
        x1, x2 = q_pair_point(prices[i], lam, mu1, mu2, k2, P1, P2)
        out1[i] = x1
        out2[i] = x2
    return out1, out2


@njit(cache=True, fastmath=False)
def dp_forward(cost_table, n1, n2, a1, a2, i0, j0):
    """Forward value iteration on the joint level grid with backtrack parents.

    cost_table[t, da + a1, db + a2] is the per-step cost of moving unit 1 by
    da grid cells and unit 2 by db cells at time t+1. States are flattened as
    i * (n2 + 1) + j. Returns (final value layer, parent[t, state]).
    """
    T = cost_table.shape[0]
    width2 = n2 + 1
    S = (n1 + 1) * width2
    INF = 1e300
    V = np.full(S, INF, dtype=np.float64)
    V[i0 * width2 + j0] = 0.0
    parent = np.full((T, S), -1, dtype=np.int64)
    for t in range(T):
        W = np.full(S, INF, dtype=np.float64)
        for i in range(n1 + 1):
            row = i * width2
            for j in range(width2):
                v = V[row + j]
                if v >= INF:
                    continue
                src = row + j
                for da in range(-a1, a1 + 1):
                    ii = i + da
                    if ii < 0 or ii > n1:
                        continue
                    irow = ii * width2
                    for db in range(-a2, a2 + 1):
                        jj = j + db
                        if jj < 0 or jj > n2:
                            continue
                        c = v + cost_table[t, da + a1, db + a2]
                        idx = irow + jj
                        if c < W[idx]:
                            W[idx] = c
                            parent[t, idx] = src
        V = W
    return V, parent
