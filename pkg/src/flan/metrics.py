"""Rank correlation measures.

kendall_tau is the tie-adjusted tau-b computed in O(n log n): sort by
(x, y), count discordant pairs as strict inversions of y with a mergesort,
and correct for ties on either side.  spearman_rho is Pearson correlation of
midranks.  Both return NaN when either input is constant, since rank
correlation is undefined there; callers treat NaN as "no signal".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import count_inversions


def _as_vector(values, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    return v


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = _as_vector(x, "x")
    y = _as_vector(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("rank correlation needs at least two observations")
    return x, y


def _tied_pairs(sorted_values: np.ndarray) -> int:
    """Sum over runs of equal values of t*(t-1)/2."""
    total = 0
    run = 1
    for i in range(1, sorted_values.shape[0]):
        if sorted_values[i] == sorted_values[i - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    total += run * (run - 1) // 2
    return total


def _joint_tied_pairs(xs: np.ndarray, ys: np.ndarray) -> int:
    total = 0
    run = 1
    for i in range(1, xs.shape[0]):
        if xs[i] == xs[i - 1] and ys[i] == ys[i - 1]:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    total += run * (run - 1) // 2
    return total


def kendall_tau(x, y) -> float:
    x, y = _check_pair(x, y)
    n = x.shape[0]
    order = np.lexsort((y, x))
    xs = x[order]
    ys = y[order]
    total = n * (n - 1) // 2
    xtie = _tied_pairs(xs)
    ytie = _tied_pairs(np.sort(y, kind="stable"))
    ntie = _joint_tied_pairs(xs, ys)
    # With x-ties broken by y, inversions of y are exactly the discordant pairs.
    _, y_ranks = np.unique(ys, return_inverse=True)
    discordant = int(count_inversions(y_ranks.astype(np.int64)))
    con_minus_dis = total - xtie - ytie + ntie - 2 * discordant
    denom_sq = float(total - xtie) * float(total - ytie)
    if denom_sq <= 0.0:
        return float("nan")
    tau = con_minus_dis / np.sqrt(denom_sq)
    return float(min(1.0, max(-1.0, tau)))


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean of their positions."""
    n = values.shape[0]
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        # positions i..j (0-based) share the midrank
        mid = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mid
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    x, y = _check_pair(x, y)
    rx = midranks(x)
    ry = midranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sx = float(np.sqrt(np.sum(dx * dx)))
    sy = float(np.sqrt(np.sum(dy * dy)))
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    rho = float(np.sum(dx * dy)) / (sx * sy)
    return float(min(1.0, max(-1.0, rho)))


@dataclass(frozen=True)
class RankReport:
    """Correlation summary for one prediction run."""

    n: int
    kendall: float
    spearman: float
    x_tied_pairs: int
    y_tied_pairs: int


def rank_report(x, y) -> RankReport:
    xv, yv = _check_pair(x, y)
    return RankReport(
        n=xv.shape[0],
        kendall=kendall_tau(xv, yv),
        spearman=spearman_rho(xv, yv),
        x_tied_pairs=_tied_pairs(np.sort(xv, kind="stable")),
        y_tied_pairs=_tied_pairs(np.sort(yv, kind="stable")),
    )
