"""Rank statistics for comparing metric samples across model variants.

Provides midranks, empirical CDFs, and a one-sided Mann-Whitney U test
whose exact path counts index splits by dynamic programming over doubled
midranks (doubling makes tied midranks integral, so the subset-sum table
stays exact). The normal approximation applies the usual tie correction
plus a 0.5 continuity correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EmpiricalCdf",
    "MannWhitneyResult",
    "cdf_tables",
    "empirical_cdf",
    "mann_whitney_u",
    "midranks",
    "pairwise_pvalues",
]

EXACT_LIMIT = 12


def midranks(values) -> np.ndarray:
    """1-based ranks with ties replaced by the mean rank of their run."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("midranks expects a flat array")
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


class EmpiricalCdf:
    """Right-continuous empirical distribution function of a sample."""

    def __init__(self, values):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("need a non-empty flat sample")
        if not np.all(np.isfinite(v)):
            raise ValueError("sample must be finite")
        self._sorted = np.sort(v)
        self.n = v.size
        self.xs = np.unique(self._sorted)
        self.values = (
            np.searchsorted(self._sorted, self.xs, side="right") / self.n
        )

    def __call__(self, x):
        """Fraction of the sample <= x; handles scalars and arrays."""
        q = np.asarray(x, dtype=np.float64)
        out = np.searchsorted(self._sorted, q, side="right") / self.n
        return float(out) if q.ndim == 0 else out


def empirical_cdf(values) -> EmpiricalCdf:
    return EmpiricalCdf(values)


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_value: float
    method: str
    nx: int
    ny: int


def _exact_p(doubled: np.ndarray, nx: int, target: int) -> float:
    """P(doubled rank sum of a random nx-subset >= target), exactly.

    dp[c][s] counts subsets of size c with doubled-rank sum s among the
    items processed so far; every index split is equally likely, so ties
    need no special treatment.
    """
    n = doubled.size
    total = int(doubled.sum())
    dp = np.zeros((nx + 1, total + 1), dtype=np.int64)
    dp[0, 0] = 1
    for d in doubled.tolist():
        for c in range(nx - 1, -1, -1):
            row = dp[c]
            if row.any():
                dp[c + 1, d:] += row[: total + 1 - d]
    favourable = int(dp[nx, max(target, 0) :].sum())
    return favourable / math.comb(n, nx)


def _approx_p(u: float, ranks: np.ndarray, nx: int, ny: int) -> float:
    n = nx + ny
    mu = nx * ny / 2.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts))
    var = (nx * ny / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0.0:
        return 1.0
    z = (u - mu - 0.5) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u(x, y, method: str = "auto") -> MannWhitneyResult:
    """One-sided Mann-Whitney U test of H1: values in x tend to exceed y.

    U is the number of (x, y) pairs where x wins, ties counting half. The
    exact path enumerates all C(nx+ny, nx) assignments; "auto" uses it up
    to nx+ny <= 12 and the tie-corrected normal approximation beyond.
    """
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.ndim != 1 or yv.ndim != 1 or xv.size == 0 or yv.size == 0:
        raise ValueError("need two non-empty flat samples")
    if not (np.all(np.isfinite(xv)) and np.all(np.isfinite(yv))):
        raise ValueError("samples must be finite")
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    nx, ny = xv.size, yv.size
    combined = np.concatenate([xv, yv])
    ranks = midranks(combined)
    rank_sum_x = float(ranks[:nx].sum())
    u = rank_sum_x - nx * (nx + 1) / 2.0

    if method == "auto":
        method = "exact" if nx + ny <= EXACT_LIMIT else "approx"
    if method == "exact":
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        target = int(round(2.0 * rank_sum_x))
        p = _exact_p(doubled, nx, target)
    else:
        p = _approx_p(u, ranks, nx, ny)
    return MannWhitneyResult(u=float(u), p_value=float(p), method=method, nx=nx, ny=ny)


def pairwise_pvalues(samples: dict[str, np.ndarray], method: str = "auto") -> list[dict]:
    """One-sided tests for every ordered pair of named samples."""
    names = sorted(samples)
    out = []
    for a in names:
        for b in names:
            if a == b:
                continue
            r = mann_whitney_u(samples[a], samples[b], method=method)
            out.append(
                {
                    "x": a,
                    "y": b,
                    "u": r.u,
                    "p_value": r.p_value,
                    "method": r.method,
                }
            )
    return out


def cdf_tables(samples: dict[str, np.ndarray]) -> dict:
    """Evaluates every sample's CDF on the union of observed values."""
    if not samples:
        raise ValueError("need at least one sample")
    cdfs = {name: EmpiricalCdf(v) for name, v in samples.items()}
    points = np.unique(np.concatenate([c.xs for c in cdfs.values()]))
    return {
        "points": points.tolist(),
        "cdfs": {name: c(points).tolist() for name, c in cdfs.items()},
    }
