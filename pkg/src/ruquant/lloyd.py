"""Lloyd-Max scalar quantizer, used as the MSE-optimal reference.

The fit alternates the two optimality conditions on the empirical
distribution: boundaries at the midpoints of adjacent levels, and levels at
the conditional mean (centroid) of their cell.  Each half-step can only
lower the empirical MSE, so the recorded history is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .quantizer import QuantConfig, rtn_levels
from .tensor import check_vector


@dataclass
class LloydMaxQuantizer:
    """Fitted quantizer: ``boundaries[0] < ... < boundaries[N]`` and ``N`` levels.

    The outer boundaries are the sample extremes; values outside them
    saturate to the first or last level.
    """

    boundaries: np.ndarray
    levels: np.ndarray
    final_mse: float
    mse_history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def interior(self) -> np.ndarray:
        return self.boundaries[1:-1]

    def cell_index(self, X) -> np.ndarray:
        """Cell of every entry; cells are left-closed, right-open."""
        return np.searchsorted(self.interior, np.asarray(X, dtype=np.float64), side="right")

    def apply(self, X) -> np.ndarray:
        return self.levels[self.cell_index(X)]


def _edges(xs, levels):
    """Start index of every cell in the sorted samples, plus the end sentinel."""
    mids = (levels[:-1] + levels[1:]) / 2
    return np.concatenate([[0], np.searchsorted(xs, mids, side="left"), [xs.size]])


class _Moments:
    """Prefix sums of the sorted, centred samples for O(levels) cell statistics."""

    def __init__(self, xs):
        self.shift = xs.mean()
        c = xs - self.shift
        self.n = xs.size
        self.s1 = np.concatenate([[0.0], np.cumsum(c)])
        self.s2 = np.concatenate([[0.0], np.cumsum(c * c)])

    def mse(self, edges, levels):
        q = levels - self.shift
        cnt = np.diff(edges)
        s1 = self.s1[edges[1:]] - self.s1[edges[:-1]]
        s2 = self.s2[edges[1:]] - self.s2[edges[:-1]]
        return float(np.sum(s2 - 2 * q * s1 + q * q * cnt) / self.n)

    def centroids(self, edges, levels, lo, hi):
        cnt = np.diff(edges)
        s1 = self.s1[edges[1:]] - self.s1[edges[:-1]]
        mids = (levels[:-1] + levels[1:]) / 2
        bounds = np.concatenate([[lo], mids, [hi]])
        new = (bounds[:-1] + bounds[1:]) / 2  # empty cells: re-seed at their midpoint
        filled = cnt > 0
        new[filled] = s1[filled] / cnt[filled] + self.shift
        return new


def _run(xs, moments, levels, tol, max_iter):
    lo, hi = xs[0], xs[-1]
    levels = np.array(levels, dtype=np.float64)
    edges = _edges(xs, levels)
    history = [moments.mse(edges, levels)]
    it = 0
    for it in range(1, max_iter + 1):
        levels = moments.centroids(edges, levels, lo, hi)
        new_edges = _edges(xs, levels)
        history.append(moments.mse(new_edges, levels))
        changed = not np.array_equal(new_edges, edges)
        edges = new_edges
        if not changed or history[-2] - history[-1] < tol:
            break
    return levels, history, it


def quantile_init(x, n):
    """Levels at the medians of ``n`` equal-probability cells."""
    return np.quantile(x, (np.arange(n) + 0.5) / n)


def equal_cell_levels(lo, hi, n):
    """Midpoints of ``n`` equal cells tiling ``[lo, hi]`` (a mid-rise uniform quantizer)."""
    if not hi > lo or n < 1:
        raise InputError("need hi > lo and n >= 1")
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def optimal_partition_init(x, n, max_points=512):
    """Levels of the globally optimal ``n``-cell partition of (a compression
    of) the sorted data, by dynamic programming over contiguous segments.

    Exact when ``x`` has at most ``max_points`` distinct values; otherwise the
    data are first merged into ``max_points`` equal-count groups.
    """
    v, w = np.unique(x, return_counts=True)
    w = w.astype(np.float64)
    if v.size > max_points:
        groups = np.array_split(np.arange(x.size), max_points)
        w = np.array([g.size for g in groups], dtype=np.float64)
        v = np.array([x[g].mean() for g in groups])
    m = v.size
    W = np.concatenate([[0.0], np.cumsum(w)])
    S = np.concatenate([[0.0], np.cumsum(w * v)])
    Q = np.concatenate([[0.0], np.cumsum(w * v * v)])
    i = np.arange(m)[:, None]
    j = np.arange(m)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        cnt = W[j + 1] - W[i]
        cost = Q[j + 1] - Q[i] - (S[j + 1] - S[i]) ** 2 / cnt
    cost = np.where(i <= j, np.maximum(cost, 0.0), np.inf)
    best = cost[0].copy()
    back = []
    for _ in range(1, n):
        prev = np.concatenate([[np.inf], best[:-1]])  # segment starting at i follows i - 1
        total = prev[:, None] + cost
        arg = np.argmin(total, axis=0)
        best = total[arg, np.arange(m)]
        back.append(arg)
    starts = []
    end = m - 1
    for arg in reversed(back):
        start = int(arg[end])
        starts.append(start)
        end = start - 1
    edges = [0, *reversed(starts), m]
    return np.array([S[b] - S[a] for a, b in zip(edges[:-1], edges[1:])]) / \
        np.array([W[b] - W[a] for a, b in zip(edges[:-1], edges[1:])])


def lloyd_max_fit(samples, bits: int, tol: float = 1e-12, max_iter: int = 500,
                  init="auto") -> LloydMaxQuantizer:
    """Fit a ``2**bits``-level Lloyd-Max quantizer to ``samples``.

    ``init`` names a start: ``"quantile"``, ``"uniform"`` (the levels of the
    uniform quantizer over the sample range) or ``"optimal"`` (see
    :func:`optimal_partition_init`).  It may also be an explicit array of
    levels, a list mixing both, or ``"auto"`` for all three named starts.
    Each start is iterated to a fixed point and the lowest MSE wins.  Including the uniform start guarantees the result is never worse
    than round-to-nearest at the same bit width.
    """
    x = np.sort(check_vector(np.ravel(samples), "samples"))
    bits = int(bits)
    if bits < 1:
        raise InputError("bits must be >= 1")
    if tol <= 0:
        raise InputError("tol must be positive")
    n = 1 << bits
    if x.size < n:
        raise InputError(f"need at least {n} samples for {bits} bit(s), got {x.size}")
    if np.unique(x).size < n:
        raise InputError(f"degenerate support: fewer than {n} distinct values")

    if isinstance(init, str):
        init = ["quantile", "uniform", "optimal"] if init == "auto" else [init]
    starts = []
    for item in init:
        if isinstance(item, str):
            if item not in _STARTS:
                raise InputError(f"unknown init {item!r}")
            start = _STARTS[item](x, bits)
        else:
            start = np.sort(np.asarray(item, dtype=np.float64))
        if start.size != n:
            raise InputError(f"init needs {n} levels, got {start.size}")
        starts.append(start)

    moments = _Moments(x)
    best = None
    for start in starts:
        levels, history, it = _run(x, moments, start, tol, max_iter)
        if best is None or history[-1] < best[1][-1]:
            best = (levels, history, it)
    levels, history, it = best
    boundaries = np.concatenate([[x[0]], (levels[:-1] + levels[1:]) / 2, [x[-1]]])
    qz = LloydMaxQuantizer(boundaries, levels, 0.0, history, it)
    qz.final_mse = float(np.mean((x - qz.apply(x)) ** 2))
    return qz


_STARTS = {
    "quantile": lambda x, bits: quantile_init(x, 1 << bits),
    "uniform": lambda x, bits: rtn_levels(x, QuantConfig(bits, 1.0)),
    "optimal": lambda x, bits: optimal_partition_init(x, 1 << bits),
}


def lloyd_max_apply(qz: LloydMaxQuantizer, X) -> np.ndarray:
    return qz.apply(X)
