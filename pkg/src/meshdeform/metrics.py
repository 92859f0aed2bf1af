"""Point-set evaluation metrics: F-score, Chamfer distance, EMD and Hausdorff distance.

F-score thresholds apply to *squared* nearest-neighbour distances, the same
quantity the Chamfer distance averages.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError
from .spatial import nearest

DEFAULT_TAU = 1e-4
EMD_CAP = 512


def _pts(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise InvalidArgumentError(f"{name} point set is empty")
    return a


def f_score(pred, gt, tau: float = DEFAULT_TAU) -> tuple[float, float, float]:
    """``(f, precision, recall)`` in percent at squared-distance threshold ``tau``."""
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    p, g = _pts(pred, "pred"), _pts(gt, "gt")
    _, d_pg = nearest(p, g)
    _, d_gp = nearest(g, p)
    precision = 100.0 * np.count_nonzero(d_pg <= tau) / len(p)
    recall = 100.0 * np.count_nonzero(d_gp <= tau) / len(g)
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2 * precision * recall / (precision + recall), precision, recall


def chamfer_distance(pred, gt) -> float:
    """Mean squared nearest-neighbour distance pred->gt plus gt->pred."""
    p, g = _pts(pred, "pred"), _pts(gt, "gt")
    _, d_pg = nearest(p, g)
    _, d_gp = nearest(g, p)
    return math.fsum(d_pg) / len(p) + math.fsum(d_gp) / len(g)


def hausdorff(pred, gt) -> float:
    """Symmetric Euclidean Hausdorff distance."""
    p, g = _pts(pred, "pred"), _pts(gt, "gt")
    _, d_pg = nearest(p, g)
    _, d_gp = nearest(g, p)
    return math.sqrt(max(d_pg.max(), d_gp.max()))


def linear_assignment(cost) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimum-cost assignment (shortest augmenting paths with potentials).

    Works on an ``n x m`` matrix with ``n <= m``; returns ``(rows, cols)``
    with ``rows == arange(n)``. O(n^2 m).
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise InvalidArgumentError(f"cost matrix must be 2D, got shape {C.shape}")
    transposed = C.shape[0] > C.shape[1]
    if transposed:
        C = C.T
    n, m = C.shape
    if not np.all(np.isfinite(C)):
        raise InvalidArgumentError("cost matrix contains non-finite entries")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # row (1-based) matched to column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            tail = minv[1:]
            better = free & (cur < tail)
            tail[better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, tail, np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            cols = np.flatnonzero(used)
            u[match[cols]] += delta
            v[cols] -= delta
            tail[free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    rows = np.empty(n, dtype=np.int64)
    cols_out = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if match[j]:
            rows[match[j] - 1] = match[j] - 1
            cols_out[match[j] - 1] = j - 1
    if transposed:
        order = np.argsort(cols_out)
        return cols_out[order], rows[order]
    return rows, cols_out


def emd(pred, gt, cap: int = EMD_CAP, seed: int = 0) -> float:
    """Mean Euclidean cost of the optimal one-to-one matching.

    The larger set is subsampled (seeded, without replacement) to the size of
    the smaller one.
    """
    p, g = _pts(pred, "pred"), _pts(gt, "gt")
    n = min(len(p), len(g))
    if n > cap:
        raise InvalidArgumentError(
            f"EMD on {n} points exceeds the cap of {cap}; subsample both sets to at most {cap} points first"
        )
    rng = np.random.default_rng(seed)
    if len(p) > n:
        p = p[np.sort(rng.choice(len(p), n, replace=False))]
    if len(g) > n:
        g = g[np.sort(rng.choice(len(g), n, replace=False))]
    cost = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(axis=-1))
    r, c = linear_assignment(cost)
    return math.fsum(cost[r, c]) / n


@dataclass
class MetricReport:
    thresholds: list[float]
    f_score: list[float]
    precision: list[float]
    recall: list[float]
    cd: float
    emd: float
    hausdorff: float
    pred_count: int
    gt_count: int
    emd_count: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, gt, thresholds: Sequence[float] = (DEFAULT_TAU, 2 * DEFAULT_TAU), emd_points: int = EMD_CAP, seed: int = 0) -> MetricReport:
    p, g = _pts(pred, "pred"), _pts(gt, "gt")
    fs, ps, rs = [], [], []
    for tau in thresholds:
        f, pr, rc = f_score(p, g, tau)
        fs.append(f)
        ps.append(pr)
        rs.append(rc)
    rng = np.random.default_rng(seed)
    k = min(emd_points, len(p), len(g))
    pe = p if len(p) == k else p[np.sort(rng.choice(len(p), k, replace=False))]
    ge = g if len(g) == k else g[np.sort(rng.choice(len(g), k, replace=False))]
    return MetricReport(
        thresholds=list(map(float, thresholds)),
        f_score=fs,
        precision=ps,
        recall=rs,
        cd=chamfer_distance(p, g),
        emd=emd(pe, ge, cap=max(k, 1)),
        hausdorff=hausdorff(p, g),
        pred_count=len(p),
        gt_count=len(g),
        emd_count=k,
    )
