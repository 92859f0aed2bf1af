"""Exact nearest-neighbour queries between 3D point sets."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError

BRUTE_FORCE_BELOW = 64
_TIE_DEPTH = 8


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise ``||a_i - b_i||^2`` summed x, y, z in order."""
    d = a - b
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def nearest(query, reference) -> tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the closest ``reference`` point for each ``query`` point.

    Ties go to the lowest reference index.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(q) == 0 or len(r) == 0:
        raise InvalidArgumentError(f"nearest-neighbour search needs nonempty sets, got {len(q)} and {len(r)}")
    if len(r) < BRUTE_FORCE_BELOW or len(q) < BRUTE_FORCE_BELOW:
        d = q[:, None, :] - r[None, :, :]
        d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
        idx = np.argmin(d2, axis=1)
    else:
        k = min(_TIE_DEPTH, len(r))
        tree = cKDTree(r)
        dist, cand = tree.query(q, k=k)
        if k == 1:
            idx = cand
        else:
            cd = r[cand] - q[:, None, :]
            cd2 = cd[..., 0] * cd[..., 0] + cd[..., 1] * cd[..., 1] + cd[..., 2] * cd[..., 2]
            best = cd2.min(axis=1, keepdims=True)
            masked = np.where(cd2 == best, cand, np.iinfo(np.int64).max)
            idx = masked.min(axis=1)
            # ties may extend past the k candidates; settle those rows exhaustively
            for row in np.flatnonzero((cd2 == best).all(axis=1)):
                d = r - q[row]
                full = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
                idx[row] = int(np.argmin(full))
    idx = np.asarray(idx, dtype=np.int64)
    return idx, squared_distances(q, r[idx])
