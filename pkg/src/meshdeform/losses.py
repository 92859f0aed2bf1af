"""Training losses on deformed meshes: Chamfer, normal, Laplacian and edge length."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidArgumentError
from .mesh import Mesh, TargetShape
from .spatial import nearest


@dataclass(frozen=True)
class LossWeights:
    normal: float = 1.6e-4
    laplacian: float = 0.3
    edge: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise InvalidArgumentError(f"loss weight {k} must be nonnegative, got {v}")


class ChamferResult(NamedTuple):
    loss: Tensor
    pred_to_target: np.ndarray  # nearest target index per predicted point
    target_to_pred: np.ndarray


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, TargetShape) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def _coords(mesh: Mesh, coords) -> Tensor:
    return Tensor(mesh.vertices) if coords is None else ag.as_tensor(coords)


def chamfer_loss(pred, target) -> ChamferResult:
    """``sum_p min_q ||p-q||^2 + sum_q min_p ||p-q||^2``.

    Nearest assignments are fixed during the forward pass, so gradients only
    flow through the matched differences.
    """
    p = ag.as_tensor(pred)
    q = _points(target)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0 or len(q) == 0:
        raise InvalidArgumentError(f"chamfer_loss needs nonempty N x 3 sets, got {p.shape} and {q.shape}")
    p2q, _ = nearest(p.data, q)
    q2p, _ = nearest(q, p.data)
    forward = (p - q[p2q]).square().sum()
    backward_term = (ag.gather_rows(p, q2p) - q).square().sum()
    return ChamferResult(forward + backward_term, p2q, q2p)


def normal_loss(mesh: Mesh, target: TargetShape, nearest_idx, coords=None) -> Tensor:
    """``sum_p sum_{k in N(p)} <p - k, n_q>^2`` with ``q`` the Chamfer match of ``p``."""
    c = _coords(mesh, coords)
    idx = np.asarray(nearest_idx, dtype=np.int64)
    if idx.shape != (len(c),):
        raise InvalidArgumentError(f"nearest map covers {idx.size} of {len(c)} vertices")
    if idx.size and (idx.min() < 0 or idx.max() >= len(target)):
        raise InvalidArgumentError("nearest map refers to a missing target point")
    de = mesh.directed_edges
    n = target.normals[idx[de[:, 0]]]
    diff = ag.gather_rows(c, de[:, 0]) - ag.gather_rows(c, de[:, 1])
    return (diff * n).sum(axis=1).square().sum()


def laplacian_loss(before, after, mesh: Mesh | None = None) -> Tensor:
    """``sum_p ||delta'_p - delta_p||^2`` between the mesh before and after a block.

    ``before`` and ``after`` are either two meshes with identical topology, or
    coordinate arrays/tensors together with ``mesh`` for the topology.
    """
    if isinstance(before, Mesh):
        if not isinstance(after, Mesh):
            raise InvalidArgumentError("pass two meshes, or two coordinate sets with a topology mesh")
        if before.num_vertices != after.num_vertices or not np.array_equal(before.edges, after.edges):
            raise InvalidArgumentError("laplacian_loss: meshes differ in topology")
        mesh = before
        before, after = Tensor(before.vertices), Tensor(after.vertices)
    elif mesh is None:
        raise InvalidArgumentError("laplacian_loss: topology mesh required for raw coordinates")
    b, a = ag.as_tensor(before), ag.as_tensor(after)
    if b.shape != a.shape or len(b) != mesh.num_vertices:
        raise InvalidArgumentError(f"laplacian_loss: shapes {b.shape} / {a.shape} vs {mesh.num_vertices} vertices")
    L = mesh.laplacian_matrix
    return (ag.spmm(L, a) - ag.spmm(L, b)).square().sum()


def edge_length_loss(mesh: Mesh, coords=None) -> Tensor:
    """``sum_p sum_{k in N(p)} ||p - k||^2``; every edge counts twice."""
    c = _coords(mesh, coords)
    e = mesh.edges
    return (ag.gather_rows(c, e[:, 0]) - ag.gather_rows(c, e[:, 1])).square().sum() * 2.0


@dataclass
class LossReport:
    chamfer: float
    normal: float
    laplacian: float
    edge: float
    total: float
    per_block: list[dict[str, float]] = field(default_factory=list)

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **asdict(self)}, sort_keys=True)


def block_loss(out, target: TargetShape, weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    ch = chamfer_loss(out.coords, target)
    terms = {
        "chamfer": ch.loss,
        "normal": normal_loss(out.mesh, target, ch.pred_to_target, out.coords),
        "laplacian": laplacian_loss(out.coords_in, out.coords, out.mesh),
        "edge": edge_length_loss(out.mesh, out.coords),
    }
    total = terms["chamfer"] + weights.normal * terms["normal"] + weights.laplacian * terms["laplacian"] + weights.edge * terms["edge"]
    values = {k: v.item() for k, v in terms.items()}
    values["total"] = total.item()
    return total, values


def total_loss(outputs: Sequence, target: TargetShape, weights: LossWeights = LossWeights()) -> tuple[Tensor, LossReport]:
    """Equal-weight sum of the per-block objective over every cascade stage."""
    if not outputs:
        raise InvalidArgumentError("total_loss: no cascade outputs")
    totals = []
    per_block = []
    for out in outputs:
        t, vals = block_loss(out, target, weights)
        totals.append(t)
        per_block.append(vals)
    total = totals[0]
    for t in totals[1:]:
        total = total + t
    summed = {k: float(sum(b[k] for b in per_block)) for k in ("chamfer", "normal", "laplacian", "edge")}
    report = LossReport(total=total.item(), per_block=per_block, **summed)
    return total, report
