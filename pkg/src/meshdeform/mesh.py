"""Triangle meshes as graphs: construction, adjacency, Laplacian coordinates, sampling."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateGeometryError, DegenerateTopologyError, InvalidArgumentError


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    """Sorted unique undirected edges ``(i, j)`` with ``i < j``."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh with per-vertex features.

    ``features`` defaults to a copy of the vertex coordinates. ``edges``
    defaults to the edges implied by ``faces``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray | None = None
    features: np.ndarray | None = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        e = edges_from_faces(f) if self.edges is None else np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        feats = v if self.features is None else np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "edges", _frozen(e))
        object.__setattr__(self, "features", _frozen(feats))
        if self.validate:
            self._check()

    def _check(self) -> None:
        n = len(self.vertices)
        for name, arr in (("face", self.faces), ("edge", self.edges)):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise InvalidArgumentError(f"{name} index out of range for {n} vertices")
        if len(self.features) != n:
            raise InvalidArgumentError(f"feature rows ({len(self.features)}) != vertex count ({n})")
        f = self.faces
        if len(f) and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise InvalidArgumentError("degenerate face with repeated vertex index")
        e = self.edges
        if len(e):
            if np.any(e[:, 0] == e[:, 1]):
                raise InvalidArgumentError("self-loop edge")
            key = np.sort(e, axis=1)
            if len(np.unique(key, axis=0)) != len(key):
                raise InvalidArgumentError("duplicate edge")
        if len(f):
            fe = edges_from_faces(f)
            known = {tuple(r) for r in np.sort(e, axis=1).tolist()}
            missing = [tuple(r) for r in fe.tolist() if tuple(r) not in known]
            if missing:
                raise InvalidArgumentError(f"face edge {missing[0]} absent from edge list")

    # --- counts ---------------------------------------------------------
    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def euler_characteristic(self) -> int:
        return self.num_vertices - self.num_edges + self.num_faces

    def with_vertices(self, vertices: np.ndarray, features: np.ndarray | None = None) -> "Mesh":
        """Same topology, new coordinates (features follow coordinates unless given)."""
        return Mesh(vertices, self.faces, self.edges, features, validate=False)

    # --- adjacency ------------------------------------------------------
    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matrix."""
        n = self.num_vertices
        e = self.edges
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        a.sort_indices()
        return a

    @cached_property
    def directed_edges(self) -> np.ndarray:
        """Every ordered neighbour pair ``(p, k)``; each undirected edge appears twice."""
        e = self.edges
        d = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((d[:, 1], d[:, 0]))
        return _frozen(d[order])

    @cached_property
    def degrees(self) -> np.ndarray:
        return _frozen(np.diff(self.adjacency.indptr))

    @cached_property
    def laplacian_matrix(self) -> sp.csr_matrix:
        """``I - D^-1 A``; rows of isolated vertices are left as identity."""
        deg = self.degrees.astype(np.float64)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return (sp.identity(self.num_vertices, format="csr") - sp.diags(inv) @ self.adjacency).tocsr()

    def neighbors(self, vertex_index: int) -> list[int]:
        """Sorted indices of the vertices sharing an edge with ``vertex_index``."""
        i = int(vertex_index)
        if not 0 <= i < self.num_vertices:
            raise InvalidArgumentError(f"vertex index {vertex_index} out of range [0, {self.num_vertices})")
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]].tolist()

    def laplacian_coordinate(self, vertex_index: int) -> np.ndarray:
        nbrs = self.neighbors(vertex_index)
        if not nbrs:
            raise DegenerateTopologyError(f"vertex {vertex_index} has no neighbours")
        return self.vertices[vertex_index] - self.vertices[nbrs].mean(axis=0)

    def laplacian_coordinates(self, vertices: np.ndarray | None = None) -> np.ndarray:
        v = self.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
        if np.any(self.degrees == 0):
            raise DegenerateTopologyError("mesh has isolated vertices")
        return self.laplacian_matrix @ v

    # --- geometry -------------------------------------------------------
    def face_areas_and_normals(self) -> tuple[np.ndarray, np.ndarray]:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        norm = np.linalg.norm(cross, axis=1)
        areas = 0.5 * norm
        normals = np.zeros_like(cross)
        ok = norm > 0
        normals[ok] = cross[ok] / norm[ok, None]
        normals[~ok] = (0.0, 0.0, 1.0)
        return areas, normals

    def sample_surface(self, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Area-weighted uniform surface samples and their face normals.

        Returns ``(points, normals)``, each ``count x 3``.
        """
        if count < 0:
            raise InvalidArgumentError(f"sample count must be >= 0, got {count}")
        if count == 0:
            return np.zeros((0, 3)), np.zeros((0, 3))
        if self.num_faces == 0:
            raise DegenerateGeometryError("mesh has no faces")
        areas, normals = self.face_areas_and_normals()
        total = areas.sum()
        if not total > 0:
            raise DegenerateGeometryError("mesh has zero total surface area")
        if np.any(areas == 0):
            warnings.warn(f"{int(np.sum(areas == 0))} zero-area faces get no samples and a +z normal", RuntimeWarning)
        rng = np.random.default_rng(seed)
        cdf = np.cumsum(areas) / total
        face = np.minimum(np.searchsorted(cdf, rng.random(count), side="right"), self.num_faces - 1)
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        tri = self.vertices[self.faces[face]]
        pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
        return pts, normals[face].copy()

    def is_closed_manifold(self) -> bool:
        """Every edge is shared by exactly two faces."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return len(counts) == self.num_edges and bool(np.all(counts == 2))


@dataclass(frozen=True, eq=False)
class TargetShape:
    """Ground-truth point set with unit normals."""

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(p) == 0:
            raise InvalidArgumentError("target shape has no points")
        if len(p) != len(n):
            raise InvalidArgumentError(f"{len(p)} points but {len(n)} normals")
        bad = np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6
        if np.any(bad):
            raise InvalidArgumentError(f"normal {int(np.argmax(bad))} is not unit length")
        object.__setattr__(self, "points", _frozen(p))
        object.__setattr__(self, "normals", _frozen(n))

    def __len__(self) -> int:
        return len(self.points)


# --- ellipsoids ----------------------------------------------------------
_PHI = (1.0 + 5.0 ** 0.5) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ]
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
)


def _check_radii(radii) -> np.ndarray:
    r = np.asarray(radii, dtype=np.float64).reshape(3)
    if np.any(~(r > 0)):
        raise InvalidArgumentError(f"ellipsoid radii must be positive, got {tuple(r)}")
    return r


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    c = vertices.mean(axis=0)
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", n, tri.mean(axis=1) - c) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def unit_icosphere(subdivision_level: int) -> tuple[np.ndarray, np.ndarray]:
    if subdivision_level < 0:
        raise InvalidArgumentError(f"subdivision level must be >= 0, got {subdivision_level}")
    v = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    f = _ICO_FACES.copy()
    for _ in range(subdivision_level):
        from .gcn import edge_unpool_plan  # local import to avoid a cycle

        plan = edge_unpool_plan(f, len(v))
        mid = 0.5 * (v[plan.parents[:, 0]] + v[plan.parents[:, 1]])
        v = np.concatenate([v, mid / np.linalg.norm(mid, axis=1, keepdims=True)])
        f = plan.faces
    return v, f


def make_ellipsoid(radii=(0.2, 0.2, 0.4), center=(0.0, 0.0, 0.8), subdivision_level: int = 2) -> Mesh:
    """Icosphere-based ellipsoid; level 2 gives 162 vertices.

    Each subdivision replaces every triangle by four and reprojects the new
    vertices onto the unit sphere before the anisotropic scaling.
    """
    r = _check_radii(radii)
    v, f = unit_icosphere(subdivision_level)
    verts = v * r + np.asarray(center, dtype=np.float64)
    return Mesh(verts, _orient_outward(verts, f))


def make_uv_ellipsoid(radii=(0.2, 0.2, 0.4), center=(0.0, 0.0, 0.8), rings: int = 11, segments: int = 14) -> Mesh:
    """Latitude/longitude ellipsoid with ``rings * segments + 2`` vertices.

    The defaults yield 156 vertices, 462 edges and 308 faces. The poles lie
    on the z axis.
    """
    r = _check_radii(radii)
    if rings < 1 or segments < 3:
        raise InvalidArgumentError(f"need rings >= 1 and segments >= 3, got {rings}, {segments}")
    theta = np.pi * np.arange(1, rings + 1) / (rings + 1)
    phi = 2 * np.pi * np.arange(segments) / segments
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    ring = np.stack([st * np.cos(phi), st * np.sin(phi), np.broadcast_to(ct, (rings, segments))], axis=-1).reshape(-1, 3)
    unit = np.concatenate([[[0.0, 0.0, 1.0]], ring, [[0.0, 0.0, -1.0]]])
    top, bottom = 0, len(unit) - 1

    def idx(ri, si):
        return 1 + ri * segments + si % segments

    faces = []
    for s in range(segments):
        faces.append((top, idx(0, s), idx(0, s + 1)))
    for ri in range(rings - 1):
        for s in range(segments):
            a, b = idx(ri, s), idx(ri, s + 1)
            c, d = idx(ri + 1, s), idx(ri + 1, s + 1)
            faces.append((a, c, b))
            faces.append((b, c, d))
    for s in range(segments):
        faces.append((bottom, idx(rings - 1, s + 1), idx(rings - 1, s)))
    verts = unit * r + np.asarray(center, dtype=np.float64)
    return Mesh(verts, _orient_outward(verts, np.array(faces, dtype=np.int64)))


def load_default_ellipsoid() -> Mesh:
    """The shipped 156-vertex initial ellipsoid."""
    from importlib.resources import files

    from .dataset import read_obj

    with files("meshdeform").joinpath("data/ellipsoid_156.obj").open("r") as fh:
        return read_obj(fh)


# --- self-intersection spot check ---------------------------------------
def _segment_hits_triangle(p0, p1, tri, eps=1e-12) -> bool:
    a, b, c = tri
    d = p1 - p0
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = e1 @ h
    if abs(det) < eps:
        return False
    inv = 1.0 / det
    s = p0 - a
    u = inv * (s @ h)
    if u < 0 or u > 1:
        return False
    q = np.cross(s, e1)
    v = inv * (d @ q)
    if v < 0 or u + v > 1:
        return False
    t = inv * (e2 @ q)
    return 0.0 <= t <= 1.0


def triangles_intersect(t1: np.ndarray, t2: np.ndarray) -> bool:
    """Non-coplanar triangle pair test via edge/triangle crossings."""
    for tri_a, tri_b in ((t1, t2), (t2, t1)):
        for i in range(3):
            if _segment_hits_triangle(tri_a[i], tri_a[(i + 1) % 3], tri_b):
                return True
    return False


def self_intersection_spot_check(mesh: Mesh, pairs: int = 1000, seed: int = 0) -> int:
    """Count intersecting pairs among ``pairs`` random vertex-disjoint face pairs."""
    rng = np.random.default_rng(seed)
    f = mesh.faces
    v = mesh.vertices
    hits = 0
    done = 0
    while done < pairs:
        i, j = rng.integers(0, len(f), size=2)
        if i == j or set(f[i].tolist()) & set(f[j].tolist()):
            continue
        done += 1
        if triangles_intersect(v[f[i]], v[f[j]]):
            hits += 1
    return hits
