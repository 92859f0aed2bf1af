"""File formats, manifests and synthetic training data.

All geometry lives in the camera frame (z points away from the camera), so
no extrinsics are stored anywhere.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .features import CameraIntrinsics, FeaturePyramid, load_image, project
from .mesh import Mesh, TargetShape

_OBJ_IGNORED = {"vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib", "l"}


# --- OBJ -----------------------------------------------------------------
def _parse_obj(lines: Iterable[str], origin: str) -> Mesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind = tok[0]
        if kind == "v":
            if len(tok) not in (4, 5):
                raise ParseError(f"{origin}:{lineno}: vertex record needs 3 coordinates")
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise ParseError(f"{origin}:{lineno}: non-numeric vertex coordinate") from None
        elif kind == "f":
            if len(tok) != 4:
                raise ParseError(f"{origin}:{lineno}: only triangular faces are supported, got {len(tok) - 1} vertices")
            idx = []
            for t in tok[1:]:
                try:
                    k = int(t.split("/", 1)[0])
                except ValueError:
                    raise ParseError(f"{origin}:{lineno}: bad face index {t!r}") from None
                if k == 0:
                    raise ParseError(f"{origin}:{lineno}: face index 0 is invalid in OBJ")
                k = k - 1 if k > 0 else len(verts) + k
                if not 0 <= k < len(verts):
                    raise ParseError(f"{origin}:{lineno}: face index {t} refers to a missing vertex")
                idx.append(k)
            faces.append(idx)
        elif kind not in _OBJ_IGNORED:
            raise ParseError(f"{origin}:{lineno}: unsupported record {kind!r}")
    try:
        return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except InvalidArgumentError as exc:
        raise ParseError(f"{origin}: {exc}") from None


def read_obj(source: str | Path | IO[str]) -> Mesh:
    """Read ``v``/``f`` records; edges are rebuilt from the faces."""
    if hasattr(source, "read"):
        return _parse_obj(source, getattr(source, "name", "<stream>"))
    with open(source, "r") as fh:
        return _parse_obj(fh, str(source))


def write_obj(path: str | Path | IO[str], mesh: Mesh) -> None:
    buf = io.StringIO()
    for x, y, z in mesh.vertices.tolist():
        buf.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
    for a, b, c in (mesh.faces + 1).tolist():
        buf.write(f"f {a} {b} {c}\n")
    if hasattr(path, "write"):
        path.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


# --- point clouds --------------------------------------------------------
def write_points(path: str | Path, target: TargetShape) -> None:
    """One ``x y z nx ny nz`` line per point."""
    rows = np.hstack([target.points, target.normals])
    Path(path).write_text("".join(" ".join(f"{v:.17g}" for v in r) + "\n" for r in rows.tolist()))


def read_points(path: str | Path) -> TargetShape:
    data = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 6:
            raise ParseError(f"{path}:{lineno}: expected 6 values, got {len(tok)}")
        try:
            data.append([float(t) for t in tok])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric value") from None
    if not data:
        raise ParseError(f"{path}: no points")
    arr = np.array(data)
    try:
        return TargetShape(arr[:, :3], arr[:, 3:])
    except InvalidArgumentError as exc:
        raise ParseError(f"{path}: {exc}") from None


# --- manifests -----------------------------------------------------------
@dataclass(frozen=True)
class Example:
    id: str
    intrinsics: Path
    target: Path
    image: Path | None = None
    pyramid: Path | None = None
    target_mesh: Path | None = None

    def load_intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.load(self.intrinsics)

    def load_target(self) -> TargetShape:
        return read_points(self.target)

    def load_image(self) -> np.ndarray | None:
        return None if self.image is None else load_image(self.image)

    def load_pyramid(self) -> FeaturePyramid | None:
        return None if self.pyramid is None else FeaturePyramid.load(self.pyramid)


@dataclass(frozen=True)
class Manifest:
    examples: tuple[Example, ...]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def _record_line(text: str, record_id) -> str:
    if record_id is not None:
        needle = json.dumps(str(record_id))
        pos = text.find(needle)
        if pos >= 0:
            return f"line {text.count(chr(10), 0, pos) + 1}"
    return "unknown line"


def load_manifest(path: str | Path) -> Manifest:
    """Read and validate a JSON manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read manifest ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from None
    records = doc.get("examples") if isinstance(doc, dict) else doc
    split = doc.get("split", "train") if isinstance(doc, dict) else "train"
    if not isinstance(records, list):
        raise ParseError(f"{path}: manifest must hold an 'examples' list")
    if not records:
        raise ParseError(f"{path}: manifest has no examples")
    base = path.parent
    seen: dict[str, int] = {}
    examples = []
    for i, rec in enumerate(records):
        rid = rec.get("id") if isinstance(rec, dict) else None
        where = f"{path}: record {i} ({_record_line(text, rid)})"
        if not isinstance(rec, dict) or not isinstance(rid, str) or not rid:
            raise ParseError(f"{where}: each record needs a string 'id'")
        if rid in seen:
            raise ParseError(f"{where}: duplicate id {rid!r} (records {seen[rid]} and {i})")
        seen[rid] = i
        for key in ("intrinsics", "target"):
            if not isinstance(rec.get(key), str):
                raise ParseError(f"{where}: missing '{key}' path")
        if not (isinstance(rec.get("image"), str) or isinstance(rec.get("pyramid"), str)):
            raise ParseError(f"{where}: needs an 'image' or 'pyramid' path")
        paths = {}
        for key in ("intrinsics", "target", "image", "pyramid", "target_mesh"):
            if rec.get(key) is None:
                paths[key] = None
                continue
            p = base / rec[key]
            if not p.is_file():
                raise ParseError(f"{where}: {key} file {p} does not exist")
            paths[key] = p
        examples.append(Example(id=rid, **paths))
    return Manifest(tuple(examples), split)


def write_manifest(path: str | Path, examples: list[dict], split: str = "train") -> None:
    Path(path).write_text(json.dumps({"split": split, "examples": examples}, indent=2) + "\n")


# --- synthetic shapes ----------------------------------------------------
def _param(params: dict, key: str, default, n: int | None = None) -> np.ndarray:
    v = np.asarray(params.get(key, default), dtype=np.float64)
    if n is not None and v.shape != (n,):
        raise InvalidArgumentError(f"parameter {key!r} needs {n} values, got {v.tolist()}")
    return v


def _sample_cube(params, count, rng):
    center = _param(params, "center", (0.0, 0.0, 0.8), 3)
    size = float(params.get("size", 0.3))
    if not size > 0:
        raise InvalidArgumentError(f"cube size must be positive, got {size}")
    face = rng.integers(0, 6, count)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    uv = rng.uniform(-0.5, 0.5, (count, 2)) * size
    pts = np.zeros((count, 3))
    normals = np.zeros((count, 3))
    rows = np.arange(count)
    pts[rows, axis] = sign * size / 2
    pts[rows, (axis + 1) % 3] = uv[:, 0]
    pts[rows, (axis + 2) % 3] = uv[:, 1]
    normals[rows, axis] = sign
    return pts + center, normals


def _sample_cylinder(params, count, rng):
    center = _param(params, "center", (0.0, 0.0, 0.8), 3)
    radius = float(params.get("radius", 0.15))
    height = float(params.get("height", 0.4))
    if not (radius > 0 and height > 0):
        raise InvalidArgumentError(f"cylinder radius and height must be positive, got {radius}, {height}")
    side, cap = 2 * np.pi * radius * height, np.pi * radius**2
    kind = rng.choice(3, size=count, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, count)
    r = np.where(kind == 0, radius, radius * np.sqrt(rng.random(count)))
    y = np.where(kind == 0, rng.uniform(-height / 2, height / 2, count), np.where(kind == 1, height / 2, -height / 2))
    pts = np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)
    normals = np.zeros((count, 3))
    normals[kind == 0] = np.stack([np.cos(theta), np.zeros(count), np.sin(theta)], axis=1)[kind == 0]
    normals[kind == 1] = (0.0, 1.0, 0.0)
    normals[kind == 2] = (0.0, -1.0, 0.0)
    return pts + center, normals


def _sample_ellipsoid(params, count, rng):
    center = _param(params, "center", (0.0, 0.0, 0.8), 3)
    radii = _param(params, "radii", (0.2, 0.2, 0.4), 3)
    if np.any(~(radii > 0)):
        raise InvalidArgumentError(f"ellipsoid radii must be positive, got {radii.tolist()}")
    # rejection sampling against the area element of the sphere -> ellipsoid map
    a, b, c = radii
    gmax = np.max([b * c, a * c, a * b])
    out = []
    have = 0
    while have < count:
        u = rng.normal(size=(2 * (count - have) + 16, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        keep = u[rng.random(len(u)) * gmax < g]
        out.append(keep)
        have += len(keep)
    u = np.concatenate(out)[:count]
    pts = u * radii
    n = pts / radii**2
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return pts + center, n


_SHAPES = {"cube": _sample_cube, "cylinder": _sample_cylinder, "ellipsoid": _sample_ellipsoid}


def make_synthetic_target(shape: str, params: dict | None = None, sample_count: int = 2048, seed: int = 0) -> TargetShape:
    """Area-uniform samples with analytic normals from a primitive.

    ``cube``: ``center``, ``size`` (edge length). ``cylinder``: ``center``,
    ``radius``, ``height`` (axis along y). ``ellipsoid``: ``center``, ``radii``.
    """
    if shape not in _SHAPES:
        raise InvalidArgumentError(f"unknown shape {shape!r}; choose from {sorted(_SHAPES)}")
    if sample_count <= 0:
        raise InvalidArgumentError(f"sample_count must be positive, got {sample_count}")
    rng = np.random.default_rng(seed)
    pts, normals = _SHAPES[shape](params or {}, int(sample_count), rng)
    return TargetShape(pts, normals)


def cube_mesh(center=(0.0, 0.0, 0.8), size: float = 0.3) -> Mesh:
    c = np.asarray(center, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64) * size / 2 + c
    faces = np.array(
        [
            [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
            [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
            [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
        ]
    )
    return Mesh(corners, faces)


# --- procedural images ---------------------------------------------------
def render_target_image(target: TargetShape, K: CameraIntrinsics, blur: int = 1) -> np.ndarray:
    """Point-splat rendering: shading, inverse depth and a normal channel, in [0, 1]."""
    with np.errstate(all="ignore"):
        uv = project(target.points, K).data
    px = np.round(uv).astype(np.int64)
    ok = (px[:, 0] >= 0) & (px[:, 0] < K.width) & (px[:, 1] >= 0) & (px[:, 1] < K.height)
    z = target.points[:, 2]
    flat = px[:, 1] * K.width + px[:, 0]
    depth = np.full(K.width * K.height, np.inf)
    np.minimum.at(depth, flat[ok], z[ok])
    front = ok & (z == depth[np.where(ok, flat, 0)])
    img = np.zeros((K.height * K.width, 3))
    view = target.points / np.linalg.norm(target.points, axis=1, keepdims=True)
    shade = np.clip(-(target.normals * view).sum(axis=1), 0.0, 1.0)
    idx = np.flatnonzero(front)
    # lowest point index wins among equal-depth splats
    order = idx[np.argsort(flat[idx], kind="stable")]
    _, first = np.unique(flat[order], return_index=True)
    sel = order[first]
    img[flat[sel], 0] = 0.2 + 0.8 * shade[sel]
    img[flat[sel], 1] = np.clip(0.5 / z[sel], 0.0, 1.0)
    img[flat[sel], 2] = 0.5 * (target.normals[sel, 0] + 1.0)
    img = img.reshape(K.height, K.width, 3)
    for _ in range(blur):
        pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
        img = sum(pad[i:i + K.height, j:j + K.width] for i in range(3) for j in range(3)) / 9.0
    return img
