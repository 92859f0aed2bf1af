"""Graph convolution, G-ResNet deformation blocks, unpooling and the cascade."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidArgumentError, ParseError
from .features import CameraIntrinsics, ExtractorConfig, FeatureExtractor, FeaturePyramid, perceptual_pool
from .mesh import Mesh, edges_from_faces


# --- unpooling -----------------------------------------------------------
class UnpoolPlan(NamedTuple):
    parents: np.ndarray  # (E, 2) endpoints of the edge each new vertex splits
    faces: np.ndarray
    edges: np.ndarray


def edge_unpool_plan(faces: np.ndarray, num_vertices: int) -> UnpoolPlan:
    """Topology of a 1-to-4 midpoint split.

    New vertex ``num_vertices + e`` sits on edge ``e`` of the sorted edge list.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise InvalidArgumentError(f"edge unpooling needs triangular faces, got shape {faces.shape}")
    edges = edges_from_faces(faces)
    key = edges[:, 0] * num_vertices + edges[:, 1]

    def mid(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return num_vertices + np.searchsorted(key, lo * num_vertices + hi)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
    new_faces = np.stack(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return UnpoolPlan(edges, new_faces, edges_from_faces(new_faces))


def unpool_edge(mesh: Mesh) -> Mesh:
    """Insert a vertex at every edge midpoint and split each face into four.

    Coordinates and features of new vertices average the two edge endpoints.
    """
    plan = edge_unpool_plan(mesh.faces, mesh.num_vertices)
    p0, p1 = plan.parents[:, 0], plan.parents[:, 1]
    v = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[p0] + mesh.vertices[p1])])
    f = np.concatenate([mesh.features, 0.5 * (mesh.features[p0] + mesh.features[p1])])
    return Mesh(v, plan.faces, plan.edges, f, validate=False)


def unpool_face(mesh: Mesh) -> Mesh:
    """Insert a centroid vertex per face joined to its three corners."""
    f = mesh.faces
    if f.ndim != 2 or f.shape[1] != 3:
        raise InvalidArgumentError(f"face unpooling needs triangular faces, got shape {f.shape}")
    n = mesh.num_vertices
    centre = n + np.arange(len(f))
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    faces = np.stack([np.stack([a, b, centre], 1), np.stack([b, c, centre], 1), np.stack([c, a, centre], 1)], 1).reshape(-1, 3)
    v = np.concatenate([mesh.vertices, mesh.vertices[f].mean(axis=1)])
    feats = np.concatenate([mesh.features, mesh.features[f].mean(axis=1)])
    return Mesh(v, faces, None, feats, validate=False)


def unpool_tensor(x: Tensor, parents: np.ndarray) -> Tensor:
    """Differentiable counterpart of the vertex/feature averaging in ``unpool_edge``."""
    mids = (ag.gather_rows(x, parents[:, 0]) + ag.gather_rows(x, parents[:, 1])) * 0.5
    return ag.concat([x, mids], axis=0)


# --- layers --------------------------------------------------------------
# The neighbour sum is unnormalised, so each output row adds up roughly 7
# vertex terms. Plain Glorot then lets activations grow by orders of
# magnitude per block; counting the input fan GRAPH_FAN times and halving
# each residual sum keeps the 14-layer stack near unit scale at init.
GRAPH_FAN = 20
RES_SCALE = 0.5


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, fan_scale: int = GRAPH_FAN) -> np.ndarray:
    """Glorot-uniform with the input fan counted over the graph neighbourhood."""
    limit = np.sqrt(6.0 / (fan_scale * fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


@dataclass
class GraphConvLayer:
    w0: Tensor
    w1: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.w0.shape != self.w1.shape:
            raise InvalidArgumentError(f"w0 {self.w0.shape} and w1 {self.w1.shape} must match")

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, bias: bool = True, zero: bool = False) -> "GraphConvLayer":
        if zero:
            w0, w1 = np.zeros((d_in, d_out)), np.zeros((d_in, d_out))
        else:
            w0, w1 = glorot(rng, d_in, d_out), glorot(rng, d_in, d_out)
        b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        return cls(Tensor(w0, requires_grad=True), Tensor(w1, requires_grad=True), b)

    @property
    def d_in(self) -> int:
        return self.w0.shape[0]

    @property
    def d_out(self) -> int:
        return self.w0.shape[1]

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}/w0": self.w0, f"{prefix}/w1": self.w1}
        if self.bias is not None:
            out[f"{prefix}/b"] = self.bias
        return out


def graph_conv(features, adjacency, layer: GraphConvLayer) -> Tensor:
    """``f_p' = f_p w0 + sum_{q in N(p)} f_q w1 (+ b)`` for every vertex ``p``.

    ``adjacency`` is a :class:`Mesh` or a sparse 0/1 matrix.
    """
    feats = ag.as_tensor(features)
    A = adjacency.adjacency if isinstance(adjacency, Mesh) else adjacency
    if feats.ndim != 2 or feats.shape[0] != A.shape[0]:
        raise InvalidArgumentError(f"features {feats.shape} do not match a graph of {A.shape[0]} vertices")
    if feats.shape[1] != layer.d_in:
        raise InvalidArgumentError(f"features have {feats.shape[1]} channels, layer expects {layer.d_in}")
    out = feats @ layer.w0 + ag.spmm(A, feats @ layer.w1)
    if layer.bias is not None:
        out = out + layer.bias
    return out


# --- configuration -------------------------------------------------------
@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 3
    hidden: int = 128
    layers_per_block: int = 14
    residual_stride: int = 2
    offset_mode: bool = True
    use_bias: bool = True
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    def __post_init__(self):
        if self.num_blocks < 1:
            raise InvalidArgumentError("need at least one deformation block")
        if self.layers_per_block < self.residual_stride or self.layers_per_block % self.residual_stride:
            raise InvalidArgumentError(
                f"layers_per_block ({self.layers_per_block}) must be a positive multiple of residual_stride ({self.residual_stride})"
            )

    @property
    def d_perc(self) -> int:
        return self.extractor.out_channels

    def block_input_dim(self, block: int) -> int:
        return self.d_perc + (3 if block == 0 else self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor"] = {k: list(v) for k, v in d["extractor"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        ex = d.pop("extractor", None)
        extractor = ExtractorConfig(**{k: tuple(v) for k, v in ex.items()}) if ex else ExtractorConfig()
        try:
            return cls(extractor=extractor, **d)
        except TypeError as exc:
            raise ParseError(f"bad model config: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def desk_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def paper_config(**overrides) -> ModelConfig:
    """Paper-sized widths: 1280 perceptual channels from a 224 x 224 image."""
    ex = ExtractorConfig(image_size=(224, 224), channels=(256, 512, 512), kernels=(5, 3, 3), strides=(4, 2, 2))
    return ModelConfig(extractor=ex, **overrides)


# --- deformation block ---------------------------------------------------
class DeformationBlock:
    """G-ResNet of ``layers`` graph convs in residual units plus a coordinate branch.

    Unit ``u`` computes ``relu(RES_SCALE * (x + conv(relu(conv(x)))))``. The first unit's
    shortcut starts after its first conv, which changes the width to
    ``hidden``.
    """

    def __init__(self, d_in: int, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        h = config.hidden
        self.layers: list[GraphConvLayer] = []
        for k in range(config.layers_per_block):
            self.layers.append(GraphConvLayer.init(rng, d_in if k == 0 else h, h, bias=config.use_bias))
        self.coord = GraphConvLayer.init(rng, h, 3, bias=config.use_bias, zero=config.offset_mode)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}/conv{k:02d}"))
        out.update(self.coord.params(f"{prefix}/coord"))
        return out

    def gresnet(self, x: Tensor, A) -> Tensor:
        stride = self.config.residual_stride
        for u in range(0, len(self.layers), stride):
            unit = self.layers[u:u + stride]
            if u == 0:
                x = ag.relu(graph_conv(x, A, unit[0]))
                unit = unit[1:]
                if not unit:
                    continue
            y = x
            for i, layer in enumerate(unit):
                y = graph_conv(y, A, layer)
                if i < len(unit) - 1:
                    y = ag.relu(y)
            x = ag.relu((x + y) * RES_SCALE)
        return x

    def __call__(self, coords: Tensor, features: Tensor, mesh: Mesh, pyramid: FeaturePyramid, K: CameraIntrinsics):
        perc = perceptual_pool(coords, pyramid, K)
        x = ag.concat([perc, features], axis=1)
        hidden = self.gresnet(x, mesh.adjacency)
        out = graph_conv(hidden, mesh.adjacency, self.coord)
        new_coords = coords + out if self.config.offset_mode else out
        return new_coords, hidden


def deformation_block(coords, features, mesh, pyramid, K, block: DeformationBlock):
    return block(ag.as_tensor(coords), ag.as_tensor(features), mesh, pyramid, K)


# --- cascade -------------------------------------------------------------
@dataclass
class BlockOutput:
    """One cascade stage: topology, input/output coordinates, output features."""

    mesh: Mesh
    coords_in: Tensor
    coords: Tensor
    features: Tensor

    def to_mesh(self) -> Mesh:
        return self.mesh.with_vertices(self.coords.data.copy())


class CascadeModel:
    def __init__(self, config: ModelConfig, initial_mesh: Mesh, seed: int = 0):
        self.config = config
        self.initial_mesh = initial_mesh
        rng = np.random.default_rng(seed)
        self.extractor = FeatureExtractor(config.extractor, rng)
        self.blocks = [DeformationBlock(config.block_input_dim(b), config, rng) for b in range(config.num_blocks)]
        # topology for every stage is fixed by the initial mesh
        self.meshes = [initial_mesh]
        self.plans: list[UnpoolPlan] = []
        for _ in range(config.num_blocks - 1):
            m = self.meshes[-1]
            plan = edge_unpool_plan(m.faces, m.num_vertices)
            self.plans.append(plan)
            self.meshes.append(Mesh(np.zeros((m.num_vertices + len(plan.parents), 3)), plan.faces, plan.edges, validate=False))

    def params(self) -> dict[str, Tensor]:
        out = {f"extractor/{k}": v for k, v in self.extractor.params.items()}
        for b, block in enumerate(self.blocks):
            out.update(block.params(f"block{b}"))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ParseError(f"checkpoint lacks parameters: {missing[:3]}{'...' if len(missing) > 3 else ''}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ParseError(f"parameter {k!r}: checkpoint shape {arrays[k].shape} != model shape {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def forward(self, image, K: CameraIntrinsics, pyramid: FeaturePyramid | None = None) -> list[BlockOutput]:
        if pyramid is None:
            pyramid = self.extractor(image)
        coords = Tensor(self.initial_mesh.vertices)
        feats = coords
        outputs = []
        for b, block in enumerate(self.blocks):
            topo = self.meshes[b]
            if b > 0:
                plan = self.plans[b - 1]
                coords = unpool_tensor(coords, plan.parents)
                feats = unpool_tensor(feats, plan.parents)
            new_coords, new_feats = block(coords, feats, topo, pyramid, K)
            outputs.append(BlockOutput(topo, coords, new_coords, new_feats))
            coords, feats = new_coords, new_feats
        return outputs

    __call__ = forward


def forward_cascade(image, K: CameraIntrinsics, model: CascadeModel, pyramid: FeaturePyramid | None = None) -> list[Mesh]:
    """Run the cascade and return the concrete mesh after every block."""
    with ag.no_grad():
        return [o.to_mesh() for o in model.forward(image, K, pyramid)]
