"""Image features, pinhole projection and bilinear perceptual pooling."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .container import read_container, write_container
from .errors import InvalidArgumentError, ParseError

Z_EPS = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.f_x > 0 and self.f_y > 0):
            raise InvalidArgumentError(f"focal lengths must be positive, got {self.f_x}, {self.f_y}")
        if not (self.width > 0 and self.height > 0):
            raise InvalidArgumentError(f"image size must be positive, got {self.width}x{self.height}")

    @classmethod
    def load(cls, path: str | Path) -> "CameraIntrinsics":
        try:
            d = json.loads(Path(path).read_text())
            return cls(float(d["f_x"]), float(d["f_y"]), float(d["c_x"]), float(d["c_y"]), int(d["width"]), int(d["height"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}: bad intrinsics file ({exc!r})") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


@dataclass
class FeaturePyramid:
    """Feature maps (``H_k x W_k x C_k``) and their scale relative to the image."""

    maps: list[Tensor]
    scales: list[float]

    def __post_init__(self):
        if len(self.maps) != len(self.scales):
            raise InvalidArgumentError(f"{len(self.maps)} maps but {len(self.scales)} scales")
        if any(not s > 0 for s in self.scales):
            raise InvalidArgumentError(f"scale factors must be positive, got {self.scales}")
        self.maps = [ag.as_tensor(m) for m in self.maps]
        for m in self.maps:
            if m.ndim != 3 or m.shape[0] == 0 or m.shape[1] == 0:
                raise InvalidArgumentError(f"feature map must be a nonempty H x W x C array, got {m.shape}")

    @property
    def channels(self) -> int:
        return sum(m.shape[2] for m in self.maps)

    def save(self, path: str | Path) -> None:
        arrays = {f"level{k}": m.data for k, m in enumerate(self.maps)}
        write_container(path, arrays, {"format": "meshdeform-pyramid", "levels": len(self.maps), "scales": list(self.scales)})

    @classmethod
    def load(cls, path: str | Path) -> "FeaturePyramid":
        arrays, header = read_container(path)
        if header.get("format") != "meshdeform-pyramid":
            raise ParseError(f"{path}: not a pyramid file")
        n = int(header["levels"])
        return cls([Tensor(arrays[f"level{k}"]) for k in range(n)], [float(s) for s in header["scales"]])


def project(points, K: CameraIntrinsics) -> Tensor:
    """Pinhole projection of ``N x 3`` camera-frame points to ``N x 2`` pixels.

    Depths at or below ``Z_EPS`` are clamped to ``Z_EPS`` (with a warning).
    """
    pts = ag.as_tensor(points)
    single = pts.ndim == 1
    if single:
        pts = ag.reshape(pts, (1, 3))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgumentError(f"project expects N x 3 points, got {pts.shape}")
    z = pts[:, 2:3]
    if np.any(z.data <= Z_EPS):
        warnings.warn(f"points at depth <= {Z_EPS} clamped to {Z_EPS}", RuntimeWarning)
        z = ag.maximum(z, Z_EPS)
    xy = pts[:, 0:2] / z
    out = xy * np.array([K.f_x, K.f_y]) + np.array([K.c_x, K.c_y])
    return ag.reshape(out, (2,)) if single else out


def _bilinear_weights(fmap_shape, loc: np.ndarray):
    H, W = fmap_shape[:2]
    x = np.clip(loc[:, 0], 0.0, W - 1.0)
    y = np.clip(loc[:, 1], 0.0, H - 1.0)
    inside_x = (loc[:, 0] >= 0.0) & (loc[:, 0] <= W - 1.0)
    inside_y = (loc[:, 1] >= 0.0) & (loc[:, 1] <= H - 1.0)
    x1 = np.clip(np.floor(x), 0, max(W - 2, 0)).astype(np.int64)
    y1 = np.clip(np.floor(y), 0, max(H - 2, 0)).astype(np.int64)
    x2 = np.minimum(x1 + 1, W - 1)
    y2 = np.minimum(y1 + 1, H - 1)
    # unit cell; a 1-pixel axis degenerates to the single column/row
    tx = x - x1 if W > 1 else np.zeros_like(x)
    ty = y - y1 if H > 1 else np.zeros_like(y)
    return x1, x2, y1, y2, tx, ty, inside_x & (W > 1), inside_y & (H > 1)


def bilinear_pool(feature_map, locations) -> Tensor:
    """Bilinearly sample an ``H x W x C`` grid at ``N x 2`` continuous ``(x, y)`` locations.

    Grid value ``[i, j]`` sits at ``(x=j, y=i)``. Locations outside the grid
    are clamped to the border. Differentiable in both arguments.
    """
    fmap = ag.as_tensor(feature_map)
    loc = ag.as_tensor(locations)
    single = loc.ndim == 1
    if single:
        loc = ag.reshape(loc, (1, 2))
    if fmap.ndim != 3 or fmap.shape[0] == 0 or fmap.shape[1] == 0:
        raise InvalidArgumentError(f"feature map must be a nonempty H x W x C array, got {fmap.shape}")
    if loc.ndim != 2 or loc.shape[1] != 2:
        raise InvalidArgumentError(f"locations must be N x 2, got {loc.shape}")
    F = fmap.data
    x1, x2, y1, y2, tx, ty, gx_ok, gy_ok = _bilinear_weights(F.shape, loc.data)
    f11, f21 = F[y1, x1], F[y1, x2]
    f12, f22 = F[y2, x1], F[y2, x2]
    w11 = (1 - tx) * (1 - ty)
    w21 = tx * (1 - ty)
    w12 = (1 - tx) * ty
    w22 = tx * ty
    out = w11[:, None] * f11 + w21[:, None] * f21 + w12[:, None] * f12 + w22[:, None] * f22

    def bw(g):
        gmap = None
        if fmap.requires_grad:
            gmap = np.zeros_like(F)
            for yy, xx, w in ((y1, x1, w11), (y1, x2, w21), (y2, x1, w12), (y2, x2, w22)):
                np.add.at(gmap, (yy, xx), w[:, None] * g)
        gloc = None
        if loc.requires_grad:
            dx = ((1 - ty)[:, None] * (f21 - f11) + ty[:, None] * (f22 - f12))
            dy = ((1 - tx)[:, None] * (f12 - f11) + tx[:, None] * (f22 - f21))
            gloc = np.stack([(dx * g).sum(axis=1) * gx_ok, (dy * g).sum(axis=1) * gy_ok], axis=1)
        return gmap, gloc

    res = Tensor._make(out, (fmap, loc), bw)
    return ag.reshape(res, (F.shape[2],)) if single else res


def perceptual_pool(vertices, pyramid: FeaturePyramid, K: CameraIntrinsics) -> Tensor:
    """Project vertices and concatenate the bilinear samples from every pyramid level."""
    uv = project(vertices, K)
    pooled = [bilinear_pool(m, uv * s) for m, s in zip(pyramid.maps, pyramid.scales)]
    return ag.concat(pooled, axis=1)


@dataclass(frozen=True)
class ExtractorConfig:
    """Strided conv stack; each stage emits one pyramid level."""

    image_size: tuple[int, int] = (64, 64)
    channels: tuple[int, ...] = (16, 16, 16)
    kernels: tuple[int, ...] = (5, 3, 3)
    strides: tuple[int, ...] = (4, 2, 2)

    def __post_init__(self):
        n = len(self.channels)
        if not (len(self.kernels) == len(self.strides) == n):
            raise InvalidArgumentError("channels, kernels and strides must have equal length")

    @property
    def out_channels(self) -> int:
        return sum(self.channels)

    @property
    def scales(self) -> list[float]:
        total = 1
        out = []
        for s in self.strides:
            total *= s
            out.append(1.0 / total)
        return out


class FeatureExtractor:
    """Small convolutional pathway producing a multi-scale pyramid."""

    def __init__(self, config: ExtractorConfig = ExtractorConfig(), rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        cin = 3
        for k, (c, ks) in enumerate(zip(config.channels, config.kernels)):
            fan_in, fan_out = ks * ks * cin, ks * ks * c
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"conv{k}/w"] = Tensor(rng.uniform(-limit, limit, (ks, ks, cin, c)), requires_grad=True)
            self.params[f"conv{k}/b"] = Tensor(np.zeros(c), requires_grad=True)
            cin = c

    def __call__(self, image) -> FeaturePyramid:
        img = ag.as_tensor(image)
        H, W = self.config.image_size
        if img.shape != (H, W, 3):
            raise InvalidArgumentError(f"image must be {H}x{W}x3, got {img.shape}")
        maps = []
        x = img
        for k, (ks, s) in enumerate(zip(self.config.kernels, self.config.strides)):
            x = ag.relu(ag.conv2d(x, self.params[f"conv{k}/w"], self.params[f"conv{k}/b"], stride=s, padding=ks // 2))
            maps.append(x)
        return FeaturePyramid(maps, self.config.scales)


def extract_features(image, extractor: FeatureExtractor) -> FeaturePyramid:
    return extractor(image)


# --- raw image text grid -------------------------------------------------
def write_image_text(path: str | Path, image: np.ndarray) -> None:
    """Plain-text image: a ``H W 3`` header line, then one row of ``W*3`` floats per line."""
    img = np.asarray(image, dtype=np.float64)
    H, W, C = img.shape
    lines = [f"{H} {W} {C}"]
    for row in img.reshape(H, W * C):
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_image_text(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    try:
        H, W, C = (int(t) for t in lines[0].split())
    except (IndexError, ValueError):
        raise ParseError(f"{path}:1: expected 'H W 3' header") from None
    if C != 3:
        raise ParseError(f"{path}:1: expected 3 channels, got {C}")
    rows = []
    for i, line in enumerate(lines[1:H + 1], start=2):
        try:
            vals = [float(t) for t in line.split()]
        except ValueError:
            raise ParseError(f"{path}:{i}: non-numeric value") from None
        if len(vals) != W * C:
            raise ParseError(f"{path}:{i}: expected {W * C} values, got {len(vals)}")
        rows.append(vals)
    if len(rows) != H:
        raise ParseError(f"{path}: expected {H} image rows, got {len(rows)}")
    return np.array(rows).reshape(H, W, C)


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG (scaled to [0, 1]) or the plain-text grid format."""
    p = Path(path)
    if p.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(p) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return read_image_text(p)


def paper_extractor_channels() -> Sequence[int]:
    """conv3_3, conv4_3 and conv5_3 widths of VGG-16."""
    return (256, 512, 512)
