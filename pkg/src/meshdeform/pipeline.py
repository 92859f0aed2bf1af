"""Training, inference, evaluation and fixture generation behind the CLI."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .dataset import (
    Example,
    cube_mesh,
    load_manifest,
    make_synthetic_target,
    read_obj,
    render_target_image,
    write_manifest,
    write_obj,
    write_points,
)
from .errors import InvalidArgumentError, NumericError, ParseError
from .features import CameraIntrinsics, write_image_text
from .gcn import CascadeModel, ModelConfig, forward_cascade, paper_config
from .losses import LossWeights, total_loss
from .mesh import Mesh, load_default_ellipsoid, make_uv_ellipsoid
from .metrics import DEFAULT_TAU, EMD_CAP, evaluate

log = logging.getLogger("meshdeform")

DEFAULT_SAMPLES = 2466


@dataclass
class RunConfig:
    model_config: Path
    manifest: Path
    output_dir: Path
    steps: int = 1000
    lr_schedule: list = field(default_factory=lambda: [[0, 3e-5], [800, 1e-5]])
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 100
    initial_mesh: Path | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidArgumentError(f"step budget must be >= 0, got {self.steps}")
        if self.checkpoint_every <= 0:
            raise InvalidArgumentError(f"checkpoint_every must be positive, got {self.checkpoint_every}")
        if not self.lr_schedule or any(lr <= 0 for _, lr in self.lr_schedule):
            raise InvalidArgumentError(f"learning rates must be positive, got {self.lr_schedule}")
        if min(s for s, _ in self.lr_schedule) != 0:
            raise InvalidArgumentError("learning-rate schedule must start at step 0")

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: cannot read run config ({exc})") from None
        d.update({k: v for k, v in overrides.items() if v is not None})
        base = path.parent
        opt = d.pop("optimizer", {})
        for key in ("lr_schedule", "weight_decay", "betas", "eps"):
            if key in opt:
                d.setdefault(key, opt[key])
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        for key in ("model_config", "manifest", "output_dir", "initial_mesh"):
            if d.get(key) is not None:
                d[key] = base / d[key]
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ParseError(f"{path}: {exc}") from None
        for key in ("model_config", "manifest", "initial_mesh"):
            p = getattr(cfg, key)
            if p is not None and not p.is_file():
                raise ParseError(f"{path}: {key} {p} does not exist")
        return cfg


def _load_initial(path: Path | None) -> Mesh:
    return read_obj(path) if path is not None else load_default_ellipsoid()


class _ExampleCache:
    def __init__(self):
        self._data: dict[str, tuple] = {}

    def get(self, ex: Example):
        if ex.id not in self._data:
            self._data[ex.id] = (ex.load_image(), ex.load_pyramid(), ex.load_intrinsics(), ex.load_target())
        return self._data[ex.id]


def _checkpoint(model: CascadeModel, opt: ag.Adam | None, path: Path, step: int, seed: int) -> None:
    arrays = dict(model.state_dict())
    if opt is not None:
        arrays.update(opt.state_arrays())
    ag.save_checkpoint(path, arrays, {"step": step, "seed": seed, "model": model.config.to_dict()})


def build_model(config: ModelConfig, initial: Mesh, checkpoint: str | Path | None = None, seed: int = 0) -> CascadeModel:
    model = CascadeModel(config, initial, seed=seed)
    if checkpoint is not None:
        arrays, _ = ag.load_checkpoint(checkpoint)
        model.load_state_dict(arrays)
    return model


def train(cfg: RunConfig) -> Path:
    """Batch-size-1 training; returns the path of the last checkpoint written."""
    model_cfg = ModelConfig.load(cfg.model_config)
    manifest = load_manifest(cfg.manifest)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = CascadeModel(model_cfg, _load_initial(cfg.initial_mesh), seed=cfg.seed)
    opt = ag.Adam(model.params(), lr=ag.lr_at(cfg.lr_schedule, 0), betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay)
    last = out / "checkpoint_000000.ckpt"
    _checkpoint(model, opt, last, 0, cfg.seed)
    if cfg.steps == 0:
        return last
    cache = _ExampleCache()
    log_path = out / "loss_log.jsonl"
    log_path.write_text("")
    with open(log_path, "a") as logf:
        for step in range(cfg.steps):
            ex = manifest.examples[step % len(manifest)]
            image, pyramid, K, target = cache.get(ex)
            outputs = model(image, K, pyramid)
            loss, report = total_loss(outputs, target, cfg.loss_weights)
            if not math.isfinite(report.total):
                raise NumericError(f"non-finite loss at step {step}; last good checkpoint is {last}")
            lr = ag.lr_at(cfg.lr_schedule, step)
            logf.write(report.to_json(step=step, example_id=ex.id, lr=lr) + "\n")
            logf.flush()
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            done = step + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.steps:
                last = out / f"checkpoint_{done:06d}.ckpt"
                _checkpoint(model, opt, last, done, cfg.seed)
    final = out / "final.ckpt"
    final.write_bytes(last.read_bytes())
    return final


def infer(model: CascadeModel, ex: Example, out_dir: str | Path) -> list[Path]:
    """Write ``mesh1.obj`` ... ``meshN.obj`` for one example under ``out_dir/<id>/``."""
    image, pyramid, K = ex.load_image(), ex.load_pyramid(), ex.load_intrinsics()
    t0 = time.perf_counter()
    meshes = forward_cascade(image, K, model, pyramid)
    elapsed = time.perf_counter() - t0
    log.info("%s: %d vertices in %.2f ms", ex.id, meshes[-1].num_vertices, 1e3 * elapsed)
    target_dir = Path(out_dir) / ex.id
    target_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(meshes, start=1):
        p = target_dir / f"mesh{i}.obj"
        write_obj(p, m)
        paths.append(p)
    return paths


def _prediction_path(pred_dir: Path, ex_id: str) -> Path:
    d = pred_dir / ex_id
    if d.is_dir():
        meshes = sorted(d.glob("mesh*.obj"), key=lambda p: int(p.stem[4:]) if p.stem[4:].isdigit() else -1)
        if meshes:
            return meshes[-1]
    flat = pred_dir / f"{ex_id}.obj"
    if flat.is_file():
        return flat
    raise FileNotFoundError(f"no prediction for {ex_id!r} under {pred_dir}")


def eval_example(ex: Example, pred_dir: Path, tau: float, samples: int, emd_points: int, seed: int) -> dict:
    try:
        pred = read_obj(_prediction_path(pred_dir, ex.id))
        pred_pts, _ = pred.sample_surface(samples, seed)
        if ex.target_mesh is not None:
            gt_pts, _ = read_obj(ex.target_mesh).sample_surface(samples, seed)
        else:
            gt_pts = ex.load_target().points
        rep = evaluate(pred_pts, gt_pts, (tau, 2 * tau), emd_points=emd_points, seed=seed)
    except (OSError, ValueError) as exc:
        return {"example_id": ex.id, "status": "failed", "error": str(exc)}
    return {"example_id": ex.id, "status": "ok", **rep.to_dict()}


CSV_COLUMNS = ["example_id", "f_tau", "f_2tau", "precision", "recall", "cd", "emd", "hausdorff"]


def _csv_row(rec: dict) -> list:
    return [rec["example_id"], rec["f_score"][0], rec["f_score"][1], rec["precision"][0], rec["recall"][0], rec["cd"], rec["emd"], rec["hausdorff"]]


def evaluate_dir(
    pred_dir: str | Path,
    manifest_path: str | Path,
    out_dir: str | Path,
    tau: float = DEFAULT_TAU,
    samples: int = DEFAULT_SAMPLES,
    emd_points: int = EMD_CAP,
    seed: int = 0,
    threads: int | None = None,
) -> list[dict]:
    """Metrics per manifest example; writes ``metrics.jsonl`` and ``metrics.csv``."""
    manifest = load_manifest(manifest_path)
    pred_dir = Path(pred_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if threads is None:
        threads = int(os.environ.get("MESHDEFORM_THREADS", "1") or 1)
    args = [(ex, pred_dir, tau, samples, emd_points, seed) for ex in manifest]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(lambda a: eval_example(*a), args))
    else:
        records = [eval_example(*a) for a in args]
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    ok = [r for r in records if r["status"] == "ok"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in ok:
        w.writerow(_csv_row(rec))
    if ok:
        rows = np.array([_csv_row(r)[1:] for r in ok], dtype=np.float64)
        w.writerow(["mean", *[float(v) for v in rows.mean(axis=0)]])
    (out / "metrics.csv").write_text(buf.getvalue())
    return records


# --- fixtures ------------------------------------------------------------
FIXTURE_INTRINSICS = CameraIntrinsics(f_x=60.0, f_y=60.0, c_x=32.0, c_y=32.0, width=64, height=64)
FIXTURE_SHAPES = {
    "cube": {"center": [0.0, 0.0, 0.8], "size": 0.3},
    "cylinder": {"center": [0.0, 0.0, 0.8], "radius": 0.15, "height": 0.35},
    "ellipsoid": {"center": [0.0, 0.0, 0.8], "radii": [0.15, 0.15, 0.25]},
}


OVERFIT_STEPS = 600
OVERFIT_LR = 1e-4


def overfit_schedule(steps: int) -> list[list[float]]:
    """Single-example schedule: the same 3:1 drop at 80% of the budget, from a higher start."""
    return [[0, OVERFIT_LR], [max(int(0.8 * steps), 1), OVERFIT_LR / 3]]


def _shape_mesh(shape: str, params: dict) -> Mesh | None:
    if shape == "cube":
        return cube_mesh(params["center"], params["size"])
    if shape == "ellipsoid":
        return make_uv_ellipsoid(params["radii"], params["center"], rings=23, segments=32)
    return None


def make_fixtures(out_dir: str | Path, seed: int = 0, target_points: int = 2048, steps: int = OVERFIT_STEPS) -> Path:
    """Write the deterministic fixture tree used by the tests and the quick-start."""
    out = Path(out_dir)
    (out / "examples").mkdir(parents=True, exist_ok=True)
    write_obj(out / "ellipsoid_156.obj", make_uv_ellipsoid())
    K = FIXTURE_INTRINSICS
    K.save(out / "intrinsics.json")
    ModelConfig().save(out / "model_desk.json")
    paper_config().save(out / "model_paper.json")
    records = []
    for k, (shape, params) in enumerate(FIXTURE_SHAPES.items()):
        d = out / "examples" / shape
        d.mkdir(exist_ok=True)
        target = make_synthetic_target(shape, params, target_points, seed + k)
        write_points(d / "target.xyzn", target)
        write_image_text(d / "image.txt", render_target_image(target, K))
        rec = {
            "id": shape,
            "image": f"examples/{shape}/image.txt",
            "intrinsics": "intrinsics.json",
            "target": f"examples/{shape}/target.xyzn",
        }
        mesh = _shape_mesh(shape, params)
        if mesh is not None:
            write_obj(d / "target.obj", mesh)
            rec["target_mesh"] = f"examples/{shape}/target.obj"
        records.append(rec)
    write_manifest(out / "manifest_train.json", records[:1], split="train")
    write_manifest(out / "manifest_test.json", records, split="test")
    run = {
        "model_config": "model_desk.json",
        "manifest": "manifest_train.json",
        "output_dir": "runs/overfit",
        "initial_mesh": "ellipsoid_156.obj",
        "steps": steps,
        "checkpoint_every": 100,
        "seed": seed,
        "optimizer": {"lr_schedule": overfit_schedule(steps), "weight_decay": 1e-5},
        "loss_weights": {"normal": 1.6e-4, "laplacian": 0.3, "edge": 0.1},
    }
    (out / "run_overfit.json").write_text(json.dumps(run, indent=2) + "\n")
    return out
