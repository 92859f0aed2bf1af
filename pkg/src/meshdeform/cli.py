"""Command-line entry point: ``meshdeform <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .dataset import load_manifest, read_obj, write_obj
from .errors import NumericError
from .gcn import ModelConfig, unpool_edge, unpool_face
from .mesh import make_ellipsoid, make_uv_ellipsoid
from .metrics import DEFAULT_TAU

log = logging.getLogger("meshdeform")


def cmd_train(args) -> int:
    cfg = pipeline.RunConfig.load(args.config, seed=args.seed, output_dir=args.out and Path(args.out).resolve())
    try:
        final = pipeline.train(cfg)
    except NumericError as exc:
        log.error("%s", exc)
        return 1
    print(final)
    return 0


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        log.error("checkpoint %s does not exist", ckpt)
        return 2
    config = ModelConfig.load(args.config)
    initial = read_obj(args.initial_mesh) if args.initial_mesh else None
    model = pipeline.build_model(config, initial or pipeline.load_default_ellipsoid(), ckpt)
    manifest = load_manifest(args.manifest)
    chosen = [ex for ex in manifest if args.example is None or ex.id == args.example]
    if not chosen:
        log.error("example %r not in manifest", args.example)
        return 2
    for ex in chosen:
        for p in pipeline.infer(model, ex, args.out):
            print(p)
    return 0


def cmd_eval(args) -> int:
    records = pipeline.evaluate_dir(
        args.pred, args.manifest, args.out, tau=args.tau, samples=args.samples, emd_points=args.emd_points, seed=args.seed
    )
    failed = [r["example_id"] for r in records if r["status"] != "ok"]
    for r in records:
        if r["status"] == "ok":
            print(f"{r['example_id']}: F(tau)={r['f_score'][0]:.2f} F(2tau)={r['f_score'][1]:.2f} CD={r['cd']:.6g} EMD={r['emd']:.6g}")
        else:
            print(f"{r['example_id']}: FAILED ({r['error']})")
    return 1 if failed else 0


def cmd_unpool(args) -> int:
    mesh = read_obj(args.input)
    out = unpool_face(mesh) if args.mode == "face" else unpool_edge(mesh)
    write_obj(args.out, out)
    print(f"{mesh.num_vertices} -> {out.num_vertices} vertices, {out.num_edges} edges, {out.num_faces} faces")
    return 0


def cmd_make_ellipsoid(args) -> int:
    if args.level is None:
        mesh = make_uv_ellipsoid(args.radii, args.center)
    else:
        mesh = make_ellipsoid(args.radii, args.center, args.level)
    write_obj(args.out, mesh)
    print(f"{mesh.num_vertices} vertices, {mesh.num_edges} edges, {mesh.num_faces} faces")
    return 0


def cmd_make_fixtures(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        log.error("cannot write to %s: %s", out, exc.strerror)
        return 2
    pipeline.make_fixtures(out, seed=args.seed, steps=args.steps)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshdeform", description="Cascaded graph-convolutional mesh deformation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a cascade from a run config")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="override the output directory")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write the per-block meshes for manifest examples")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config", required=True, help="model config JSON")
    i.add_argument("--manifest", required=True)
    i.add_argument("--example", help="only this example id")
    i.add_argument("--initial-mesh", help="initial mesh OBJ (default: shipped 156-vertex ellipsoid)")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted meshes against manifest targets")
    e.add_argument("--pred", required=True, help="directory of predictions (<id>/meshN.obj or <id>.obj)")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--tau", type=float, default=DEFAULT_TAU, help="squared-distance F-score threshold (2*tau is also reported)")
    e.add_argument("--samples", type=int, default=pipeline.DEFAULT_SAMPLES)
    e.add_argument("--emd-points", type=int, default=512)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    u = sub.add_parser("unpool", help="edge- or face-based unpooling of an OBJ mesh")
    u.add_argument("input")
    u.add_argument("--out", required=True)
    u.add_argument("--mode", choices=("edge", "face"), default="edge")
    u.set_defaults(func=cmd_unpool)

    m = sub.add_parser("make-ellipsoid", help="write an initial ellipsoid OBJ")
    m.add_argument("--out", required=True)
    m.add_argument("--radii", type=float, nargs=3, default=(0.2, 0.2, 0.4))
    m.add_argument("--center", type=float, nargs=3, default=(0.0, 0.0, 0.8))
    m.add_argument("--level", type=int, help="icosphere subdivision level (default: the 156-vertex UV ellipsoid)")
    m.set_defaults(func=cmd_make_ellipsoid)

    f = sub.add_parser("make-fixtures", help="generate the deterministic fixture tree")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--steps", type=int, default=pipeline.OVERFIT_STEPS, help="step budget written into run_overfit.json")
    f.set_defaults(func=cmd_make_fixtures)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
