"""End-to-end acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line that the terminal summary prints.
"""
import itertools
import json
import math
import time

import numpy as np
import pytest

from meshdeform import autograd as ag
from meshdeform import pipeline
from meshdeform.autograd import Tensor, gradient_check
from meshdeform.cli import main
from meshdeform.dataset import load_manifest, read_obj
from meshdeform.features import CameraIntrinsics, ExtractorConfig, FeatureExtractor, bilinear_pool, project
from meshdeform.gcn import BlockOutput, GraphConvLayer, ModelConfig, graph_conv, unpool_edge, unpool_face
from meshdeform.losses import chamfer_loss, edge_length_loss, laplacian_loss, normal_loss, total_loss
from meshdeform.mesh import Mesh, TargetShape, make_ellipsoid, self_intersection_spot_check
from meshdeform.metrics import chamfer_distance, emd, f_score, hausdorff
from meshdeform.spatial import nearest

from conftest import ACCEPTANCE_LINES

GRAD_CONFIGS = 20
GRAD_TOL = 1e-4


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="module")
def fixture_tree(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_fixtures")
    pipeline.make_fixtures(out, seed=0)
    return out


# --- 1 ---------------------------------------------------------------------
def test_topology_cascade(fixture_tree):
    t0 = time.perf_counter()
    meshes = [read_obj(fixture_tree / "ellipsoid_156.obj")]
    for _ in range(2):
        meshes.append(unpool_edge(meshes[-1]))
    elapsed = time.perf_counter() - t0
    counts = [m.num_vertices for m in meshes]
    euler = [m.euler_characteristic() for m in meshes]
    handshake = all(3 * m.num_faces == 2 * m.num_edges for m in meshes)
    ok = counts == [156, 618, 2466] and euler == [2, 2, 2] and handshake and elapsed < 1.0
    record(1, "topology cascade 156 -> 618 -> 2466", ok, f"V={counts}, chi={euler}, 3F=2E {handshake}, {elapsed:.3f}s")
    assert ok


# --- 2 ---------------------------------------------------------------------
def _away_from_grid(r, lo, hi, size, margin=1e-3):
    loc = r.uniform(lo, hi, size)
    frac = loc - np.round(loc)
    loc[np.abs(frac) < margin] += 2 * margin
    return loc


def _chamfer_case(r):
    p = Tensor(r.normal(size=(int(r.integers(5, 40)), 3)), requires_grad=True)
    q = r.normal(size=(int(r.integers(5, 40)), 3))
    return lambda: chamfer_loss(p, q).loss, [p]


def _small_mesh(r):
    m = make_ellipsoid((0.2, 0.25, 0.3), (0, 0, 0.8), int(r.integers(0, 2)))
    return m, m.vertices + r.normal(scale=0.02, size=m.vertices.shape)


def _normal_case(r):
    m, v = _small_mesh(r)
    pts, nrm = m.sample_surface(60, seed=int(r.integers(1 << 30)))
    idx, _ = nearest(v, pts)
    c = Tensor(v, requires_grad=True)
    return lambda: normal_loss(m, TargetShape(pts, nrm), idx, c), [c]


def _laplacian_case(r):
    m, v = _small_mesh(r)
    before = Tensor(m.vertices, requires_grad=True)
    after = Tensor(v, requires_grad=True)
    return lambda: laplacian_loss(before, after, m), [before, after]


def _edge_case(r):
    m, v = _small_mesh(r)
    c = Tensor(v, requires_grad=True)
    return lambda: edge_length_loss(m, c), [c]


def _total_case(r):
    # the cascade objective as a function of every block's input and output vertices
    m0 = make_ellipsoid((0.2, 0.2, 0.3), (0, 0, 0.8), 0)
    m1 = unpool_edge(m0)
    target = TargetShape(*make_ellipsoid((0.15, 0.2, 0.2), (0, 0, 0.8), 1).sample_surface(80, seed=int(r.integers(1000))))
    leaves, outs = [], []
    for m in (m0, m1):
        cin = Tensor(m.vertices + r.normal(scale=0.01, size=m.vertices.shape), requires_grad=True)
        cout = Tensor(m.vertices + r.normal(scale=0.03, size=m.vertices.shape), requires_grad=True)
        leaves += [cin, cout]
        outs.append(BlockOutput(m, cin, cout, cout))
    return lambda: total_loss(outs, target)[0], leaves


TINY_EXTRACTOR = ExtractorConfig(image_size=(12, 12), channels=(2, 2), kernels=(3, 3), strides=(2, 2))


def _graph_conv_case(r):
    m = make_ellipsoid(subdivision_level=int(r.integers(0, 2)))
    d_in, d_out = int(r.integers(1, 5)), int(r.integers(1, 5))
    layer = GraphConvLayer(*(Tensor(r.normal(size=(d_in, d_out)), requires_grad=True) for _ in range(2)), Tensor(r.normal(size=d_out), requires_grad=True))
    f = Tensor(r.normal(size=(m.num_vertices, d_in)), requires_grad=True)
    w = r.normal(size=(m.num_vertices, d_out))
    return lambda: (graph_conv(f, m, layer) * w + graph_conv(f, m, layer).square()).sum(), [f, layer.w0, layer.w1, layer.bias]


def _bilinear_case(r):
    H, W = int(r.integers(2, 9)), int(r.integers(2, 9))
    fmap = Tensor(r.normal(size=(H, W, int(r.integers(1, 4)))), requires_grad=True)
    n = int(r.integers(1, 20))
    loc = np.stack([_away_from_grid(r, -1.0, W, n), _away_from_grid(r, -1.0, H, n)], axis=1)
    loc = Tensor(loc, requires_grad=True)
    w = r.normal(size=(n, fmap.shape[2]))
    return lambda: (bilinear_pool(fmap, loc).square() * w).sum(), [fmap, loc]


def _projection_case(r):
    K = CameraIntrinsics(*r.uniform(20, 80, 2), *r.uniform(10, 40, 2), 64, 64)
    pts = Tensor(r.uniform([-0.4, -0.4, 0.5], [0.4, 0.4, 1.5], (int(r.integers(1, 30)), 3)), requires_grad=True)
    w = r.normal(size=(len(pts), 2))
    return lambda: (project(pts, K).square() * w).sum(), [pts]


def _extractor_case(r):
    ex = FeatureExtractor(TINY_EXTRACTOR, r)
    for k, p in ex.params.items():
        if k.endswith("/b"):
            p.data = r.normal(scale=0.1, size=p.shape)
    img = Tensor(r.uniform(size=(12, 12, 3)), requires_grad=True)
    ws = [r.normal(size=s) for s in ((6, 6, 2), (3, 3, 2))]

    def fn():
        maps = ex(img).maps
        return (maps[0] * ws[0]).sum() + (maps[1].square() * ws[1]).sum()

    return fn, [img, *ex.params.values()]


GRAD_CASES = {
    "chamfer loss": _chamfer_case,
    "normal loss": _normal_case,
    "laplacian loss": _laplacian_case,
    "edge-length loss": _edge_case,
    "total loss": _total_case,
    "graph conv": _graph_conv_case,
    "bilinear pooling": _bilinear_case,
    "projection": _projection_case,
    "feature extractor": _extractor_case,
}


def test_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, make in GRAD_CASES.items():
        errs = []
        for cfg in range(GRAD_CONFIGS):
            r = np.random.default_rng(9000 + 97 * cfg + len(name))
            fn, inputs = make(r)
            errs.append(gradient_check(fn, inputs, rng=r, max_entries=6))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = all(e < GRAD_TOL for e in worst.values()) and elapsed < 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, f"gradient suite, {GRAD_CONFIGS} configs each, rel err < {GRAD_TOL:g}", ok, f"{detail}; {elapsed:.1f}s")
    assert ok


# --- 3 ---------------------------------------------------------------------
def _brute_sq(a, b):
    d = a[:, None, :] - b[None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _brute_cd(a, b):
    d = _brute_sq(a, b)
    return math.fsum(d.min(axis=1)) / len(a) + math.fsum(d.min(axis=0)) / len(b)


def _brute_hausdorff(a, b):
    d = _brute_sq(a, b)
    return math.sqrt(max(d.min(axis=1).max(), d.min(axis=0).max()))


def _perm_emd(a, b):
    n = len(a)
    cost = np.sqrt(_brute_sq(a, b))
    perms = np.array(list(itertools.permutations(range(n))))
    return cost[np.arange(n), perms].sum(axis=1).min() / n


def test_metric_oracles():
    t0 = time.perf_counter()
    r = np.random.default_rng(31)
    cd_ok = haus_ok = True
    for _ in range(100):
        a = r.normal(size=(int(r.integers(1, 51)), 3))
        b = r.normal(size=(int(r.integers(1, 51)), 3))
        cd_ok &= chamfer_distance(a, b) == _brute_cd(a, b)
        haus_ok &= hausdorff(a, b) == _brute_hausdorff(a, b)
    emd_err = 0.0
    for _ in range(50):
        n = int(r.integers(1, 9))
        a, b = r.normal(size=(n, 3)), r.normal(size=(n, 3))
        emd_err = max(emd_err, abs(emd(a, b) - _perm_emd(a, b)))
    f_ok = True
    for _ in range(20):
        a = r.normal(scale=0.02, size=(int(r.integers(1, 60)), 3))
        f_ok &= f_score(a, a, 1e-4)[0] == 100.0
        b = r.normal(scale=0.02, size=(int(r.integers(1, 60)), 3))
        fs = [f_score(a, b, t)[0] for t in np.geomspace(1e-6, 1e-1, 12)]
        f_ok &= all(x <= y for x, y in zip(fs, fs[1:]))
    elapsed = time.perf_counter() - t0
    ok = cd_ok and haus_ok and emd_err <= 1e-9 and f_ok and elapsed < 30.0
    record(3, "metric oracles", ok, f"CD exact {cd_ok}, Hausdorff exact {haus_ok}, EMD max err {emd_err:.1e}, F-score {f_ok}, {elapsed:.1f}s")
    assert ok


# --- 4 ---------------------------------------------------------------------
@pytest.mark.slow
def test_overfit_smoke(fixture_tree):
    t0 = time.perf_counter()
    cfg = pipeline.RunConfig.load(fixture_tree / "run_overfit.json")
    final = pipeline.train(cfg)
    log = [json.loads(l) for l in (cfg.output_dir / "loss_log.jsonl").read_text().splitlines()]
    totals = np.array([rec["total"] for rec in log])
    windows = [float(totals[i:i + 100].mean()) for i in range(0, len(totals) - len(totals) % 100, 100)]
    monotone = all(b < a for a, b in zip(windows, windows[1:]))

    ex = load_manifest(cfg.manifest).examples[0]
    target = ex.load_target()
    initial = read_obj(cfg.initial_mesh)
    model_cfg = ModelConfig.load(cfg.model_config)
    start = pipeline.build_model(model_cfg, initial, cfg.output_dir / "checkpoint_000000.ckpt")
    trained = pipeline.build_model(model_cfg, initial, final)
    image, K = ex.load_image(), ex.load_intrinsics()
    with ag.no_grad():
        cd0 = chamfer_distance(start(image, K)[-1].coords.data, target.points)
        last = trained(image, K)[-1].to_mesh()
    cd1 = chamfer_distance(last.vertices, target.points)
    hits = self_intersection_spot_check(last, pairs=1000, seed=0)
    elapsed = time.perf_counter() - t0
    ok = monotone and cd1 < 0.1 * cd0 and hits == 0 and cfg.steps <= 2000 and elapsed < 900
    record(
        4,
        f"overfit smoke test, {cfg.steps} steps",
        ok,
        f"window means {[round(w, 3) for w in windows]}, CD {cd0:.3g} -> {cd1:.3g} ({100 * cd1 / cd0:.1f}%), "
        f"{hits} intersecting pairs, {elapsed:.0f}s",
    )
    assert ok


# --- 5 ---------------------------------------------------------------------
def _rotation(r):
    q, _ = np.linalg.qr(r.normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q))


def test_equivariance_invariance():
    t0 = time.perf_counter()
    r = np.random.default_rng(55)
    errs = {"graph conv perm": 0.0, "losses rigid": 0.0, "metrics rigid": 0.0, "projection scale": 0.0, "bilinear exact": 0.0}
    mesh = make_ellipsoid((0.2, 0.2, 0.4), (0, 0, 0.8), 1)
    n = mesh.num_vertices
    for _ in range(10):
        perm = r.permutation(n)
        inv = np.argsort(perm)
        pm = Mesh(mesh.vertices[perm], inv[mesh.faces])
        layer = GraphConvLayer(Tensor(r.normal(size=(3, 5))), Tensor(r.normal(size=(3, 5))), Tensor(r.normal(size=5)))
        f = r.normal(size=(n, 3))
        errs["graph conv perm"] = max(errs["graph conv perm"], np.abs(graph_conv(f[perm], pm, layer).data - graph_conv(f, mesh, layer).data[perm]).max())

        R, t = _rotation(r), r.normal(size=3)
        move = lambda x: x @ R.T + t  # noqa: E731
        after = mesh.vertices + r.normal(scale=0.02, size=(n, 3))
        pts, nrm = mesh.sample_surface(200, seed=int(r.integers(1000)))
        idx, _ = nearest(after, pts)
        pairs = [
            (normal_loss(mesh, TargetShape(pts, nrm), idx, after), normal_loss(mesh, TargetShape(move(pts), nrm @ R.T), idx, move(after))),
            (laplacian_loss(mesh.vertices, after, mesh), laplacian_loss(move(mesh.vertices), move(after), mesh)),
            (edge_length_loss(mesh, after), edge_length_loss(mesh, move(after))),
        ]
        errs["losses rigid"] = max(errs["losses rigid"], *(abs(a.item() - b.item()) for a, b in pairs))

        a, b = r.normal(scale=0.05, size=(80, 3)), r.normal(scale=0.05, size=(70, 3))
        m_err = max(
            abs(chamfer_distance(a, b) - chamfer_distance(move(a), move(b))),
            abs(hausdorff(a, b) - hausdorff(move(a), move(b))),
            abs(emd(a, b) - emd(move(a), move(b))),
            *(abs(f_score(a, b, tau)[0] - f_score(move(a), move(b), tau)[0]) for tau in (1e-4, 2e-4, 1e-3)),
        )
        errs["metrics rigid"] = max(errs["metrics rigid"], m_err)

        K = CameraIntrinsics(60.0, 58.0, 31.0, 33.0, 64, 64)
        p3 = r.uniform([-0.3, -0.3, 0.5], [0.3, 0.3, 1.5], (50, 3))
        k = r.uniform(0.1, 10.0)
        errs["projection scale"] = max(errs["projection scale"], np.abs(project(p3 * k, K).data - project(p3, K).data).max())

        c = r.normal(size=4)
        ii, jj = np.meshgrid(np.arange(7.0), np.arange(9.0), indexing="ij")
        fmap = (c[0] + c[1] * jj + c[2] * ii + c[3] * ii * jj)[..., None]
        loc = r.uniform([0, 0], [8, 6], (100, 2))
        exact = c[0] + c[1] * loc[:, 0] + c[2] * loc[:, 1] + c[3] * loc[:, 0] * loc[:, 1]
        errs["bilinear exact"] = max(errs["bilinear exact"], np.abs(bilinear_pool(fmap, loc).data[:, 0] - exact).max())
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-9 for k, v in errs.items() if k != "bilinear exact") and errs["bilinear exact"] <= 1e-12 and elapsed < 30.0
    record(5, "equivariance / invariance", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.1f}s")
    assert ok


# --- 6 ---------------------------------------------------------------------
def test_unpooling_degree_variance(fixture_tree):
    t0 = time.perf_counter()
    m = read_obj(fixture_tree / "ellipsoid_156.obj")
    v_face = float(np.var(unpool_face(m).degrees))
    v_edge = float(np.var(unpool_edge(m).degrees))
    elapsed = time.perf_counter() - t0
    ok = v_face > v_edge and elapsed < 1.0
    record(6, "face unpooling less balanced than edge unpooling", ok, f"degree variance face {v_face:.3f} > edge {v_edge:.3f}, {elapsed:.3f}s")
    assert ok


# --- 7 ---------------------------------------------------------------------
def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(fixture_tree, tmp_path):
    base = json.loads((fixture_tree / "run_overfit.json").read_text())
    for key in ("model_config", "manifest", "initial_mesh"):
        base[key] = str(fixture_tree / base[key])
    ckpts = []
    for run in ("a", "b"):
        cfg = dict(base, steps=4, checkpoint_every=2, output_dir=str(tmp_path / run))
        (tmp_path / f"{run}.json").write_text(json.dumps(cfg))
        assert main(["train", "--config", str(tmp_path / f"{run}.json")]) == 0
        ckpts.append(_tree(tmp_path / run))
    train_ok = ckpts[0] == ckpts[1]

    common = ["--config", str(fixture_tree / "model_desk.json"), "--manifest", str(fixture_tree / "manifest_test.json")]
    for run in ("a", "b"):
        main(["infer", "--checkpoint", str(tmp_path / "a" / "final.ckpt"), *common, "--out", str(tmp_path / f"pred_{run}")])
    infer_ok = _tree(tmp_path / "pred_a") == _tree(tmp_path / "pred_b")

    for run in ("a", "b"):
        main(["eval", "--pred", str(tmp_path / "pred_a"), "--manifest", str(fixture_tree / "manifest_test.json"),
              "--out", str(tmp_path / f"eval_{run}"), "--emd-points", "256"])
    eval_ok = _tree(tmp_path / "eval_a") == _tree(tmp_path / "eval_b")
    ok = train_ok and infer_ok and eval_ok
    record(7, "determinism", ok, f"train checkpoints identical {train_ok}, infer {infer_ok}, eval {eval_ok}")
    assert ok
