"""Acceptance criteria 1-9, one test each, with one PASS/FAIL line per criterion.

Criterion 7 trains two desk-scale models (about 20 minutes on one core). Set
CANONLIFT_DESK_DIR to a directory holding a finished ``run_desk`` output with
the same configuration to reuse it instead of retraining.
"""
import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from canonlift import symmetry as sym
from canonlift.analysis import find_correspondences, saliency_backtrace
from canonlift.canonical import (CoordinateField, GroundTruthCoords, closure_min_distance, coord_loss,
                                 ground_truth_field, spurious_loss)
from canonlift.cli import EXIT_CHECK, main
from canonlift.diffcore.nn import load_checkpoint, save_checkpoint
from canonlift.diffcore.tape import Tape
from canonlift.experiments import DeskConfig, run_desk, smoothed, sweep_iou
from canonlift.gradsuite import format_table, run_suite
from canonlift.heads import Camera
from canonlift.scenes import (CLASS_NAMES, RenderSample, Shape, decode_instance, encode_instance,
                              generate_dataset, render_view, sample_shape_spec)
from canonlift.symmetry import SymmetryType
from canonlift.trainer import (Model, TrainConfig, evaluate, load_model, loss_parts, run_training,
                               save_model, write_metrics)
from canonlift.voxelgrid import FeatureGrid, GridSpec, read_grid, sample, splat, stencil, write_grid

from conftest import record_criterion, small_data_config, small_train_config

T = SymmetryType


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rows = run_suite(range(100), h=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    print(format_table(rows))
    failed = [r.name for r in rows if not r.ok]
    ok = not failed and elapsed < 120
    detail = f"{len(rows) - len(failed)}/{len(rows)} ops x 100 seeds in {elapsed:.0f} s"
    assert record_criterion(1, ok, detail + (f"; failed {failed}" if failed else "")), detail


def test_criterion_2_adjoint_and_partition_of_unity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        c, d = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        spec = GridSpec(c, d)
        x = rng.uniform(-0.5, 0.5, 3)
        f = rng.standard_normal(d)
        g = FeatureGrid(spec, rng.standard_normal((c, c, c, d)))
        s = FeatureGrid.zeros(spec, np.float64)
        splat(s, x, f)
        lhs = float((s.values * g.values).sum())
        rhs = float(f @ sample(g, x))
        worst = max(worst, abs(lhs - rhs))
    pts = rng.uniform(-0.5, 0.5, (10_000, 3))
    unity = max(float(np.abs(stencil(GridSpec(c, 1), pts).weight.sum(axis=1) - 1).max())
                for c in (2, 3, 5, 16, 32))
    ok = worst <= 1e-6 and unity <= 1e-6
    assert record_criterion(2, ok, f"adjoint max gap {worst:.1e} (1000 trials), "
                                   f"partition of unity max gap {unity:.1e} (1e4 points)")


def _enumerated_minima(coords, types, gt):
    """(N, G) distance from each target to every listed orbit member, minimised."""
    return np.array([[np.sqrt(((sym.member_matrices(g) @ coords[u, i] - gt[u]) ** 2).sum(axis=1)).min()
                      for i, g in enumerate(types)] for u in range(len(gt))])


def _enumerated_coord_loss(coords, probs, types, gt):
    # same reduction order as the loss: per type over pixels, then types, then times 1/N
    d = _enumerated_minima(coords, types, gt)
    total = np.sum(probs[:, 0] * d[:, 0])
    for i in range(1, len(types)):
        total = total + np.sum(probs[:, i] * d[:, i])
    return total * (1.0 / len(gt))


def test_criterion_3_closure_oracles():
    rng = np.random.default_rng(3)
    phi = np.linspace(0.0, 2 * np.pi, 100_000, endpoint=False)
    cos, sin = np.cos(phi), np.sin(phi)
    worst = 0.0
    for _ in range(1000):
        s, t = rng.uniform(-0.5, 0.5, (2, 3))
        _, d = sym.closest_on_closure(T.ROTCONT_Z, s, t)
        r = np.hypot(s[0], s[1])
        dense = np.sqrt((r * cos - t[0]) ** 2 + (r * sin - t[1]) ** 2 + (s[2] - t[2]) ** 2).min()
        worst = max(worst, abs(d - dense))
    finite = [g for g in T if g.is_finite]
    exact = 0
    for k in range(200):
        n = int(rng.integers(1, 8))
        coords = rng.uniform(-0.5, 0.5, (n, len(finite), 3))
        probs = rng.dirichlet(np.ones(len(finite)), n)
        gt = rng.uniform(-0.5, 0.5, (n, 3))
        t = Tape(np.float64)
        f = CoordinateField(tuple(finite), np.ones((1, n), bool), t.constant(coords), t.constant(probs),
                            t.constant(np.zeros((n, 1))))
        minima = np.stack([closure_min_distance(g, t.constant(coords[:, i]), gt).data
                           for i, g in enumerate(finite)], axis=1)
        exact += bool(np.array_equal(minima, _enumerated_minima(coords, finite, gt))
                      and coord_loss(f, gt).item() == _enumerated_coord_loss(coords, probs, finite, gt))
    ok = worst <= 1e-6 and exact == 200
    assert record_criterion(3, ok, f"RotContZ vs 1e5-angle oracle max gap {worst:.1e} (1000 pairs); "
                                   f"finite coord_loss equal to enumeration in {exact}/200 cases")


def _random_views(rng, k=4, size=24):
    views = []
    for _ in range(k):
        mask = rng.uniform(size=(size, size)) > 0.5
        img = (rng.uniform(size=(size, size, 3)) * mask[..., None]).astype(np.float32)
        views.append(RenderSample(img, mask, np.zeros((size, size, 3), np.float32), Camera(0.0, 0.0),
                                  np.zeros((size, size), np.float32)))
    return views


def test_criterion_4_permutation_invariance():
    model = Model(TrainConfig(grid=16, feature_dim=8, samples=8))
    rng = np.random.default_rng(4)
    worst = dict.fromkeys(("V-bar", "W-bar", "V", "occupancy"), 0.0)
    for trial in range(100):
        views = _random_views(rng)
        perm = rng.permutation(4)
        if np.all(perm == np.arange(4)):
            perm = perm[::-1]
        out = []
        for order in (np.arange(4), perm):
            tape = Tape(np.float32, model.params, grad=False)
            res = model.forward(tape, [views[i] for i in order], [], np.random.default_rng(trial))
            out.append((res.aggregate.mean_features.data, res.aggregate.weights.data, res.refined.data,
                        res.occ_probs.data))
        for key, a, b in zip(worst, *out):
            worst[key] = max(worst[key], float(np.abs(a - b).max()))
    ok = max(worst.values()) <= 1e-5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record_criterion(4, ok, f"max-abs change over 100 permuted 4-view instances: {detail}")


def _param_grads(model, inst, term, decouple):
    store = model.params
    store.zero_grad()
    tape = Tape(np.float32, store)
    parts, _ = loss_parts(model, tape, inst, np.random.default_rng(5), decouple=decouple)
    tape.backward(parts[term])
    return [store.grads[n].copy() for n in model.coordinate_param_names()]


def test_criterion_5_decoupling():
    data = generate_dataset(small_data_config(count=1))
    model = Model(small_train_config())
    results = {}
    for term in ("vol", "vs"):
        for decouple in (True, False):
            grads = [g for inst in data for g in _param_grads(model, inst, term, decouple)]
            results[term, decouple] = max(float(np.abs(g).max()) for g in grads)
    ok = (results["vol", True] == 0.0 and results["vs", True] == 0.0
          and results["vol", False] > 0 and results["vs", False] > 0)
    detail = (f"coordinate-head max |grad| with decouple on: L_vol {results['vol', True]:.1e}, "
              f"L_vs {results['vs', True]:.1e}; off: L_vol {results['vol', False]:.1e}, "
              f"L_vs {results['vs', False]:.1e}")
    assert record_criterion(5, ok, detail)


def test_criterion_6_ground_truth_sanity():
    cfg = small_data_config(classes=list(CLASS_NAMES), count=2, oracle_points=4096, input_size=32)
    data = generate_dataset(cfg)
    rng = np.random.default_rng(6)
    worst_c, worst_margin, tols = 0.0, -np.inf, []
    for inst in data:
        tol = inst.oracle.sampling_tolerance()
        tols.append(tol)
        for view in inst.inputs:
            gt = GroundTruthCoords(view.gt_coords.astype(np.float64), view.mask)
            f = ground_truth_field(Tape(np.float64), gt, tuple(T), inst.symmetry)
            worst_c = max(worst_c, coord_loss(f, gt.foreground()).item())
            worst_margin = max(worst_margin, spurious_loss(f, inst.oracle, 8, rng).item() - tol)
    ok = worst_c == 0.0 and worst_margin <= 0.0
    assert record_criterion(6, ok, f"max L_c {worst_c:.1e}; max L_s minus sampling tolerance "
                                   f"{worst_margin:+.4f} (tolerance {min(tols):.3f}..{max(tols):.3f})")


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = DeskConfig()
    cached = os.environ.get("CANONLIFT_DESK_DIR")
    if cached and os.path.exists(os.path.join(cached, "summary.json")):
        with open(os.path.join(cached, "config.json")) as fh:
            if json.load(fh) == json.loads(json.dumps(cfg.to_dict())):
                with open(os.path.join(cached, "summary.json")) as fh:
                    return cfg, json.load(fh), cached
    out = tmp_path_factory.mktemp("desk")
    return cfg, run_desk(cfg, out), str(out)


def test_criterion_7_desk_scale(desk):
    cfg, s, _ = desk
    sym_r, idn_r = s["symmetric"]["metrics"], s["identity"]["metrics"]
    losses = smoothed(s["symmetric"]["epoch_losses"])
    a = bool(np.all(np.diff(losses) < 0))
    b = sym_r["mean_iou"] >= 0.5
    margins = {c: sweep_iou(sym_r, 1, c) - sweep_iou(idn_r, 1, c) for c in ("table_rot4", "bench_rot2")}
    c = all(m > 0 for m in margins.values())
    one, four = sweep_iou(sym_r, 1), sweep_iou(sym_r, 4)
    d = four >= one - 0.01
    minutes = s["timings"]["total"] / 60
    e = minutes <= 30
    detail = (f"(a) loss decreasing {a}; (b) mean IoU {sym_r['mean_iou']:.3f}; (c) 1-view margins "
              + ", ".join(f"{k} {v:+.3f}" for k, v in margins.items())
              + f"; (d) IoU 1 view {one:.3f} -> 4 views {four:.3f}; {minutes:.1f} min")
    assert record_criterion(7, a and b and c and d and e, detail)


def test_trained_saliency_reaches_symmetric_counterparts(desk):
    cfg, _, out = desk
    model = load_model(os.path.join(out, "symmetric.clpm"), cfg.train)
    data = generate_dataset(replace(cfg.data, classes=["bench_rot2"], count=3))
    inst = [i for i in data if i.split == "test"][0]
    sup = inst.supervision[0]
    size = cfg.train.output_size
    # a patch of the rendered view that lands on the object
    fg = np.argwhere(sup.mask)
    r, c = fg[len(fg) // 2] * size // sup.mask.shape[0]
    region = np.zeros((size, size), bool)
    region[max(r - 2, 0):r + 2, max(c - 2, 0):c + 2] = True
    views = inst.inputs[:cfg.train.input_views]
    maps = saliency_backtrace(model, views, sup.camera, region)
    # back-projected coordinates of the region, with their 180 degree counterparts
    rows, cols = np.nonzero(np.kron(region, np.ones((sup.mask.shape[0] // size,) * 2, bool)))
    sel = sup.mask[rows, cols]
    targets = sup.gt_coords[rows[sel], cols[sel]].astype(np.float64)
    targets = np.concatenate([targets, sym.apply_type_transform(T.ROT2_Z, targets)])
    hits = 0
    for m, v in zip(maps, views):
        top = m >= np.quantile(m[v.mask], 0.9)
        pts = v.gt_coords[top & v.mask].astype(np.float64)
        d = np.linalg.norm(pts[:, None] - targets[None], axis=-1).min(axis=1)
        hits += int((d <= 0.05).any())
    assert hits >= 1


def test_criterion_8_correspondence_on_ground_truth():
    shape = Shape(sample_shape_spec("table_rot4", 8))
    views = [render_view(shape, Camera(35.0 + 90 * j, 25.0, image_size=(48, 48))) for j in range(4)]
    fields = [ground_truth_field(Tape(np.float64), GroundTruthCoords(v.gt_coords.astype(np.float64), v.mask),
                                 tuple(T), T.ROT4_Z) for v in views]
    q = views[0].gt_coords
    z = q[views[0].mask][:, 2]
    # legs: the lower part of the visible surface, away from the axis
    low = z.min() + 0.4 * (z.max() - z.min())
    leg = views[0].mask & (q[..., 2] < low) & (np.hypot(q[..., 0], q[..., 1]) > 0.15)
    cand = np.argwhere(leg)
    query = tuple(int(v) for v in cand[len(cand) // 2])
    matches = find_correspondences(fields, (0, query), top_n=1)
    quadrants, worst = set(), 0.0
    for j, ms in matches.items():
        m = ms[0]
        worst = max(worst, m.distance)
        p = views[j].gt_coords[m.pixel]
        quadrants.add((bool(p[0] > 0), bool(p[1] > 0)))
    ok = worst <= 1e-6 and len(quadrants) == 4
    assert record_criterion(8, ok, f"query {query}: best match per view within {worst:.1e}, "
                                   f"{len(quadrants)} distinct legs retrieved")


def test_criterion_9_determinism_formats_mutation(tmp_path, monkeypatch, capsys):
    checks = {}
    dcfg = small_data_config(count=2)
    a, b = generate_dataset(dcfg), generate_dataset(dcfg)
    checks["dataset"] = [encode_instance(i) for i in a] == [encode_instance(i) for i in b]
    checks["CLDS"] = all(encode_instance(decode_instance(encode_instance(i), split=i.split))
                         == encode_instance(i) for i in a)
    tcfg = small_train_config()
    for name in ("m1", "m2"):
        res = run_training(a, tcfg)
        save_model(tmp_path / f"{name}.clpm", res.model)
        write_metrics(tmp_path / f"{name}.json", evaluate(res.model, a, [1, 4]))
    checks["checkpoint"] = (tmp_path / "m1.clpm").read_bytes() == (tmp_path / "m2.clpm").read_bytes()
    checks["metrics"] = (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    params = load_checkpoint(tmp_path / "m1.clpm")
    save_checkpoint(tmp_path / "again.clpm", params)
    checks["CLPM"] = (tmp_path / "again.clpm").read_bytes() == (tmp_path / "m1.clpm").read_bytes()
    grid = np.random.default_rng(9).standard_normal((6 ** 3, 5)).astype(np.float32)
    write_grid(tmp_path / "g.cvgf", grid, 6)
    back = read_grid(tmp_path / "g.cvgf")
    write_grid(tmp_path / "h.cvgf", back.flat, 6)
    checks["CVGF"] = (back.flat.tobytes() == grid.tobytes()
                      and (tmp_path / "g.cvgf").read_bytes() == (tmp_path / "h.cvgf").read_bytes())

    import canonlift.voxelgrid as vg
    real = vg._splat_adjoint
    caught = []
    for which in range(3):
        def flipped(*args, _k=which):
            out = list(real(*args))
            out[_k] = -out[_k]
            return tuple(out)

        monkeypatch.setattr(vg, "_splat_adjoint", flipped)
        caught.append(main(["gradcheck", "--ops", "splat", "--seeds", "100"]) == EXIT_CHECK)
    monkeypatch.setattr(vg, "_splat_adjoint", real)
    checks["mutation"] = all(caught)
    capsys.readouterr()
    ok = all(checks.values())
    detail = ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items())
    assert record_criterion(9, ok, detail)
