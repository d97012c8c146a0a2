"""Registry of finite-difference checks covering every differentiable operation.

Each case builds a small random scalar program for a given seed. Programs
reduce their output with a fixed random weighting so every output entry is
exercised. Random draws inside a program (circle angles) are fixed at build
time, so repeated evaluations see identical samples.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import symmetry as sym
from .aggregate import AggregateGrid, Refiner, ViewLift, average, lift_view, log1p, refine
from .canonical import (CoordinateField, ShapeOracle, circle_samples, closure_min_distance,
                        coord_loss, orbit_points, shape_distance_points, spurious_loss)
from .diffcore import ops
from .diffcore.gradcheck import GradCheckReport, grad_check
from .diffcore.nn import ParametricMap
from .diffcore.tape import Buffer, ParamStore, Tape
from .heads import Camera, RenderSettings, decode, occupancy_loss, predict_occupancy, project
from .voxelgrid import GridSpec, neighbor_mean, sample_points, splat_points

Builder = Callable[[np.random.Generator], tuple[Callable[..., Buffer], list[np.ndarray], "ParamStore | None"]]


@dataclass
class GradCase:
    name: str
    build: Builder
    expect: str = "pass"
    # parameters whose gradient is identically zero; asserted exactly instead of by differences
    zero_params: tuple[str, ...] = ()


REGISTRY: dict[str, GradCase] = {}


def register(name: str, expect: str = "pass", zero_params: tuple[str, ...] = ()):
    def deco(fn: Builder) -> Builder:
        if name in REGISTRY:
            raise KeyError(f"gradient case {name!r} registered twice")
        REGISTRY[name] = GradCase(name, fn, expect, zero_params)
        return fn
    return deco


def _weighted(out: Buffer, w: np.ndarray) -> Buffer:
    return ops.sum(ops.multiply(out, w.reshape(out.shape)))


def _reducer(rng, shape):
    return rng.standard_normal(shape)


def _randomize(store: ParamStore, rng: np.random.Generator, scale: float = 0.5) -> ParamStore:
    for k, v in store.values.items():
        store.values[k] = rng.uniform(-scale, scale, v.shape).astype(store.dtype)
    return store


def _unary(name, fn, sampler=None):
    def build(rng):
        x = sampler(rng) if sampler else rng.standard_normal((3, 4))
        w = _reducer(rng, fn(Tape(np.float64).constant(x)).shape)
        return (lambda t, a: _weighted(fn(a), w)), [x], None
    register(name)(build)


# primitives -------------------------------------------------------------------------------

_unary("scale", lambda a: ops.scale(a, -1.7))
_unary("relu", ops.relu)
_unary("tanh", ops.tanh)
_unary("sigmoid", ops.sigmoid)
_unary("softmax", lambda a: ops.softmax(a, axis=1))
_unary("sum", lambda a: ops.sum(a, axis=0))
_unary("mean", lambda a: ops.mean(a, axis=1, keepdims=True))
_unary("l2_norm", lambda a: ops.l2_norm(a, axis=1))
_unary("square", ops.square)
_unary("reshape", lambda a: ops.reshape(a, (4, 3)))
_unary("getitem", lambda a: ops.getitem(a, (slice(0, 2), 1)))
_unary("columns", lambda a: ops.columns(a, 1, 3))
_unary("take_rows", lambda a: ops.take_rows(a, np.array([2, 0, 2, 1])))
_unary("scatter_rows", lambda a: ops.scatter_rows(a, np.array([4, 1, 0]), 6))
_unary("broadcast_to", lambda a: ops.broadcast_to(ops.sum(a, axis=0, keepdims=True), (5, 4)))
_unary("max_along", lambda a: ops.max_along(a, axis=1))
_unary("min_along", lambda a: ops.min_along(a, axis=0))
_unary("log1p", log1p, lambda rng: rng.uniform(0.1, 3.0, (3, 4)))
_unary("neighbor_mean", lambda a: neighbor_mean(a, 2), lambda rng: rng.standard_normal((8, 2)))


def _binary(name, fn, sb=(3, 4), sampler=None):
    def build(rng):
        a = rng.standard_normal((3, 4))
        b = sampler(rng, sb) if sampler else rng.standard_normal(sb)
        t = Tape(np.float64)
        w = _reducer(rng, fn(t.constant(a), t.constant(b)).shape)
        return (lambda tp, x, y: _weighted(fn(x, y), w)), [a, b], None
    register(name)(build)


_binary("add", ops.add, (1, 4))
_binary("subtract", ops.subtract, (3, 1))
_binary("multiply", ops.multiply)
_binary("divide_eps", lambda a, d: ops.divide_eps(a, d, 1e-8), (3, 1),
        lambda rng, s: rng.uniform(0.5, 2.0, s))
_binary("concat", lambda a, b: ops.concat([a, b], axis=1), (3, 2))


@register("dense")
def _dense(rng):
    x, wt, b = rng.standard_normal((5, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4)
    r = _reducer(rng, (5, 4))
    return (lambda t, a, m, c: _weighted(ops.dense(a, m, c), r)), [x, wt, b], None


@register("l1_loss")
def _l1(rng):
    return (lambda t, a, b: ops.l1_loss(a, b)), [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))], None


@register("bce_with_logits")
def _bce(rng):
    y = (rng.random((6, 1)) < 0.5).astype(float)
    return (lambda t, a: ops.bce_with_logits(a, y)), [rng.standard_normal((6, 1)) * 2], None


@register("weighted_sum")
def _wsum(rng):
    return (lambda t, a, b: ops.weighted_sum([(0.3, ops.sum(a)), (-1.2, ops.mean(b))])), \
        [rng.standard_normal(3), rng.standard_normal(5)], None


@register("stop_gradient", expect="expected_mismatch")
def _stop(rng):
    x = rng.uniform(0.5, 1.5, 3)
    return (lambda t, a: ops.sum(ops.multiply(ops.stop_gradient(a), a))), [x], None


@register("parametric_map")
def _pmap(rng):
    store = ParamStore(np.float64)
    net = ParametricMap(store, "net", [3, 4, 2], ["tanh", "none"], rng)
    _randomize(store, rng)
    x = rng.standard_normal((4, 3))
    return (lambda t, a: ops.l1_loss(net.apply(t, a), np.zeros((4, 2)) + 0.1)), [x], store


# voxel grid -----------------------------------------------------------------------------

def _interior(rng, n, c):
    lim = 0.5 - 0.5 / c - 0.02
    return rng.uniform(-lim, lim, (n, 3))


@register("splat")
def _splat(rng):
    spec = GridSpec(3, 2)
    x, f, s = _interior(rng, 4, 3), rng.standard_normal((4, 2)), rng.uniform(0.2, 1.0, 4)
    w = _reducer(rng, (27, 2))
    return (lambda t, a, b, c: _weighted(splat_points(t, spec, a, b, c), w)), [x, f, s], None


@register("sample")
def _sample(rng):
    spec = GridSpec(3, 2)
    g, x = rng.standard_normal((27, 2)), _interior(rng, 5, 3)
    w = _reducer(rng, (5, 2))
    return (lambda t, a, b: _weighted(sample_points(t, spec, a, b), w)), [g, x], None


# closures and losses -----------------------------------------------------------------------

@register("orbit_points")
def _orbit(rng):
    x = rng.uniform(-0.4, 0.4, (3, 3))
    w = _reducer(rng, (3, 4, 3))
    return (lambda t, a: _weighted(orbit_points(sym.SymmetryType.ROT4_Z, a), w)), [x], None


@register("circle_samples")
def _circle(rng):
    x = rng.uniform(-0.4, 0.4, (3, 3))
    phi = rng.uniform(0, 2 * np.pi, (3, 5))
    w = _reducer(rng, (3, 5, 3))
    return (lambda t, a: _weighted(circle_samples(a, phi), w)), [x], None


@register("closure_min_distance")
def _cmd(rng):
    g = sym.ALL_TYPES[int(rng.integers(len(sym.ALL_TYPES)))]
    x, tgt = rng.uniform(-0.4, 0.4, (4, 3)), rng.uniform(-0.4, 0.4, (4, 3))
    w = _reducer(rng, (4,))
    return (lambda t, a: _weighted(closure_min_distance(g, a, tgt), w)), [x], None


def _field(tape, coords, logits, feats, types, mask):
    n, g = logits.shape
    return CoordinateField(types, mask, ops.reshape(coords, (n, g, 3)), ops.softmax(logits, axis=1), feats)


def _field_inputs(rng, n, g):
    return rng.uniform(-0.4, 0.4, (n, g * 3)), rng.standard_normal((n, g))


@register("coord_loss")
def _coord(rng):
    types = sym.ALL_TYPES
    n = 4
    mask = np.zeros((2, 3), bool)
    mask.flat[:n] = True
    c, lg = _field_inputs(rng, n, len(types))
    gt = rng.uniform(-0.4, 0.4, (n, 3))
    zeros = np.zeros((n, 1))

    def f(t, a, b):
        return coord_loss(_field(t, a, b, t.constant(zeros), types, mask), gt)
    return f, [c, lg], None


def _oracle(rng, n=40):
    return ShapeOracle(rng.uniform(-0.45, 0.45, (n, 3)))


@register("shape_distance")
def _shape_distance(rng):
    oracle = _oracle(rng)
    x = rng.uniform(-0.45, 0.45, (6, 3))
    w = _reducer(rng, (6,))
    return (lambda t, a: _weighted(shape_distance_points(oracle, a), w)), [x], None


@register("spurious_loss")
def _spurious(rng):
    types = sym.ALL_TYPES
    n, m = 3, 4
    mask = np.ones((1, n), bool)
    c, lg = _field_inputs(rng, n, len(types))
    oracle = _oracle(rng)
    seed = int(rng.integers(2 ** 31))

    def f(t, a, b):
        fld = _field(t, a, b, t.constant(np.zeros((n, 1))), types, mask)
        return spurious_loss(fld, oracle, m, np.random.default_rng(seed))
    return f, [c, lg], None


# aggregation -----------------------------------------------------------------------------

@register("lift_view")
def _lift(rng):
    types = (sym.SymmetryType.IDENTITY, sym.SymmetryType.ROT2_Z, sym.SymmetryType.ROTCONT_Z)
    n, spec = 3, GridSpec(3, 2)
    mask = np.ones((1, n), bool)
    c, lg = _field_inputs(rng, n, len(types))
    c *= 0.6  # keep closures inside the unclamped band
    feats = rng.standard_normal((n, 2))
    cfg = sym.SymmetryConfig(types, sample_count=2)
    seed = int(rng.integers(2 ** 31))
    w = _reducer(rng, (27, 3))

    def f(t, a, b, fe):
        lv = lift_view(_field(t, a, b, fe, types, mask), spec, cfg, False, np.random.default_rng(seed))
        return _weighted(ops.concat([lv.features, lv.weights], axis=1), w)
    return f, [c, lg, feats], None


@register("average")
def _average(rng):
    spec = GridSpec(2, 2)
    v1, v2 = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
    w1, w2 = rng.uniform(0.2, 1.0, (8, 1)), rng.uniform(0.2, 1.0, (8, 1))
    r = _reducer(rng, (8, 2))

    def f(t, a, b, c, d):
        agg = average([ViewLift(spec, a, c), ViewLift(spec, b, d)])
        return _weighted(agg.mean_features, r)
    return f, [v1, v2, w1, w2], None


def _agg_inputs(rng, c, d):
    return rng.standard_normal((c ** 3, d)), rng.uniform(0.0, 2.0, (c ** 3, 1))


@register("refine")
def _refine(rng):
    store = ParamStore(np.float64)
    spec = GridSpec(2, 2)
    refiner = Refiner.default(store, 2, 3, rng)
    _randomize(store, rng)
    v, w = _agg_inputs(rng, 2, 2)
    r = _reducer(rng, (8, 2))

    def f(t, a, b):
        return _weighted(refine(refiner, t, AggregateGrid(spec, a, b), normalize_weight_input=True), r)
    return f, [v, w], store


# heads -----------------------------------------------------------------------------------

@register("occupancy_head")
def _occ(rng):
    store = ParamStore(np.float64)
    head = ParametricMap(store, "occ", [4, 3, 1], ["tanh", "none"], rng)
    _randomize(store, rng)
    v = rng.standard_normal((8, 2))
    gt = (rng.random(8) < 0.5).astype(float)
    return (lambda t, a: occupancy_loss(predict_occupancy(head, t, a, 2)[0], gt)), [v], store


def _camera(rng):
    # narrow field of view so every ray crosses the cube well away from its edges
    return Camera(float(rng.uniform(0, 360)), float(rng.uniform(-20, 40)),
                  rng.uniform(-0.1, 0.1, 3), 1.5, 3.0, (2, 2))


# softmax over depth ignores a shared shift, so the last occlusion bias never matters
@register("project", zero_params=("occl.1.bias",))
def _project(rng):
    store = ParamStore(np.float64)
    spec = GridSpec(4, 2)
    occl = ParametricMap(store, "occl", [3, 3, 1], ["tanh", "none"], rng)
    _randomize(store, rng)
    settings = RenderSettings(2, 3, 2)
    cam = _camera(rng)
    v = rng.standard_normal((64, 2))
    r = _reducer(rng, (4, 2))
    return (lambda t, a: _weighted(project(t, a, spec, cam, occl, settings).features, r)), [v], store


@register("decode")
def _decode(rng):
    store = ParamStore(np.float64)
    dec = ParametricMap(store, "dec", [2, 3, 3], ["tanh", "none"], rng)
    _randomize(store, rng)
    settings = RenderSettings(2, 3, 4)
    feats = rng.standard_normal((4, 2))
    gt = rng.random((4, 4, 3))
    return (lambda t, a: ops.l1_loss(decode(dec, t, a, settings), gt)), [feats], store


# running -----------------------------------------------------------------------------------

@dataclass
class SuiteRow:
    name: str
    expect: str
    seeds: int = 0
    passed: int = 0
    failed_seeds: list[int] = field(default_factory=list)
    max_rel_error: float = 0.0
    kink_retries: int = 0
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failed_seeds and self.passed == self.seeds


OUTPUT_LEVEL = 0.01


def _normalized(f, inputs, params):
    """Rescale a program so its value is at most OUTPUT_LEVEL in magnitude.

    Relative error uses a 1e-8 floor, and central differences of an O(1)
    value carry ~1e-12 of rounding noise, which would flag components whose
    true gradient is exactly zero (e.g. the last occlusion bias, which a
    softmax over depth ignores). Rescaling does not change relative errors
    of the other components.
    """
    store = params.astype(np.float64) if params is not None else None
    tape = Tape(np.float64, store)
    f0 = abs(float(f(tape, *[tape.constant(x) for x in inputs]).data.reshape(-1)[0]))
    s = OUTPUT_LEVEL / max(f0, OUTPUT_LEVEL) if np.isfinite(f0) else 1.0
    return lambda t, *b: ops.scale(f(t, *b), s)


def run_case(case: GradCase, seed: int, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng([seed, 4242])
    f, inputs, params = case.build(rng)
    rep = grad_check(_normalized(f, inputs, params), inputs, h=h, tol=tol, params=params, rng=rng,
                     skip_params=case.zero_params)
    if case.zero_params and rep.ok:
        store = params.astype(np.float64)
        tape = Tape(np.float64, store)
        tape.backward(f(tape, *[tape.constant(x) for x in inputs]))
        worst = max(float(np.abs(store.grads[n]).max()) for n in case.zero_params)
        if worst > 1e-12:
            return GradCheckReport("fail", rep.max_rel_error, [(n, 0) for n in case.zero_params],
                                   rep.checked, rep.kink_retries,
                                   f"gradient expected to vanish is {worst:.2e}")
    return rep


def run_suite(seeds: Sequence[int] = range(100), names: Sequence[str] | None = None,
              h: float = 1e-5, tol: float = 1e-4) -> list[SuiteRow]:
    rows = []
    for name in names or list(REGISTRY):
        if name not in REGISTRY:
            raise KeyError(f"unknown gradient case {name!r}; known: {', '.join(REGISTRY)}")
        case = REGISTRY[name]
        row = SuiteRow(name, case.expect)
        t0 = time.perf_counter()
        for s in seeds:
            rep = run_case(case, s, h, tol)
            row.seeds += 1
            row.kink_retries += rep.kink_retries
            if np.isfinite(rep.max_rel_error):
                row.max_rel_error = max(row.max_rel_error, rep.max_rel_error)
            if rep.status == case.expect:
                row.passed += 1
            else:
                row.failed_seeds.append(s)
        row.seconds = time.perf_counter() - t0
        rows.append(row)
    return rows


def format_table(rows: Sequence[SuiteRow]) -> str:
    lines = [f"{'op':<22} {'result':<6} {'seeds':>5} {'max rel err':>12} {'kinks':>5}"]
    for r in rows:
        status = "PASS" if r.ok else "FAIL"
        lines.append(f"{r.name:<22} {status:<6} {r.passed:>2}/{r.seeds:<2} {r.max_rel_error:>12.2e} "
                     f"{r.kink_retries:>5}")
    return "\n".join(lines)
