"""Lift per-view predictions into voxel grids, average across views, refine."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import symmetry as sym
from .canonical import CoordinateField, closure_points
from .diffcore import ops
from .diffcore.nn import ParametricMap
from .diffcore.tape import Buffer, ParamStore, ShapeError, Tape
from .voxelgrid import GridSpec, neighbor_mean, splat_points

WEIGHT_EPS = 1e-8


@dataclass
class ViewLift:
    spec: GridSpec
    features: Buffer  # V_k, (C^3, D)
    weights: Buffer  # W_k, (C^3, 1)


@dataclass
class AggregateGrid:
    spec: GridSpec
    mean_features: Buffer  # V-bar
    weights: Buffer  # W-bar
    refined: Buffer | None = None  # V


def expand_closures(field: CoordinateField, m: int, rng: np.random.Generator,
                    decouple: bool) -> tuple[Buffer, Buffer, Buffer]:
    """Every closure member of every type for every pixel.

    Returns points (M, 3), the pixel feature for each point (M, D) and the
    splat scale (M,) which is the type probability, or zero for duplicated
    finite members.
    """
    tape = field.coords.tape
    n = field.num_pixels
    coords, probs = field.coords, field.probs
    if decouple:
        coords, probs = ops.stop_gradient(coords), ops.stop_gradient(probs)
    pts, feats, scales = [], [], []
    for i, g in enumerate(field.types):
        c = ops.reshape(ops.getitem(coords, (slice(None), i, slice(None))), (n, 3))
        p = ops.reshape(ops.columns(probs, i, i + 1), (n,))
        members = closure_points(g, c, m, rng)
        k = members.shape[1]
        rows = np.repeat(np.arange(n), k)
        keep = np.ones((n, k), dtype=tape.dtype)
        if g.is_finite:
            keep[sym.duplicate_mask(members.data)] = 0.0
        pts.append(ops.reshape(members, (n * k, 3)))
        feats.append(ops.take_rows(field.features, rows))
        scales.append(ops.multiply(ops.take_rows(p, rows), keep.reshape(-1)))
    return ops.concat(pts, axis=0), ops.concat(feats, axis=0), ops.concat(scales, axis=0)


def lift_view(field: CoordinateField, spec: GridSpec, config: sym.SymmetryConfig,
              decouple: bool, rng: np.random.Generator) -> ViewLift:
    """Splat each pixel feature (and unit mass) at its predicted closure
    members, scaled by the type probability."""
    tape = field.coords.tape
    d = field.features.shape[1]
    if d != spec.feature_dim:
        raise ShapeError(f"field features have dim {d}, grid expects {spec.feature_dim}")
    if field.num_pixels == 0:
        zeros = tape.constant(np.zeros((spec.num_cells, d + 1)))
    else:
        x, f, s = expand_closures(field, config.sample_count, rng, decouple)
        ones = tape.constant(np.ones((f.shape[0], 1)))
        zeros = splat_points(tape, spec, x, ops.concat([f, ones], axis=1), s)
    return ViewLift(spec, ops.columns(zeros, 0, d), ops.columns(zeros, d, d + 1))


def average(lifts: Sequence[ViewLift], eps: float = WEIGHT_EPS) -> AggregateGrid:
    """W-bar = Σ_k W_k and V-bar = Σ_k V_k / W-bar voxel-wise (zero where W-bar < eps)."""
    if not lifts:
        raise ValueError("average needs at least one view")
    if not eps > 0:
        raise ValueError("eps must be positive")
    spec = lifts[0].spec
    for lf in lifts[1:]:
        if lf.spec != spec:
            raise ShapeError(f"grid spec mismatch: {lf.spec} vs {spec}")
    v_sum, w_sum = lifts[0].features, lifts[0].weights
    for lf in lifts[1:]:
        v_sum = ops.add(v_sum, lf.features)
        w_sum = ops.add(w_sum, lf.weights)
    occupied = (w_sum.data >= eps).astype(w_sum.data.dtype)
    v_bar = ops.multiply(ops.divide_eps(v_sum, w_sum, eps), occupied)
    return AggregateGrid(spec, v_bar, w_sum)


class Refiner:
    """Per-voxel maps over [own features; mean of the 6 face neighbours].

    Every stage doubles its input with the neighbour mean, so stage i needs
    input dim 2 * (output dim of stage i-1).
    """

    def __init__(self, stages: Sequence[ParametricMap], between: str = "relu"):
        if not stages:
            raise ValueError("refiner needs at least one stage")
        for a, b in zip(stages[:-1], stages[1:]):
            if b.input_dim != 2 * a.output_dim:
                raise ShapeError(f"stage {b.name} input {b.input_dim} != 2 x {a.output_dim}")
        self.stages = list(stages)
        self.between = between

    @classmethod
    def default(cls, store: ParamStore, feature_dim: int, hidden: int,
                rng: np.random.Generator, name: str = "refine") -> Refiner:
        s1 = ParametricMap(store, f"{name}.s1", [2 * (feature_dim + 1), hidden], ["none"], rng)
        s2 = ParametricMap(store, f"{name}.s2", [2 * hidden, hidden, feature_dim],
                           ["relu", "none"], rng)
        return cls([s1, s2])

    @property
    def input_dim(self) -> int:
        return self.stages[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.stages[-1].output_dim

    def apply(self, tape: Tape, x: Buffer, cells: int) -> Buffer:
        for i, stage in enumerate(self.stages):
            if i > 0 and self.between == "relu":
                x = ops.relu(x)
            x = stage.apply(tape, with_neighbors(x, cells))
        return x


def with_neighbors(x: Buffer, cells: int) -> Buffer:
    return ops.concat([x, neighbor_mean(x, cells)], axis=1)


def refine(refiner: Refiner | ParametricMap, tape: Tape, agg: AggregateGrid,
           normalize_weight_input: bool = False) -> Buffer:
    """V = h([V-bar; W-bar]) with the neighbour-gather convention."""
    d = agg.spec.feature_dim
    if refiner.input_dim != 2 * (d + 1):
        raise ShapeError(f"refiner input {refiner.input_dim} != 2 x ({d} + 1)")
    if refiner.output_dim != d:
        raise ShapeError(f"refiner output {refiner.output_dim} != feature dim {d}")
    w = agg.weights
    if normalize_weight_input:
        w = log1p(w)
    x = ops.concat([agg.mean_features, w], axis=1)
    if isinstance(refiner, ParametricMap):
        out = refiner.apply(tape, with_neighbors(x, agg.spec.cells))
    else:
        out = refiner.apply(tape, x, agg.spec.cells)
    agg.refined = out
    return out


def log1p(a: Buffer) -> Buffer:
    return a.tape.record("log1p", np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),))
