"""Inspection tools: gradient back-tracing to input pixels and closure-aware matching."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import symmetry as sym
from .canonical import CoordinateField, predict_coords
from .diffcore import ops
from .diffcore.tape import Tape
from .heads import Camera
from .scenes import RenderSample
from .symmetry import SymmetryType


def saliency_backtrace(model, views: Sequence[RenderSample], camera: Camera, region,
                       seed: int = 0) -> list[np.ndarray]:
    """Per-view maps of |d(sum of rendered intensity over region) / d(input pixel)|.

    ``region`` is a boolean mask over the rendered image. Decoupling is
    switched off for this pass so the gradient reaches the input pixels
    through the coordinates as well as the features. Each map is divided by
    its maximum (all-zero maps stay zero).
    """
    region = np.asarray(region, dtype=bool)
    size = model.cfg.output_size
    if region.shape != (size, size):
        raise ValueError(f"region must be a {size}x{size} mask, got {region.shape}")
    if not region.any():
        raise ValueError("saliency region is empty")
    tape = Tape(np.float64, model.params.astype(np.float64))
    images = [tape.input(v.image, name=f"view{k}") for k, v in enumerate(views)]
    rng = np.random.default_rng(seed)
    res = model.forward(tape, views, [camera], rng, decouple=False, images=images)
    weight = np.repeat(region[..., None], 3, axis=2).astype(np.float64)
    target = ops.sum(ops.multiply(res.renders[0], weight))
    tape.backward(target)
    maps = []
    for img in images:
        mag = np.sqrt((img.grad ** 2).sum(axis=-1))
        top = mag.max()
        maps.append(mag / top if top > 0 else mag)
    return maps


def predict_fields(model, views: Sequence[RenderSample]) -> list[CoordinateField]:
    tape = Tape(np.float32, model.params, grad=False)
    return [predict_coords(model.predictor, tape, v.image, v.mask, model.types) for v in views]


# closure-set distances ---------------------------------------------------------------------

def _members(g: SymmetryType, x: np.ndarray) -> np.ndarray:
    """(N, n, 3) finite closure members."""
    return np.einsum("nij,pj->pni", sym.member_matrices(g), x)


def closure_set_distance(g1: SymmetryType, a, g2: SymmetryType, b) -> np.ndarray:
    """Smallest distance between closure(g1, a) and each closure(g2, b_i).

    a is one point (3,), b is (N, 3). Circles are handled analytically: two
    z-axis circles are hypot(dr, dz) apart, a point is hypot(d rho, dz) from
    a circle.
    """
    a = np.asarray(a, dtype=np.float64).reshape(3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    fin1, fin2 = g1.is_finite, g2.is_finite
    if fin1 and fin2:
        ma = _members(g1, a[None])[0]  # (n1, 3)
        mb = _members(g2, b)  # (N, n2, 3)
        diff = mb[:, :, None, :] - ma[None, None, :, :]
        return np.sqrt((diff ** 2).sum(-1)).min(axis=(1, 2))
    if not fin1 and not fin2:
        return np.hypot(np.hypot(b[:, 0], b[:, 1]) - np.hypot(a[0], a[1]), b[:, 2] - a[2])
    if fin1:  # finite a against circles through b
        ma = _members(g1, a[None])[0]
        rho_a = np.hypot(ma[:, 0], ma[:, 1])
        rb = np.hypot(b[:, 0], b[:, 1])
        return np.hypot(rb[:, None] - rho_a[None, :], b[:, 2:3] - ma[None, :, 2]).min(axis=1)
    mb = _members(g2, b)
    rho_b = np.hypot(mb[..., 0], mb[..., 1])
    return np.hypot(rho_b - np.hypot(a[0], a[1]), mb[..., 2] - a[2]).min(axis=1)


@dataclass
class Match:
    view: int
    pixel: tuple[int, int]
    distance: float


def _field_arrays(f: CoordinateField):
    return np.asarray(f.coords.data, np.float64), np.asarray(f.probs.data, np.float64)


def pixel_distances(fields: Sequence[CoordinateField], query: tuple[int, tuple[int, int]],
                    view: int, mode: str = "argmax", min_prob: float = 0.05) -> np.ndarray:
    """Closure distance from the query pixel to every foreground pixel of one view.

    ``argmax`` compares each pixel's most probable type; ``all`` takes the
    minimum over every pair of types whose probability is at least min_prob.
    """
    qv, (qr, qc) = query
    qf = fields[qv]
    if not qf.mask[qr, qc]:
        raise ValueError(f"query pixel {(qr, qc)} is background in view {qv}")
    qi = int(np.searchsorted(qf.pixel_index, qr * qf.mask.shape[1] + qc))
    qcoords, qprobs = _field_arrays(qf)
    tf = fields[view]
    coords, probs = _field_arrays(tf)
    n = coords.shape[0]
    if mode == "argmax":
        ga = int(np.argmax(qprobs[qi]))
        gb = np.argmax(probs, axis=1)
        out = np.full(n, np.inf)
        for j, g2 in enumerate(tf.types):
            sel = gb == j
            if sel.any():
                out[sel] = closure_set_distance(qf.types[ga], qcoords[qi, ga], g2, coords[sel, j])
        return out
    if mode != "all":
        raise ValueError("mode must be 'argmax' or 'all'")
    out = np.full(n, np.inf)
    for i, g1 in enumerate(qf.types):
        if qprobs[qi, i] < min_prob:
            continue
        for j, g2 in enumerate(tf.types):
            d = closure_set_distance(g1, qcoords[qi, i], g2, coords[:, j])
            out = np.where(probs[:, j] >= min_prob, np.minimum(out, d), out)
    return out


def find_correspondences(fields: Sequence[CoordinateField], query: tuple[int, tuple[int, int]],
                         top_n: int = 5, mode: str = "argmax") -> dict[int, list[Match]]:
    """The top_n closest foreground pixels in every view, nearest first (stable ties)."""
    out = {}
    for v, f in enumerate(fields):
        d = pixel_distances(fields, query, v, mode)
        order = np.argsort(d, kind="stable")[:top_n]
        w = f.mask.shape[1]
        out[v] = [Match(v, (int(f.pixel_index[i] // w), int(f.pixel_index[i] % w)), float(d[i]))
                  for i in order]
    return out
