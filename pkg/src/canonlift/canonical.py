"""Per-pixel symmetry-aware canonical coordinates and their training losses."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import symmetry as sym
from .diffcore import ops
from .diffcore.tape import Buffer, ShapeError, Tape
from .symmetry import SymmetryType


class PixelMap(Protocol):
    input_dim: int
    output_dim: int

    def apply(self, tape: Tape, x: Buffer) -> Buffer: ...


@dataclass
class CoordinateField:
    """Predictions for the foreground pixels of one image.

    ``coords`` is (N, G, 3), ``probs`` (N, G) and ``features`` (N, D), with
    rows ordered like ``np.flatnonzero(mask)``.
    """

    types: tuple[SymmetryType, ...]
    mask: np.ndarray
    coords: Buffer
    probs: Buffer
    features: Buffer

    @property
    def num_pixels(self) -> int:
        return int(self.mask.sum())

    @property
    def pixel_index(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def dense(self) -> dict[str, np.ndarray]:
        """H x W arrays with zeros on the background, for inspection and export."""
        h, w = self.mask.shape
        g = len(self.types)
        out = {
            "coords": np.zeros((h * w, g, 3)),
            "probs": np.zeros((h * w, g)),
            "features": np.zeros((h * w, self.features.shape[1])),
        }
        idx = self.pixel_index
        out["coords"][idx] = self.coords.data
        out["probs"][idx] = self.probs.data
        out["features"][idx] = self.features.data
        return {k: v.reshape((h, w) + v.shape[1:]) for k, v in out.items()}


@dataclass
class GroundTruthCoords:
    coords: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W)

    def foreground(self) -> np.ndarray:
        return self.coords.reshape(-1, 3)[np.flatnonzero(self.mask)]


@dataclass
class ShapeOracle:
    surface_points: np.ndarray  # (N, 3)
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.surface_points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("shape oracle needs at least one surface point")
        self.surface_points = pts

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.surface_points)
        return self._tree

    def nearest(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distances and nearest surface points for queries x (P, 3)."""
        d, i = self.tree.query(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        return d, self.surface_points[i]

    def sampling_tolerance(self) -> float:
        """Largest nearest-neighbour gap within the point set."""
        if self.surface_points.shape[0] < 2:
            return 0.0
        d, _ = self.tree.query(self.surface_points, k=2)
        return float(d[:, 1].max())


def pixel_coordinates(h: int, w: int) -> np.ndarray:
    """(H*W, 2) pixel centres normalised to [-1, 1]: x right, y up."""
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def predict_coords(f_theta: PixelMap, tape: Tape, image, mask: np.ndarray,
                   types: Sequence[SymmetryType]) -> CoordinateField:
    """Run the pixel predictor on the foreground of one image.

    Outputs per pixel: |G| * 3 coordinate channels (0.5 * tanh), |G| type
    logits (softmax) and the remaining D channels as features.
    """
    types = tuple(types)
    g = len(types)
    image = tape.lift(image)
    h, w = mask.shape
    if image.shape != (h, w, 3):
        raise ShapeError(f"image shape {image.shape} does not match mask {mask.shape}")
    if f_theta.input_dim != 5:
        raise ShapeError(f"pixel predictor must take 5 inputs, takes {f_theta.input_dim}")
    d = f_theta.output_dim - 4 * g
    if d < 1:
        raise ShapeError(f"pixel predictor output {f_theta.output_dim} too small for {g} types")
    idx = np.flatnonzero(mask)
    rgb = ops.take_rows(ops.reshape(image, (h * w, 3)), idx)
    pix = tape.constant(pixel_coordinates(h, w)[idx])
    out = f_theta.apply(tape, ops.concat([rgb, pix], axis=1))
    n = idx.size
    coords = ops.reshape(ops.scale(ops.tanh(ops.columns(out, 0, 3 * g)), 0.5), (n, g, 3))
    probs = ops.softmax(ops.columns(out, 3 * g, 4 * g), axis=1)
    feats = ops.columns(out, 4 * g, 4 * g + d)
    return CoordinateField(types, mask.astype(bool), coords, probs, feats)


# closure geometry as tape operations ----------------------------------------------

def orbit_points(g: SymmetryType, c: Buffer) -> Buffer:
    """Finite orbit members of each row of c (N, 3) -> (N, n, 3)."""
    mats = sym.member_matrices(g).astype(c.data.dtype)
    out = np.einsum("nij,pj->pni", mats, c.data)
    return c.tape.record("orbit_points", out, (c,), lambda gr: (np.einsum("nij,pni->pj", mats, gr),))


def circle_samples(c: Buffer, phi: np.ndarray) -> Buffer:
    """Points on the z-rotation orbit of each row of c at angles phi (N, m)."""
    x = c.data
    r = np.hypot(x[:, 0], x[:, 1])
    cos, sin = np.cos(phi), np.sin(phi)
    out = np.stack([r[:, None] * cos, r[:, None] * sin,
                    np.broadcast_to(x[:, 2:3], phi.shape)], axis=-1)

    def bw(g):
        dr = (g[..., 0] * cos + g[..., 1] * sin).sum(axis=1)
        safe = np.where(r > 0, r, 1.0)
        grad = np.zeros_like(x)
        grad[:, 0] = np.where(r > 0, dr * x[:, 0] / safe, 0.0)
        grad[:, 1] = np.where(r > 0, dr * x[:, 1] / safe, 0.0)
        grad[:, 2] = g[..., 2].sum(axis=1)
        return (grad,)

    return c.tape.record("circle_samples", out, (c,), bw)


def closure_min_distance(g: SymmetryType, c: Buffer, target: np.ndarray) -> Buffer:
    """min over the closure of each row of c of the distance to target (N, 3)."""
    x = c.data
    t = np.asarray(target, dtype=x.dtype)
    if g.is_finite:
        mats = sym.member_matrices(g).astype(x.dtype)
        members = np.einsum("nij,pj->pni", mats, x)
        diff = members - t[:, None, :]
        dist = np.sqrt((diff * diff).sum(-1))
        j = np.argmin(dist, axis=1)  # first minimum wins, so duplicates never matter
        rows = np.arange(x.shape[0])
        d = dist[rows, j]
        unit = np.where(d[:, None] > 0, diff[rows, j] / np.where(d > 0, d, 1.0)[:, None], 0.0)

        def bw(gr):
            # d/dx of ||A_j x - t|| = A_j^T u
            return (np.einsum("pi,pij->pj", gr[:, None] * unit, mats[j]),)

        return c.tape.record("closure_min_distance", d, (c,), bw)

    r = np.hypot(x[:, 0], x[:, 1])
    rho = np.hypot(t[:, 0], t[:, 1])
    dr, dz = rho - r, t[:, 2] - x[:, 2]
    d = np.hypot(dr, dz)

    def bw_circle(gr):
        safe_d = np.where(d > 0, d, 1.0)
        safe_r = np.where(r > 0, r, 1.0)
        dd_dr = np.where(d > 0, -dr / safe_d, 0.0)
        dd_dz = np.where(d > 0, -dz / safe_d, 0.0)
        grad = np.zeros_like(x)
        grad[:, 0] = gr * dd_dr * np.where(r > 0, x[:, 0] / safe_r, 0.0)
        grad[:, 1] = gr * dd_dr * np.where(r > 0, x[:, 1] / safe_r, 0.0)
        grad[:, 2] = gr * dd_dz
        return (grad,)

    return c.tape.record("closure_min_distance", d, (c,), bw_circle)


def shape_distance(oracle: ShapeOracle, x) -> float:
    d, _ = oracle.nearest(np.asarray(x, dtype=np.float64).reshape(1, 3))
    return float(d[0])


def shape_distance_points(oracle: ShapeOracle, x: Buffer) -> Buffer:
    """Distance from each row of x (P, 3) to the nearest oracle point."""
    d, near = oracle.nearest(x.data)
    d = d.astype(x.data.dtype)
    diff = x.data - near
    unit = np.where(d[:, None] >= 1e-9, diff / np.where(d >= 1e-9, d, 1.0)[:, None], 0.0)
    return x.tape.record("shape_distance", d, (x,), lambda g: (g[:, None] * unit,))


# losses ----------------------------------------------------------------------------

def _type_column(field: CoordinateField, i: int) -> tuple[Buffer, Buffer]:
    n = field.num_pixels
    c = ops.reshape(ops.getitem(field.coords, (slice(None), i, slice(None))), (n, 3))
    p = ops.columns(field.probs, i, i + 1)
    return c, ops.reshape(p, (n,))


def coord_loss(field: CoordinateField, gt_coords: np.ndarray) -> Buffer:
    """Probability-weighted distance from the ground truth to the nearest
    closure member of each type, averaged over foreground pixels."""
    tape = field.coords.tape
    n = field.num_pixels
    gt = np.asarray(gt_coords, dtype=tape.dtype).reshape(-1, 3)
    if gt.shape[0] != n:
        raise ShapeError(f"coord_loss: {gt.shape[0]} ground-truth rows for {n} pixels")
    if n == 0:
        warnings.warn("coord_loss: empty foreground, loss is zero", RuntimeWarning)
        return tape.constant(0.0)
    total = None
    for i, g in enumerate(field.types):
        c, p = _type_column(field, i)
        term = ops.sum(ops.multiply(p, closure_min_distance(g, c, gt)))
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / n)


def closure_points(g: SymmetryType, c: Buffer, m: int, rng: np.random.Generator) -> Buffer:
    """Closure members (finite types) or m random circle samples: (N, n, 3)."""
    if g.is_finite:
        return orbit_points(g, c)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=(c.shape[0], m))
    return circle_samples(c, phi)


def spurious_loss(field: CoordinateField, oracle: ShapeOracle, m: int,
                  rng: np.random.Generator) -> Buffer:
    """Probability-weighted worst shape distance over each predicted closure."""
    if oracle is None or oracle.surface_points.shape[0] == 0:
        raise ValueError("spurious_loss needs a non-empty shape oracle")
    if m < 1:
        raise ValueError("m must be >= 1")
    tape = field.coords.tape
    n = field.num_pixels
    if n == 0:
        warnings.warn("spurious_loss: empty foreground, loss is zero", RuntimeWarning)
        return tape.constant(0.0)
    total = None
    for i, g in enumerate(field.types):
        c, p = _type_column(field, i)
        pts = closure_points(g, c, m, rng)
        k = pts.shape[1]
        dist = ops.reshape(shape_distance_points(oracle, ops.reshape(pts, (n * k, 3))), (n, k))
        term = ops.sum(ops.multiply(p, ops.max_along(dist, axis=1)))
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / n)


def mix_probs(field: CoordinateField, alpha: float) -> CoordinateField:
    """Field whose type weights are (1 - alpha) * P + alpha / |G|.

    Used as a warm-up for the coordinate losses: while alpha > 0 every
    type's coordinate head receives gradient, so a type whose probability
    collapses early can still learn its coordinates.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        return field
    g = len(field.types)
    tape = field.probs.tape
    mixed = ops.add(ops.scale(field.probs, 1.0 - alpha), tape.constant(np.full((1, g), alpha / g)))
    return replace(field, probs=mixed)


def ground_truth_field(tape: Tape, gt: GroundTruthCoords, types: Sequence[SymmetryType],
                       true_type: SymmetryType, feature_dim: int = 1) -> CoordinateField:
    """A field that predicts the ground truth for every type, with all
    probability on ``true_type``."""
    types = tuple(types)
    c = gt.foreground()
    n = c.shape[0]
    coords = np.repeat(c[:, None, :], len(types), axis=1)
    probs = np.zeros((n, len(types)))
    probs[:, types.index(true_type)] = 1.0
    return CoordinateField(types, gt.mask.astype(bool), tape.constant(coords),
                           tape.constant(probs), tape.constant(np.zeros((n, feature_dim))))
