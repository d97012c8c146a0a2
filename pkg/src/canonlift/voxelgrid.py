"""Voxel feature grids over the unit cube and the trilinear splat/sample pair.

A grid with C cells per axis covers [-0.5, 0.5]^3; cell (i, j, k) is centred
at -0.5 + (index + 0.5) / C and stored at flat row (i * C + j) * C + k with
the feature axis fastest. The splat weight of a cell for point x is
prod_d max(0, 1 - C |x_d - centre_d|).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore.tape import Buffer, ShapeError, Tape

_CORNERS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])


@dataclass(frozen=True)
class GridSpec:
    cells: int
    feature_dim: int = 1

    def __post_init__(self):
        if self.cells < 2:
            raise ValueError("grid needs at least 2 cells per axis")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")

    @property
    def h(self) -> float:
        return 1.0 / self.cells

    @property
    def num_cells(self) -> int:
        return self.cells ** 3

    @property
    def interior(self) -> tuple[float, float]:
        return -0.5 + 0.5 * self.h, 0.5 - 0.5 * self.h

    def centers(self) -> np.ndarray:
        """(C^3, 3) cell centres in flat index order."""
        c = -0.5 + (np.arange(self.cells) + 0.5) * self.h
        g = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)

    def with_dim(self, d: int) -> GridSpec:
        return GridSpec(self.cells, d)


@dataclass
class FeatureGrid:
    spec: GridSpec
    values: np.ndarray  # (C, C, C, D)

    @classmethod
    def zeros(cls, spec: GridSpec, dtype=np.float64) -> FeatureGrid:
        c = spec.cells
        return cls(spec, np.zeros((c, c, c, spec.feature_dim), dtype=dtype))

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.spec.feature_dim)


# stencil ---------------------------------------------------------------------

@dataclass
class Stencil:
    index: np.ndarray  # (P, 8) flat cell index
    weight: np.ndarray  # (P, 8)
    dweight: np.ndarray  # (P, 8, 3) d weight / d x


def stencil(spec: GridSpec, x: np.ndarray) -> Stencil:
    """Trilinear corner cells, weights and weight derivatives for points x (P, 3).

    Points are clamped into the interior band; the derivative is zero along
    clamped axes.
    """
    c = spec.cells
    lo, hi = spec.interior
    xc = np.clip(x, lo, hi)
    free = ((x > lo) & (x < hi)).astype(x.dtype)
    u = (xc + 0.5) * c - 0.5
    i0 = np.clip(np.floor(u), 0, c - 2).astype(np.int64)
    t = u - i0
    # snap rounding noise so cell centres hit a single cell exactly
    t = np.where(np.abs(t - np.round(t)) < 1e-12, np.round(t), t)
    # per-axis factors for corner offset 0 and 1, and their slopes
    fac = np.stack([1.0 - t, t], axis=-1)  # (P, 3, 2)
    slope = np.stack([-c * free, c * free], axis=-1)
    cx = [fac[:, 0, _CORNERS[:, 0]], fac[:, 1, _CORNERS[:, 1]], fac[:, 2, _CORNERS[:, 2]]]
    sx = [slope[:, 0, _CORNERS[:, 0]], slope[:, 1, _CORNERS[:, 1]], slope[:, 2, _CORNERS[:, 2]]]
    w = cx[0] * cx[1] * cx[2]
    dw = np.stack([sx[0] * cx[1] * cx[2], cx[0] * sx[1] * cx[2], cx[0] * cx[1] * sx[2]], axis=-1)
    ii = i0[:, None, :] + _CORNERS[None]
    index = (ii[..., 0] * c + ii[..., 1]) * c + ii[..., 2]
    return Stencil(index, w, dw)


def splat_weights(spec: GridSpec, x) -> list[tuple[tuple[int, int, int], float]]:
    """Cells touched by a single point with their (positive) trilinear weights."""
    st = stencil(spec, np.asarray(x, dtype=np.float64).reshape(1, 3))
    c = spec.cells
    out = []
    for idx, w in zip(st.index[0], st.weight[0]):
        if w > 0:
            out.append(((int(idx // (c * c)), int(idx // c % c), int(idx % c)), float(w)))
    return out


def inside_cube(x: np.ndarray) -> np.ndarray:
    return np.all((x >= -0.5) & (x <= 0.5), axis=-1)


# plain numpy forward kernels ---------------------------------------------------

def scatter(spec: GridSpec, st: Stencil, values: np.ndarray) -> np.ndarray:
    """Accumulate per-point values (P, D) weighted by the stencil into (C^3, D)."""
    n = spec.num_cells
    idx = st.index.reshape(-1)
    out = np.empty((n, values.shape[1]), dtype=values.dtype)
    for d in range(values.shape[1]):
        contrib = (st.weight * values[:, d:d + 1]).reshape(-1)
        out[:, d] = np.bincount(idx, weights=contrib, minlength=n)
    return out


def gather(st: Stencil, grid: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a (C^3, D) grid: returns (P, D)."""
    return np.einsum("pk,pkd->pd", st.weight, grid[st.index])


def gather_dx(st: Stencil, grid: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Σ_corners (d w / d x) <g, grid[corner]>  -> (P, 3)."""
    dots = np.einsum("pd,pkd->pk", g, grid[st.index])
    return np.einsum("pk,pkj->pj", dots, st.dweight)


def splat(grid: FeatureGrid, x, f, scale: float = 1.0) -> None:
    """Add scale * w_cell * f into every cell around x (in place)."""
    f = np.asarray(f, dtype=np.float64).reshape(1, -1)
    if f.shape[1] != grid.spec.feature_dim:
        raise ShapeError(f"feature dim {f.shape[1]} != grid dim {grid.spec.feature_dim}")
    if not np.all(np.isfinite(f)):
        raise ValueError("cannot splat a non-finite feature")
    st = stencil(grid.spec, np.asarray(x, dtype=np.float64).reshape(1, 3))
    grid.flat[...] += scatter(grid.spec, st, scale * f).astype(grid.values.dtype)


def sample(grid: FeatureGrid, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    st = stencil(grid.spec, x)
    out = gather(st, grid.flat)
    out[~inside_cube(x)] = 0.0
    return out[0] if out.shape[0] == 1 else out


# tape operations ----------------------------------------------------------------

def _splat_adjoint(st: Stencil, x: Buffer, f: Buffer, s: Buffer, g: np.ndarray):
    """Adjoint of V = Σ_p s_p w_p f_p w.r.t. (x, f, s)."""
    back = gather(st, g)  # (P, D): the trilinear sample of the output gradient
    gf = back * s.data[:, None] if f.requires_grad else None
    gs = (back * f.data).sum(axis=1) if s.requires_grad else None
    gx = None
    if x.requires_grad:
        gx = gather_dx(st, g, f.data) * s.data[:, None]
    return gx, gf, gs


def splat_points(tape: Tape, spec: GridSpec, x, f, scale) -> Buffer:
    """Differentiable splat of P features into a fresh (C^3, D) grid buffer."""
    x, f, s = tape.lift(x), tape.lift(f), tape.lift(scale)
    p = x.shape[0]
    if x.shape != (p, 3) or f.data.ndim != 2 or f.shape[0] != p or s.shape != (p,):
        raise ShapeError(f"splat: x {x.shape}, f {f.shape}, scale {s.shape} are inconsistent")
    if not np.all(np.isfinite(f.data)):
        raise ValueError("splat: non-finite features")
    st = stencil(spec, x.data)
    out = scatter(spec, st, f.data * s.data[:, None])
    return tape.record("splat", out, (x, f, s), lambda g: _splat_adjoint(st, x, f, s, g))


def _sample_adjoint(spec: GridSpec, st: Stencil, inside: np.ndarray, grid: Buffer, x: Buffer,
                    g: np.ndarray):
    g = g * inside[:, None]
    ggrid = scatter(spec, st, g) if grid.requires_grad else None
    gx = gather_dx(st, grid.data, g) if x.requires_grad else None
    return ggrid, gx


def sample_points(tape: Tape, spec: GridSpec, grid, x) -> Buffer:
    """Trilinear lookup of a (C^3, D) grid buffer at points x (P, 3).

    Points outside the cube read zeros.
    """
    grid, x = tape.lift(grid), tape.lift(x)
    if grid.data.ndim != 2 or grid.shape[0] != spec.num_cells:
        raise ShapeError(f"sample: grid shape {grid.shape} does not match {spec}")
    st = stencil(spec, x.data)
    inside = inside_cube(x.data).astype(x.data.dtype)
    out = gather(st, grid.data) * inside[:, None]
    return tape.record("sample", out, (grid, x),
                       lambda g: _sample_adjoint(spec, st, inside, grid, x, g))


def neighbor_mean_values(values: np.ndarray, cells: int) -> np.ndarray:
    """Mean of the 6 face neighbours with zero padding; (C^3, F) -> (C^3, F)."""
    v = values.reshape(cells, cells, cells, -1)
    p = np.pad(v, ((1, 1), (1, 1), (1, 1), (0, 0)))
    s = (p[:-2, 1:-1, 1:-1] + p[2:, 1:-1, 1:-1] + p[1:-1, :-2, 1:-1]
         + p[1:-1, 2:, 1:-1] + p[1:-1, 1:-1, :-2] + p[1:-1, 1:-1, 2:])
    return (s / 6.0).reshape(values.shape)


def neighbor_mean(grid: Buffer, cells: int) -> Buffer:
    # the operator is symmetric, so it is its own adjoint
    return grid.tape.record("neighbor_mean", neighbor_mean_values(grid.data, cells), (grid,),
                            lambda g: (neighbor_mean_values(g, cells),))


# CVGF grid files --------------------------------------------------------------------

CVGF_MAGIC = b"CVGF"
CVGF_VERSION = 1


class GridFormatError(ValueError):
    pass


def write_grid(path, values: np.ndarray, cells: int | None = None) -> None:
    v = np.asarray(values)
    if v.ndim == 2:
        if cells is None:
            cells = round(v.shape[0] ** (1 / 3))
        v = v.reshape(cells, cells, cells, -1)
    c, d = v.shape[0], v.shape[-1]
    header = CVGF_MAGIC + struct.pack("<IIIB", CVGF_VERSION, c, d, 0)
    Path(path).write_bytes(header + np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_grid(path) -> FeatureGrid:
    buf = Path(path).read_bytes()
    if buf[:4] != CVGF_MAGIC:
        raise GridFormatError(f"{path}: bad magic at byte offset 0")
    if len(buf) < 17:
        raise GridFormatError(f"{path}: truncated header at byte offset {len(buf)}")
    version, c, d, dtype = struct.unpack_from("<IIIB", buf, 4)
    if version != CVGF_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version} at byte offset 4")
    if dtype != 0:
        raise GridFormatError(f"{path}: unsupported dtype {dtype} at byte offset 16")
    n = c * c * c * d
    if len(buf) - 17 < 4 * n:
        raise GridFormatError(f"{path}: truncated payload at byte offset {len(buf)}")
    vals = np.frombuffer(buf, dtype="<f4", count=n, offset=17).reshape(c, c, c, d).astype(np.float32)
    return FeatureGrid(GridSpec(c, d), vals)
