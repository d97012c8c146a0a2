"""Task heads on the aggregate grid: voxel occupancy and novel-view rendering."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregate import with_neighbors
from .diffcore import ops
from .diffcore.nn import ParametricMap
from .diffcore.tape import Buffer, ShapeError, Tape
from .voxelgrid import GridSpec, sample_points

UP = np.array([0.0, 0.0, 1.0])


@dataclass
class Camera:
    azimuth: float  # degrees
    elevation: float  # degrees
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    distance: float = 1.5
    focal: float = 1.2  # normalised by the image half-size
    image_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.distance > 0:
            raise ValueError("camera distance must be positive")

    @property
    def direction(self) -> np.ndarray:
        """Unit vector from the look-at point towards the camera."""
        az, el = np.radians(self.azimuth), np.radians(self.elevation)
        return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])

    @property
    def center(self) -> np.ndarray:
        return self.distance * self.direction + self.translation

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        fwd = -self.direction
        right = np.cross(fwd, UP)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return fwd, right, up

    def rays(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions through the centres of an h x w pixel grid."""
        xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
        ys = 1.0 - (np.arange(h) + 0.5) / h * 2.0
        gx, gy = np.meshgrid(xs, ys)
        fwd, right, up = self.basis()
        d = fwd + (gx.reshape(-1, 1) * right + gy.reshape(-1, 1) * up) / self.focal
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.broadcast_to(self.center, d.shape).copy(), d

    def to_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, *self.translation, self.distance, self.focal])

    @classmethod
    def from_array(cls, a, image_size) -> Camera:
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), a[2:5], float(a[5]), float(a[6]),
                   (int(image_size[0]), int(image_size[1])))


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo: float = -0.5, hi: float = 0.5):
    """Slab-method entry/exit distances with the cube [lo, hi]^3; miss -> t_enter > t_exit."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # axis-parallel rays: inside the slab -> unbounded, outside -> empty
    par = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tn = np.minimum(t1, t2).max(axis=-1)
    tf = np.maximum(t1, t2).min(axis=-1)
    tn = np.maximum(tn, 0.0)
    return tn, tf


def cast_ray(cam: Camera, pixel: tuple[int, int], grid: int):
    """Pinhole ray through pixel (row, col) of a grid x grid image."""
    r, c = pixel
    if not (0 <= r < grid and 0 <= c < grid):
        raise ValueError(f"pixel {pixel} outside the {grid}x{grid} ray grid")
    origins, dirs = cam.rays(grid, grid)
    k = r * grid + c
    tn, tf = ray_box(origins[k:k + 1], dirs[k:k + 1])
    return origins[k], dirs[k], float(tn[0]), float(tf[0])


# occupancy --------------------------------------------------------------------------

@dataclass
class OccupancyGrid:
    probs: np.ndarray  # (C, C, C) in [0, 1]


def predict_occupancy(head: ParametricMap, tape: Tape, v: Buffer, cells: int) -> tuple[Buffer, Buffer]:
    """Per-voxel logits (C^3, 1) and sigmoid probabilities."""
    if head.input_dim != 2 * v.shape[1] or head.output_dim != 1:
        raise ShapeError(f"occupancy head {head.input_dim}->{head.output_dim} "
                         f"does not fit features of dim {v.shape[1]}")
    logits = head.apply(tape, with_neighbors(v, cells))
    return logits, ops.sigmoid(logits)


def occupancy_loss(logits: Buffer, gt) -> Buffer:
    gt = np.asarray(gt, dtype=np.float64).reshape(logits.shape)
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth occupancy must be binary")
    return ops.bce_with_logits(logits, gt)


# renderer ------------------------------------------------------------------------------

@dataclass(frozen=True)
class RenderSettings:
    ray_grid: int = 16
    depth_samples: int = 16
    output_size: int = 32

    def __post_init__(self):
        if self.ray_grid < 1 or self.depth_samples < 1:
            raise ValueError("ray_grid and depth_samples must be >= 1")
        if self.output_size % self.ray_grid:
            raise ValueError("output_size must be a multiple of ray_grid")

    @classmethod
    def paper(cls) -> RenderSettings:
        return cls(56, 64, 224)


@dataclass
class Projection:
    features: Buffer  # (S*S, D)
    depth_weights: np.ndarray  # (hit rays, N_d)
    hit: np.ndarray  # (S*S,) bool


def depth_samples(tn: np.ndarray, tf: np.ndarray, n: int) -> np.ndarray:
    """Uniform depths with midpoint offset over each ray's [t_enter, t_exit]."""
    frac = (np.arange(n) + 0.5) / n
    return tn[:, None] + frac[None, :] * (tf - tn)[:, None]


def project(tape: Tape, v: Buffer, spec: GridSpec, cam: Camera, occlusion: ParametricMap,
            settings: RenderSettings, stop_logits: bool = False) -> Projection:
    """Occlusion-weighted pooling of grid features along each camera ray."""
    s, nd = settings.ray_grid, settings.depth_samples
    d = v.shape[1]
    if occlusion.input_dim != d + 1 or occlusion.output_dim != 1:
        raise ShapeError(f"occlusion net must map {d + 1} -> 1")
    origins, dirs = cam.rays(s, s)
    tn, tf = ray_box(origins, dirs)
    hit = tn < tf
    idx = np.flatnonzero(hit)
    r = idx.size
    if r == 0:
        return Projection(tape.constant(np.zeros((s * s, d))), np.zeros((0, nd)), hit)
    t = depth_samples(tn[idx], tf[idx], nd)
    pts = origins[idx, None, :] + t[..., None] * dirs[idx, None, :]
    feats = sample_points(tape, spec, v, pts.reshape(-1, 3))
    depth_col = np.tile((np.arange(nd) + 0.5) / nd, r).reshape(-1, 1)
    logits = occlusion.apply(tape, ops.concat([feats, tape.constant(depth_col)], axis=1))
    if stop_logits:
        logits = ops.stop_gradient(logits)
    weights = ops.softmax(ops.reshape(logits, (r, nd)), axis=1)
    pooled = ops.sum(ops.multiply(ops.reshape(feats, (r, nd, d)), ops.reshape(weights, (r, nd, 1))),
                     axis=1)
    return Projection(ops.scatter_rows(pooled, idx, s * s), weights.data, hit)


def upsample_nearest(a: Buffer, size: int, factor: int) -> Buffer:
    """(size*size, C) pixel rows -> (size*f, size*f, C) by block replication."""
    c = a.shape[1]
    img = a.data.reshape(size, size, c)
    out = img.repeat(factor, axis=0).repeat(factor, axis=1)

    def bw(g):
        g = g.reshape(size, factor, size, factor, c).sum(axis=(1, 3))
        return (g.reshape(size * size, c),)

    return a.tape.record("upsample_nearest", out, (a,), bw)


def decode(decoder: ParametricMap, tape: Tape, features: Buffer, settings: RenderSettings) -> Buffer:
    """Per-pixel decoder + sigmoid, then nearest upsampling to the output size."""
    if decoder.input_dim != features.shape[1] or decoder.output_dim != 3:
        raise ShapeError(f"decoder must map {features.shape[1]} -> 3")
    rgb = ops.sigmoid(decoder.apply(tape, features))
    factor = settings.output_size // settings.ray_grid
    if factor == 1:
        return ops.reshape(rgb, (settings.ray_grid, settings.ray_grid, 3))
    return upsample_nearest(rgb, settings.ray_grid, factor)


def view_synthesis_loss(rendered: Sequence[Buffer], targets: Sequence[np.ndarray]) -> Buffer:
    """Mean absolute error per view, averaged over the supervision views."""
    if len(rendered) != len(targets) or not rendered:
        raise ShapeError("need one target per rendered view")
    total = None
    for img, gt in zip(rendered, targets):
        gt = np.asarray(gt)
        if img.shape != gt.shape:
            raise ShapeError(f"rendered {img.shape} vs target {gt.shape}")
        term = ops.l1_loss(img, gt)
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / len(rendered))


# image files -------------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w, _ = img.shape
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    payload = parts[4]
    return np.frombuffer(payload[:w * h * 3], dtype=np.uint8).reshape(h, w, 3) / float(maxval)


CLIM_MAGIC = b"CLIM"


def write_clim(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    Path(path).write_bytes(CLIM_MAGIC + struct.pack("<III", h, w, c)
                           + np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_clim(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != CLIM_MAGIC:
        raise ValueError(f"{path}: bad magic at byte offset 0")
    h, w, c = struct.unpack_from("<III", buf, 4)
    if len(buf) < 16 + 4 * h * w * c:
        raise ValueError(f"{path}: truncated payload at byte offset {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=16).reshape(h, w, c).astype(np.float32)
