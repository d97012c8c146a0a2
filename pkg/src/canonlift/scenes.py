"""Procedural symmetric shapes with exact ground truth.

Every shape is a min-union of axis-aligned boxes and z-aligned cylinders,
centred and scaled so its bounding-box diagonal is 1. The object frame is
the canonical frame; cameras move around it, so the surface point seen at a
pixel is directly its ground-truth canonical coordinate.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .canonical import ShapeOracle
from .heads import Camera, ray_box
from .symmetry import SymmetryType

CLASSES: dict[str, SymmetryType] = {
    "table_rot4": SymmetryType.ROT4_Z,
    "bench_rot2": SymmetryType.ROT2_Z,
    "bottle_rotcont": SymmetryType.ROTCONT_Z,
    "plane_reflecty": SymmetryType.REFLECT_Y,
    "wedge_identity": SymmetryType.IDENTITY,
}
CLASS_NAMES = tuple(CLASSES)

TRACE_STEPS = 128
TRACE_EPS = 1e-4
ORACLE_POINTS = 4096


# primitives --------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c, h = np.asarray(self.center), np.asarray(self.half)
        return c - h, c + h

    def transformed(self, shift: np.ndarray, s: float) -> Box:
        return Box(tuple((np.asarray(self.center) - shift) * s), tuple(np.asarray(self.half) * s))


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float, float]
    radius: float
    half_height: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        dr = np.hypot(p[..., 0] - c[0], p[..., 1] - c[1]) - self.radius
        dz = np.abs(p[..., 2] - c[2]) - self.half_height
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        return outside + np.minimum(np.maximum(dr, dz), 0.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        h = np.array([self.radius, self.radius, self.half_height])
        return c - h, c + h

    def transformed(self, shift: np.ndarray, s: float) -> Cylinder:
        return Cylinder(tuple((np.asarray(self.center) - shift) * s), self.radius * s,
                        self.half_height * s)


Primitive = Box | Cylinder


@dataclass(frozen=True)
class ShapeSpec:
    cls: str
    params: tuple[float, ...]
    seed: int

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown shape class {self.cls!r}; valid: {', '.join(CLASS_NAMES)}")

    @property
    def symmetry(self) -> SymmetryType:
        return CLASSES[self.cls]


# class-specific geometry; every parameter is an extent that must be positive
_PARAM_RANGES: dict[str, list[tuple[float, float]]] = {
    # top half-width, top thickness, leg height, leg half-width, leg inset
    "table_rot4": [(0.35, 0.5), (0.1, 0.14), (0.35, 0.6), (0.05, 0.07), (0.02, 0.08)],
    # seat half-length, seat half-depth, seat thickness, leg height, leg half-thickness
    "bench_rot2": [(0.45, 0.6), (0.15, 0.22), (0.1, 0.14), (0.25, 0.4), (0.05, 0.07)],
    # body radius, body half-height, neck radius, neck half-height, shoulder radius
    "bottle_rotcont": [(0.15, 0.22), (0.2, 0.32), (0.05, 0.08), (0.06, 0.12), (0.1, 0.14)],
    # fuselage half-length, wing half-span, wing half-chord, fin height, fuselage half-width
    "plane_reflecty": [(0.4, 0.5), (0.35, 0.5), (0.08, 0.12), (0.1, 0.16), (0.05, 0.07)],
    # base half-x, base half-y, tower height, arm length, block thickness
    "wedge_identity": [(0.25, 0.35), (0.15, 0.22), (0.2, 0.35), (0.15, 0.25), (0.06, 0.09)],
}


def _raw_primitives(cls: str, p: Sequence[float]) -> list[Primitive]:
    if cls == "table_rot4":
        a, t, leg, w, inset = p
        o = a - inset - w
        prims: list[Primitive] = [Box((0.0, 0.0, leg + t / 2), (a, a, t / 2))]
        for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            prims.append(Box((sx * o, sy * o, leg / 2), (w, w, leg / 2)))
        return prims
    if cls == "bench_rot2":
        ax, ay, t, leg, lw = p
        o = ax - lw - 0.03
        return [Box((0.0, 0.0, leg + t / 2), (ax, ay, t / 2)),
                Box((o, 0.0, leg / 2), (lw, ay * 0.85, leg / 2)),
                Box((-o, 0.0, leg / 2), (lw, ay * 0.85, leg / 2))]
    if cls == "bottle_rotcont":
        r, hh, nr, nh, sr = p
        return [Cylinder((0.0, 0.0, hh), r, hh),
                Cylinder((0.0, 0.0, 2 * hh + 0.04), sr, 0.04),
                Cylinder((0.0, 0.0, 2 * hh + 0.08 + nh), nr, nh)]
    if cls == "plane_reflecty":
        fx, span, chord, fin, fw = p
        return [Box((0.0, 0.0, 0.0), (fx, fw, fw)),
                Box((0.05, 0.0, 0.0), (chord, span, 0.04)),
                Box((-fx + 0.06, 0.0, fw + fin / 2), (0.06, 0.04, fin / 2)),
                Box((-fx + 0.06, 0.0, 0.0), (0.05, span * 0.4, 0.04))]
    if cls == "wedge_identity":
        bx, by, tower, arm, th = p
        return [Box((0.0, 0.0, th), (bx, by, th)),
                Box((bx - th, by - th, 2 * th + tower / 2), (th, th, tower / 2)),
                Box((-bx + arm / 2, -by + th, 2 * th + th), (arm / 2, th, th))]
    raise ValueError(f"unknown shape class {cls!r}")


def sample_shape_spec(cls: str, seed: int) -> ShapeSpec:
    rng = np.random.default_rng(seed)
    params = tuple(float(rng.uniform(lo, hi)) for lo, hi in _PARAM_RANGES[cls])
    return ShapeSpec(cls, params, int(seed))


class Shape:
    """Normalised SDF shape (bounding-box diagonal 1, centred at the origin)."""

    def __init__(self, spec: ShapeSpec):
        if len(spec.params) != len(_PARAM_RANGES[spec.cls]):
            raise ValueError(f"{spec.cls} needs {len(_PARAM_RANGES[spec.cls])} params")
        if any(not (v > 0) for v in spec.params):
            raise ValueError(f"degenerate parameters for {spec.cls}: {spec.params}")
        self.spec = spec
        raw = _raw_primitives(spec.cls, spec.params)
        lo = np.min([b.bounds()[0] for b in raw], axis=0)
        hi = np.max([b.bounds()[1] for b in raw], axis=0)
        diag = float(np.linalg.norm(hi - lo))
        if not diag > 0:
            raise ValueError("degenerate shape extent")
        self.scale = 1.0 / diag
        center = (lo + hi) / 2
        self.primitives = [b.transformed(center, self.scale) for b in raw]
        self.bounds = ((lo - center) * self.scale, (hi - center) * self.scale)

    @property
    def symmetry(self) -> SymmetryType:
        return self.spec.symmetry

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        out = self.primitives[0].sdf(p)
        for prim in self.primitives[1:]:
            out = np.minimum(out, prim.sdf(p))
        return out

    def sdf_grad(self, p: np.ndarray, h: float = 1e-6) -> np.ndarray:
        g = np.empty(p.shape)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            g[..., i] = (self.sdf(p + e) - self.sdf(p - e)) / (2 * h)
        return g

    def occupancy(self, cells: int, supersample: bool = False) -> np.ndarray:
        """(C, C, C) bool: cell centre inside (or 2^3 sub-sample majority)."""
        h = 1.0 / cells
        c = -0.5 + (np.arange(cells) + 0.5) * h
        grid = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
        if not supersample:
            return self.sdf(grid) <= 0.0
        votes = np.zeros((cells,) * 3)
        for off in np.array([[a, b, d] for a in (-1, 1) for b in (-1, 1) for d in (-1, 1)]):
            votes += self.sdf(grid + off * h / 4) <= 0.0
        return votes > 4

    def surface_points(self, n: int, rng: np.random.Generator, shell: float = 0.02,
                       tol: float = 1e-4) -> np.ndarray:
        """n points on the surface: rejection sampling in a thin shell, then
        projection along the SDF gradient."""
        lo, hi = self.bounds
        pts = []
        total = 0
        while total < 2 * n:
            cand = rng.uniform(lo - shell, hi + shell, size=(6 * n, 3))
            cand = cand[np.abs(self.sdf(cand)) < shell]
            for _ in range(4):
                d = self.sdf(cand)
                g = self.sdf_grad(cand)
                g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
                cand = cand - d[:, None] * g
            cand = cand[np.abs(self.sdf(cand)) <= tol]
            pts.append(cand)
            total += len(cand)
        pts = np.concatenate(pts)
        return pts[rng.choice(len(pts), size=n, replace=False)]


# texture ---------------------------------------------------------------------------------

_BAND = {name: 0.01 + 0.2 * i for i, name in enumerate(CLASS_NAMES)}
# odd bands run downwards so height is a continuous (zig-zag) function of red
_BAND_DIR = {name: 1.0 - 2.0 * (i % 2) for i, name in enumerate(CLASS_NAMES)}


def texture(cls: str, p: np.ndarray, mode: str = "symmetric") -> np.ndarray:
    """Flat colour at canonical points p (..., 3).

    In ``symmetric`` mode the colour depends only on quantities invariant
    under the class symmetry, and red encodes the class band plus height.
    ``identity`` mode colours by raw position (breaks the symmetry).
    """
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    red = _BAND[cls] + 0.09 + 0.18 * _BAND_DIR[cls] * z
    g = CLASSES[cls] if mode == "symmetric" else SymmetryType.IDENTITY
    if g in (SymmetryType.ROT4_Z, SymmetryType.ROT2_Z):
        n = 4 if g is SymmetryType.ROT4_Z else 2
        rho = np.hypot(x, y)
        ang = n * np.arctan2(y, x)
        green = 0.5 + 0.8 * rho * np.cos(ang)
        blue = 0.5 + 0.8 * rho * np.sin(ang)
    elif g is SymmetryType.ROTCONT_Z:
        green = 0.1 + 1.6 * np.hypot(x, y)
        blue = np.full_like(x, 0.5)
    elif g is SymmetryType.REFLECT_Y:
        green = 0.1 + 0.8 * (x + 0.5)
        blue = 0.1 + 3.2 * y * y
    else:
        green = 0.1 + 0.8 * (x + 0.5)
        blue = 0.1 + 0.8 * (y + 0.5)
    return np.clip(np.stack([red, green, blue], axis=-1), 0.0, 1.0)


# rendering ------------------------------------------------------------------------------

@dataclass
class RenderSample:
    image: np.ndarray  # (H, W, 3) float32
    mask: np.ndarray  # (H, W) bool
    gt_coords: np.ndarray  # (H, W, 3) float32, NaN off the object
    camera: Camera
    depth: np.ndarray  # (H, W) float32, inf off the object


def sphere_trace(shape: Shape, origins: np.ndarray, dirs: np.ndarray,
                 steps: int = TRACE_STEPS, eps: float = TRACE_EPS):
    """Distance along each ray to the first surface hit (inf on a miss)."""
    tn, tf = ray_box(origins, dirs)
    t = tn.copy()
    active = tn < tf
    hit = np.zeros(len(t), dtype=bool)
    for _ in range(steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d = shape.sdf(origins[idx] + t[idx, None] * dirs[idx])
        done = d < eps
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        active[idx[done]] = False
        active[idx[~done]] &= t[idx[~done]] <= tf[idx[~done]]
    return np.where(hit, t, np.inf)


def render_view(shape: Shape, camera: Camera, texture_mode: str = "symmetric") -> RenderSample:
    h, w = camera.image_size
    origins, dirs = camera.rays(h, w)
    t = sphere_trace(shape, origins, dirs)
    hit = np.isfinite(t)
    p = origins + np.where(hit, t, 0.0)[:, None] * dirs
    image = np.zeros((h * w, 3))
    image[hit] = texture(shape.spec.cls, p[hit], texture_mode)
    coords = np.full((h * w, 3), np.nan)
    coords[hit] = p[hit]
    return RenderSample(image.reshape(h, w, 3).astype(np.float32), hit.reshape(h, w),
                        coords.reshape(h, w, 3).astype(np.float32), camera,
                        t.reshape(h, w).astype(np.float32))


def sample_camera(rng: np.random.Generator, distance: float = 1.5, focal: float = 1.2,
                  image_size: tuple[int, int] = (32, 32)) -> Camera:
    az = rng.uniform(0.0, 360.0)
    el = rng.uniform(-20.0, 40.0)
    tr = rng.uniform(-0.1, 0.1, size=3)
    return Camera(float(az), float(el), tr, distance, focal, image_size)


# datasets ----------------------------------------------------------------------------------

@dataclass
class DataConfig:
    classes: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    count: int = 10  # instances per class
    seed: int = 0
    input_views: int = 4
    supervision_views: int = 5
    input_size: int = 48
    supervision_size: int = 32
    grid: int = 32
    oracle_points: int = ORACLE_POINTS
    distance: float = 1.5
    focal: float = 1.2
    texture_mode: str = "symmetric"
    supersample: bool = False
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def __post_init__(self):
        for c in self.classes:
            if c not in CLASSES:
                raise ValueError(f"unknown shape class {c!r}; valid: {', '.join(CLASS_NAMES)}")
        if self.texture_mode not in ("symmetric", "identity"):
            raise ValueError("texture_mode must be 'symmetric' or 'identity'")
        self.split_fractions = tuple(self.split_fractions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Instance:
    spec: ShapeSpec
    inputs: list[RenderSample]
    supervision: list[RenderSample]
    occupancy: np.ndarray  # (C, C, C) bool
    oracle_points: np.ndarray  # (N, 3) float32
    split: str = "train"

    @cached_property
    def oracle(self) -> ShapeOracle:
        return ShapeOracle(self.oracle_points.astype(np.float64))

    @property
    def symmetry(self) -> SymmetryType:
        return self.spec.symmetry


def instance_seed(seed: int, class_index: int, i: int) -> int:
    s = np.random.SeedSequence([seed, class_index, i]).generate_state(2, np.uint32)
    return int(s[0]) << 32 | int(s[1])


def generate_instance(cls: str, seed: int, cfg: DataConfig, split: str = "train") -> Instance:
    spec = sample_shape_spec(cls, seed)
    shape = Shape(spec)
    rng = np.random.default_rng([seed, 1])
    views = []
    for k in range(cfg.input_views + cfg.supervision_views):
        size = cfg.input_size if k < cfg.input_views else cfg.supervision_size
        cam = sample_camera(rng, cfg.distance, cfg.focal, (size, size))
        views.append(render_view(shape, cam, cfg.texture_mode))
    occ = shape.occupancy(cfg.grid, cfg.supersample)
    pts = shape.surface_points(cfg.oracle_points, np.random.default_rng([seed, 2]))
    return Instance(spec, views[:cfg.input_views], views[cfg.input_views:], occ,
                    pts.astype(np.float32), split)


def split_assignment(n: int, fractions: Sequence[float], rng: np.random.Generator) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    order = rng.permutation(n)
    out = [""] * n
    for pos, i in enumerate(order):
        out[i] = labels[pos]
    return out


def plan_dataset(cfg: DataConfig) -> list[tuple[str, int, str, str]]:
    """(class, instance seed, split, file name) for every instance."""
    plan = []
    for ci, cls in enumerate(cfg.classes):
        ci_global = CLASS_NAMES.index(cls)
        splits = split_assignment(cfg.count, cfg.split_fractions,
                                  np.random.default_rng([cfg.seed, ci_global, 99]))
        for i in range(cfg.count):
            plan.append((cls, instance_seed(cfg.seed, ci_global, i), splits[i], f"{cls}_{i:04d}.clds"))
    return plan


def _generate_planned(args) -> Instance:
    cls, seed, split, _, cfg = args
    return generate_instance(cls, seed, cfg, split)


def generate_dataset(cfg: DataConfig, threads: int = 1) -> list[Instance]:
    plan = plan_dataset(cfg)
    jobs = [(*p, cfg) for p in plan]
    if threads <= 1:
        return [_generate_planned(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(threads) as pool:
        return list(pool.map(_generate_planned, jobs))


# CLDS record files ---------------------------------------------------------------------------

CLDS_MAGIC = b"CLDS"
CLDS_VERSION = 1


class DatasetFormatError(ValueError):
    pass


def encode_instance(inst: Instance) -> bytes:
    out = [CLDS_MAGIC, struct.pack("<I", CLDS_VERSION)]
    name = inst.spec.cls.encode()
    out.append(struct.pack("<B", len(name)) + name)
    out.append(struct.pack("<QI", inst.spec.seed, len(inst.spec.params)))
    out.append(np.asarray(inst.spec.params, dtype="<f8").tobytes())
    out.append(struct.pack("<II", len(inst.inputs), len(inst.supervision)))
    for s in inst.inputs + inst.supervision:
        h, w = s.mask.shape
        out.append(struct.pack("<II", h, w))
        out.append(np.asarray(s.camera.to_array(), dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(s.mask, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(s.gt_coords, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(s.depth, dtype="<f4").tobytes())
    c = inst.occupancy.shape[0]
    out.append(struct.pack("<I", c) + np.packbits(inst.occupancy.reshape(-1)).tobytes())
    out.append(struct.pack("<I", len(inst.oracle_points)))
    out.append(np.ascontiguousarray(inst.oracle_points, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, where: str):
        self.buf, self.off, self.where = buf, 0, where

    def need(self, n: int) -> None:
        if self.off + n > len(self.buf):
            raise DatasetFormatError(
                f"{self.where}: truncated record at byte offset {self.off} "
                f"(need {n} bytes, {len(self.buf) - self.off} left)")

    def unpack(self, fmt: str):
        n = struct.calcsize(fmt)
        self.need(n)
        vals = struct.unpack_from(fmt, self.buf, self.off)
        self.off += n
        return vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        n = np.dtype(dtype).itemsize * count
        self.need(n)
        a = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.off)
        self.off += n
        return a

    def raw(self, n: int) -> bytes:
        self.need(n)
        b = self.buf[self.off:self.off + n]
        self.off += n
        return b


def decode_instance(buf: bytes, where: str = "<bytes>", split: str = "train") -> Instance:
    r = _Reader(buf, where)
    magic = r.raw(4) if len(buf) >= 4 else buf
    if magic != CLDS_MAGIC:
        raise DatasetFormatError(f"{where}: bad magic {magic!r} at byte offset 0")
    (version,) = r.unpack("<I")
    if version != CLDS_VERSION:
        raise DatasetFormatError(f"{where}: unsupported version {version} at byte offset 4")
    (n,) = r.unpack("<B")
    cls = r.raw(n).decode()
    seed, n_params = r.unpack("<QI")
    params = tuple(float(v) for v in r.array("<f8", n_params))
    k_in, k_sup = r.unpack("<II")
    samples = []
    for _ in range(k_in + k_sup):
        h, w = r.unpack("<II")
        cam = Camera.from_array(r.array("<f8", 7), (h, w))
        image = r.array("<f4", h * w * 3).reshape(h, w, 3).astype(np.float32)
        mask = r.array("<f4", h * w).reshape(h, w) > 0.5
        coords = r.array("<f4", h * w * 3).reshape(h, w, 3).astype(np.float32)
        depth = r.array("<f4", h * w).reshape(h, w).astype(np.float32)
        samples.append(RenderSample(image, mask, coords, cam, depth))
    (c,) = r.unpack("<I")
    bits = r.array("u1", (c ** 3 + 7) // 8)
    occ = np.unpackbits(bits)[:c ** 3].reshape(c, c, c).astype(bool)
    (npts,) = r.unpack("<I")
    pts = r.array("<f4", npts * 3).reshape(npts, 3).astype(np.float32)
    return Instance(ShapeSpec(cls, params, seed), samples[:k_in], samples[k_in:], occ, pts, split)


def write_dataset(path, instances: Sequence[Instance], cfg: DataConfig) -> dict:
    root = Path(path)
    (root / "instances").mkdir(parents=True, exist_ok=True)
    plan = plan_dataset(cfg)
    if len(plan) != len(instances):
        raise ValueError("instance list does not match the dataset plan")
    entries = []
    for (cls, seed, split, fname), inst in zip(plan, instances):
        (root / "instances" / fname).write_bytes(encode_instance(inst))
        entries.append({"file": f"instances/{fname}", "class": cls, "seed": seed, "split": split})
    counts = {c: sum(e["class"] == c for e in entries) for c in cfg.classes}
    manifest = {
        "format": "CLDS",
        "version": CLDS_VERSION,
        "classes": list(cfg.classes),
        "counts": counts,
        "total": len(entries),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "instances": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(path) -> dict:
    p = Path(path) / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"no dataset manifest at {p}")
    return json.loads(p.read_text())


def read_dataset(path, splits: Sequence[str] | None = None,
                 classes: Sequence[str] | None = None) -> tuple[list[Instance], dict]:
    root = Path(path)
    manifest = read_manifest(root)
    out = []
    for e in manifest["instances"]:
        if splits is not None and e["split"] not in splits:
            continue
        if classes is not None and e["class"] not in classes:
            continue
        f = root / e["file"]
        out.append(decode_instance(f.read_bytes(), str(f), e["split"]))
    return out, manifest
