"""Global symmetry types and the closure sets they induce.

All transforms act about the origin of the canonical cube: rotations are
about the z-axis and the reflection negates y (mirror across the xz-plane).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEDUP_TOL = 1e-9


class SymmetryType(enum.Enum):
    IDENTITY = "identity"
    REFLECT_Y = "reflect_y"
    ROT2_Z = "rot2_z"
    ROT4_Z = "rot4_z"
    ROTCONT_Z = "rotcont_z"

    @classmethod
    def parse(cls, name: str | SymmetryType) -> SymmetryType:
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            valid = ", ".join(t.value for t in cls)
            raise ValueError(f"unknown symmetry type {name!r}; valid: {valid}") from None

    @property
    def is_finite(self) -> bool:
        return self is not SymmetryType.ROTCONT_Z


ALL_TYPES: tuple[SymmetryType, ...] = tuple(SymmetryType)

# Orbit generators as exact integer matrices so 90 degree rotations stay exact.
_MEMBER_MATRICES: dict[SymmetryType, np.ndarray] = {
    SymmetryType.IDENTITY: np.array([np.eye(3)]),
    SymmetryType.REFLECT_Y: np.array([np.eye(3), np.diag([1.0, -1.0, 1.0])]),
    SymmetryType.ROT2_Z: np.array([np.eye(3), np.diag([-1.0, -1.0, 1.0])]),
    SymmetryType.ROT4_Z: np.array(
        [
            np.eye(3),
            [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            np.diag([-1.0, -1.0, 1.0]),
            [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        ]
    ),
}


def member_matrices(g: SymmetryType) -> np.ndarray:
    """(n, 3, 3) linear maps whose images of x form the finite orbit of x."""
    if not g.is_finite:
        raise ValueError("continuous rotation has no finite member list")
    return _MEMBER_MATRICES[g]


def orbit_size(g: SymmetryType) -> int | None:
    return None if not g.is_finite else len(_MEMBER_MATRICES[g])


@dataclass(frozen=True)
class FiniteClosure:
    points: np.ndarray  # (n, 3)


@dataclass(frozen=True)
class CircleClosure:
    radius: float
    height: float


ClosureSet = FiniteClosure | CircleClosure


@dataclass(frozen=True)
class SymmetryConfig:
    active_set: tuple[SymmetryType, ...] = ALL_TYPES
    sample_count: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        types = tuple(SymmetryType.parse(t) for t in self.active_set)
        if not types:
            raise ValueError("active_set must be non-empty")
        if len(set(types)) != len(types):
            raise ValueError("active_set has duplicates")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        object.__setattr__(self, "active_set", types)

    @classmethod
    def from_names(cls, names: Sequence[str], **kw) -> SymmetryConfig:
        return cls(tuple(SymmetryType.parse(n) for n in names), **kw)

    @property
    def names(self) -> list[str]:
        return [t.value for t in self.active_set]


def duplicate_mask(points: np.ndarray, tol: float = DEDUP_TOL) -> np.ndarray:
    """Mark members equal (within tol) to an earlier member along axis -2.

    ``points`` has shape (..., n, 3); returns a boolean (..., n) array.
    """
    n = points.shape[-2]
    dup = np.zeros(points.shape[:-1], dtype=bool)
    for j in range(1, n):
        for i in range(j):
            close = np.all(np.abs(points[..., j, :] - points[..., i, :]) <= tol, axis=-1)
            dup[..., j] |= close
    return dup


def closure(g: SymmetryType, x) -> ClosureSet:
    x = np.asarray(x, dtype=np.float64)
    if g is SymmetryType.ROTCONT_Z:
        return CircleClosure(float(np.hypot(x[0], x[1])), float(x[2]))
    pts = member_matrices(g) @ x
    return FiniteClosure(pts[~duplicate_mask(pts)])


def closure_samples(cs: ClosureSet, m: int, rng: np.random.Generator) -> np.ndarray:
    if m < 1:
        raise ValueError("m must be >= 1")
    if isinstance(cs, FiniteClosure):
        return cs.points.copy()
    phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
    return np.stack(
        [cs.radius * np.cos(phi), cs.radius * np.sin(phi), np.full(m, cs.height)], axis=1
    )


def closest_on_closure(g: SymmetryType, seed, target) -> tuple[np.ndarray, float]:
    seed = np.asarray(seed, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    cs = closure(g, seed)
    if isinstance(cs, FiniteClosure):
        d = np.linalg.norm(cs.points - target, axis=1)
        i = int(np.argmin(d))  # first minimum wins ties
        return cs.points[i], float(d[i])
    rho_t = np.hypot(target[0], target[1])
    if rho_t > 0.0:
        cphi, sphi = target[0] / rho_t, target[1] / rho_t
    else:
        cphi, sphi = 1.0, 0.0
    point = np.array([cs.radius * cphi, cs.radius * sphi, cs.height])
    dist = float(np.hypot(rho_t - cs.radius, target[2] - cs.height))
    return point, dist


def closure_members(g: SymmetryType, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched finite orbit: x (N, 3) -> members (N, n, 3) and duplicate mask (N, n)."""
    mats = member_matrices(g)
    members = np.einsum("nij,pj->pni", mats, x)
    return members, duplicate_mask(members)


def circle_points(x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Points of the z-rotation orbit of each row of x at angles phi (N, m)."""
    r = np.hypot(x[:, 0], x[:, 1])[:, None]
    return np.stack([r * np.cos(phi), r * np.sin(phi), np.broadcast_to(x[:, 2:3], phi.shape)], axis=-1)


def apply_type_transform(g: SymmetryType, x: np.ndarray, index: int = 1) -> np.ndarray:
    """Apply the ``index``-th orbit generator of a finite type to points (..., 3)."""
    return x @ member_matrices(g)[index].T
