"""Small parametric maps, the adaptive-moment optimizer and checkpoint files."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .tape import Buffer, ParamStore, ShapeError, Tape

_ACTIVATIONS = {"relu": ops.relu, "tanh": ops.tanh, "none": None}


class ParametricMap:
    """A stack of dense layers applied row-wise to an (N, input_dim) buffer."""

    def __init__(self, store: ParamStore, name: str, dims: Sequence[int],
                 activations: Sequence[str], rng: np.random.Generator | None = None,
                 zero: bool = False):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if len(activations) != len(dims) - 1:
            raise ValueError(f"{name}: {len(dims) - 1} layers but {len(activations)} activations")
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown nonlinearity {a!r}")
        self.name = name
        self.dims = list(dims)
        self.activations = list(activations)
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                lim = math.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            store.add(self.weight_name(i), w)
            store.add(self.bias_name(i), np.zeros(fan_out))

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def weight_name(self, i: int) -> str:
        return f"{self.name}.{i}.weight"

    def bias_name(self, i: int) -> str:
        return f"{self.name}.{i}.bias"

    def param_names(self) -> list[str]:
        return [n for i in range(self.num_layers) for n in (self.weight_name(i), self.bias_name(i))]

    def apply(self, tape: Tape, x: Buffer) -> Buffer:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"{self.name}: expected (N, {self.input_dim}) input, got {x.shape}")
        h = x
        for i, act in enumerate(self.activations):
            h = ops.dense(h, tape.param(self.weight_name(i)), tape.param(self.bias_name(i)))
            if _ACTIVATIONS[act] is not None:
                h = _ACTIVATIONS[act](h)
        return h


# optimizer -------------------------------------------------------------------

@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class StepReport:
    updated: int = 0
    skipped: list[str] = field(default_factory=list)


class Adam:
    def __init__(self, store: ParamStore, config: AdamConfig | None = None):
        self.store = store
        self.config = config or AdamConfig()
        self.m = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.t = {k: 0 for k in store.values}

    def step(self, lr: float | None = None) -> StepReport:
        c = self.config
        lr = c.lr if lr is None else lr
        report = StepReport()
        for name, p in self.store.values.items():
            g = self.store.grads[name]
            if not np.all(np.isfinite(g)):
                report.skipped.append(name)
                continue
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            mhat = self.m[name] / (1 - c.beta1 ** t)
            vhat = self.v[name] / (1 - c.beta2 ** t)
            p -= (lr * mhat / (np.sqrt(vhat) + c.eps)).astype(p.dtype)
            report.updated += 1
        return report


def optimizer_step(store: ParamStore, optimizer: Adam, lr: float | None = None) -> StepReport:
    return optimizer.step(lr)


# checkpoint files --------------------------------------------------------------

CLPM_MAGIC = b"CLPM"
CLPM_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    chunks = [CLPM_MAGIC, struct.pack("<II", CLPM_VERSION, len(params))]
    for name, v in params.items():
        raw = name.encode("utf-8")
        v = np.asarray(v)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape))
        chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CLPM_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte offset 0")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte offset {off}")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    version, count = take("<II")
    if version != CLPM_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte offset 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<H")
        if off + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte offset {off}")
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = take("<B")
        dims = take(f"<{rank}I")
        size = int(np.prod(dims)) * 4
        if off + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte offset {off}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=off).reshape(dims).astype(np.float32)
        off += size
    return out
