"""Reverse-mode differentiation tape over numpy buffers.

Nodes are appended in execution order, which is already a topological order,
so ``backward`` simply walks the node list in reverse once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Buffer:
    """A value living on a tape. ``grad`` is only kept for leaves."""

    __slots__ = ("data", "tape", "requires_grad", "grad", "kind", "name")

    def __init__(self, data: np.ndarray, tape: Tape, requires_grad: bool = False,
                 kind: str = "value", name: str | None = None):
        self.data = data
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.kind = kind
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Buffer(shape={self.shape}, kind={self.kind}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    out: Buffer
    inputs: tuple[Buffer, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ParamStore:
    """Named parameters and their accumulated gradients.

    Lives across tapes: every training step builds a fresh tape that reads
    parameters from (and writes gradients into) the same store.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already registered")
        self.values[name] = np.array(value, dtype=self.dtype)
        self.grads[name] = np.zeros_like(self.values[name])

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.values.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self.values) - set(values)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k in self.values:
            v = values[k]
            if v.shape != self.values[k].shape:
                raise ShapeError(f"parameter {k}: shape {v.shape} != {self.values[k].shape}")
            self.values[k] = np.array(v, dtype=self.dtype)

    def astype(self, dtype) -> ParamStore:
        out = ParamStore(dtype)
        for k, v in self.values.items():
            out.add(k, v)
        return out


class Tape:
    def __init__(self, dtype=np.float32, params: ParamStore | None = None, grad: bool = True):
        self.dtype = np.dtype(dtype)
        self.params = params
        self.grad_enabled = grad
        self.nodes: list[Node] = []
        self._param_leaves: dict[str, Buffer] = {}
        self.stop_gradient_count = 0

    # leaves -----------------------------------------------------------------
    def constant(self, data) -> Buffer:
        return Buffer(np.asarray(data, dtype=self.dtype), self, False, "constant")

    def input(self, data, name: str | None = None) -> Buffer:
        """A leaf whose gradient is kept on the buffer after ``backward``."""
        buf = Buffer(np.array(data, dtype=self.dtype), self, True, "input", name)
        buf.grad = np.zeros_like(buf.data)
        return buf

    def param(self, name: str) -> Buffer:
        if name in self._param_leaves:
            return self._param_leaves[name]
        if self.params is None or name not in self.params:
            raise KeyError(f"unknown parameter {name!r}")
        buf = Buffer(self.params[name].astype(self.dtype, copy=True), self, self.grad_enabled,
                     "param", name)
        self._param_leaves[name] = buf
        return buf

    def lift(self, x) -> Buffer:
        if isinstance(x, Buffer):
            if x.tape is not self:
                raise ValueError("buffer belongs to a different tape")
            return x
        return self.constant(x)

    # recording --------------------------------------------------------------
    def record(self, op: str, data: np.ndarray, inputs: Sequence[Buffer],
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Buffer:
        data = np.asarray(data, dtype=self.dtype)
        needs = any(b.requires_grad for b in inputs)
        out = Buffer(data, self, needs, "value")
        if needs:
            self.nodes.append(Node(op, out, tuple(inputs), backward))
        return out

    def backward(self, loss: Buffer) -> None:
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(
                        f"adjoint of {node.op} produced shape {gi.shape} for input {inp.shape}")
                if inp.kind in ("param", "input"):
                    self._accumulate_leaf(inp, gi)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + gi
                else:
                    grads[id(inp)] = gi
        if loss.kind in ("param", "input"):
            self._accumulate_leaf(loss, np.ones_like(loss.data))

    def _accumulate_leaf(self, leaf: Buffer, g: np.ndarray) -> None:
        if leaf.kind == "input":
            leaf.grad += g
        else:
            store_grad = self.params.grads[leaf.name]
            store_grad += g.astype(store_grad.dtype)
            leaf.grad = store_grad

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for n in self.nodes:
            counts[n.op] = counts.get(n.op, 0) + 1
        return counts
