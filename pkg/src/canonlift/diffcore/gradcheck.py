"""Central finite-difference verification of tape adjoints (always at f64)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tape import Buffer, ParamStore, Tape

Program = Callable[..., Buffer]


@dataclass
class GradCheckReport:
    status: str  # "pass", "fail" or "expected_mismatch"
    max_rel_error: float
    failing: list[tuple[str, int]] = field(default_factory=list)
    checked: int = 0
    kink_retries: int = 0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("pass", "expected_mismatch")


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / den


def _evaluate(f: Program, xs: Sequence[np.ndarray], params: ParamStore | None):
    tape = Tape(np.float64, params)
    bufs = [tape.input(x) for x in xs]
    out = f(tape, *bufs)
    return tape, bufs, out


def _scalar(f, xs, params) -> float:
    tape = Tape(np.float64, params)
    out = f(tape, *[tape.constant(x) for x in xs])
    return float(out.data.reshape(-1)[0])


def _check_once(f, xs, params, h, tol, skip=frozenset()):
    if params is not None:
        params.zero_grad()
    tape, bufs, out = _evaluate(f, xs, params)
    if out.data.size != 1:
        raise ValueError(f"program must return a scalar, got shape {out.shape}")
    tape.backward(out)
    f0 = float(out.data.reshape(-1)[0])
    stopped = tape.stop_gradient_count > 0

    targets: list[tuple[str, np.ndarray, np.ndarray]] = []
    for i, (x, b) in enumerate(zip(xs, bufs)):
        targets.append((f"input{i}", x, b.grad))
    if params is not None:
        for name in params.names():
            if name in skip:
                continue
            targets.append((name, params.values[name], params.grads[name].copy()))

    failing, kinked = [], False
    max_err, checked, finite = 0.0, 0, np.isfinite(f0)
    for label, arr, analytic in targets:
        flat = arr.reshape(-1)
        ana = analytic.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = _scalar(f, xs, params)
            flat[j] = orig - h
            fm = _scalar(f, xs, params)
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            checked += 1
            if not (np.isfinite(num) and np.isfinite(ana[j])):
                finite = False
                failing.append((label, j))
                continue
            err = float(relative_error(ana[j], num))
            max_err = max(max_err, err)
            if err > tol:
                failing.append((label, j))
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1e-3):
                    kinked = True
    return failing, max_err, checked, kinked, stopped, finite


def grad_check(f: Program, inputs: Sequence[np.ndarray], h: float = 1e-5, tol: float = 1e-4,
               params: ParamStore | None = None, max_retries: int = 3,
               rng: np.random.Generator | None = None, perturb: float = 1e-3,
               skip_params: Sequence[str] = ()) -> GradCheckReport:
    """Compare analytic gradients of a scalar tape program with central differences.

    ``f(tape, *buffers)`` builds the program. When a mismatch coincides with a
    nondifferentiable point (one-sided slopes disagree), inputs are nudged by
    ``perturb`` and the check is retried. Parameters named in ``skip_params``
    are left out of the comparison.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    if params is not None and params.dtype != np.float64:
        params = params.astype(np.float64)
    skip = frozenset(skip_params)
    retries = 0
    while True:
        try:
            with np.errstate(all="ignore"):
                failing, max_err, checked, kinked, stopped, finite = _check_once(
                    f, xs, params, h, tol, skip)
        except FloatingPointError as exc:
            return GradCheckReport("fail", float("inf"), message=f"floating point error: {exc}")
        if not failing:
            return GradCheckReport("pass", max_err, [], checked, retries)
        if kinked and finite and retries < max_retries:
            retries += 1
            xs = [x + perturb * rng.standard_normal(x.shape) for x in xs]
            continue
        break
    if not finite:
        return GradCheckReport("fail", float("inf"), failing, checked, retries, "non-finite values")
    if stopped:
        return GradCheckReport("expected_mismatch", max_err, failing, checked, retries,
                               "mismatch expected: program contains stop_gradient")
    msg = "kink persisted after retries" if kinked else ""
    return GradCheckReport("fail", max_err, failing, checked, retries, msg)
