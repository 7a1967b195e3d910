"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

The engine is deliberately small: a `Tensor` wraps a row-major float64
numpy array, and every primitive op, when a `GradientTape` is active in
the current thread, appends one backward closure to the tape. Closures
are appended in execution order, which is already a topological order,
so the backward pass is a single reverse sweep with no graph traversal.

Forward-only code (decoding) simply runs with no tape active and pays
no bookkeeping cost. Broadcasting is restricted to scalar-with-tensor;
everything else must match shapes exactly, which keeps the gating math
in the fusion head honest.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "GradientTape",
    "active_tape",
    "record_op",
    "backward",
    "matmul",
    "affine",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "concat",
    "concat_rows",
    "slice_last",
    "take_rows",
    "take_at",
    "repeat_rows",
    "tile_rows",
    "reshape",
    "tsum",
    "grad_check",
]

_LOCAL = threading.local()


def active_tape() -> "GradientTape | None":
    """The tape recording in this thread, or None (forward-only mode)."""
    return getattr(_LOCAL, "tape", None)


class GradientTape:
    """Append-only record of primitive ops for one training context.

    One tape may be active per thread. Ops executed while it is active
    register a backward closure; `backward(root)` replays the closures
    in reverse, visiting each node exactly once. Gradients accumulate
    additively into `Tensor.grad` until explicitly cleared.
    """

    def __init__(self) -> None:
        self._nodes: list[Callable[[], None]] = []

    def __enter__(self) -> "GradientTape":
        if active_tape() is not None:
            raise RuntimeError("a GradientTape is already active in this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _LOCAL.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._nodes.append(backward_fn)

    def backward(self, root: "Tensor") -> None:
        """Accumulate d(root)/d(leaf) into every participating tensor's grad."""
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        root._ensure_grad()
        root.grad += 1.0
        for node in reversed(self._nodes):
            node()


def backward(root: "Tensor", tape: GradientTape) -> None:
    tape.backward(root)


class Tensor:
    """Row-major float64 array; immutable after construction except `grad`."""

    __slots__ = ("data", "grad")

    def __init__(self, data, copy: bool = True) -> None:
        if copy:
            arr = np.array(data, dtype=np.float64, order="C")
        else:
            arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def clear_grad(self) -> None:
        self.grad = None

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    # Arithmetic sugar; canonical forms are the module functions below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)


def _out(data: np.ndarray, backward_builder) -> Tensor:
    """Wrap `data`; if a tape is active, record the closure built for `out`."""
    out = Tensor(data, copy=False)
    tape = active_tape()
    if tape is not None:
        tape.record(backward_builder(out))
    return out


def record_op(data: np.ndarray, backward_fn: Callable[[Tensor], Callable[[], None]]) -> Tensor:
    """Register a custom differentiable primitive (used by the lattice loss)."""
    return _out(np.asarray(data, dtype=np.float64), backward_fn)


def _as_operands(a, b, op_name: str):
    """Lift python scalars; enforce exact-shape or scalar-with-tensor only."""
    at = a if isinstance(a, Tensor) else None
    bt = b if isinstance(b, Tensor) else None
    av = a.data if at is not None else np.float64(a)
    bv = b.data if bt is not None else np.float64(b)
    a_scalar = np.ndim(av) == 0 or av.size == 1
    b_scalar = np.ndim(bv) == 0 or bv.size == 1
    if not a_scalar and not b_scalar and av.shape != bv.shape:
        raise ShapeError(f"{op_name}: shapes {av.shape} and {bv.shape} do not match")
    return at, bt, av, bv


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a gradient onto a scalar-shaped operand."""
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def add(a, b) -> Tensor:
    at, bt, av, bv = _as_operands(a, b, "add")
    data = av + bv

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            if at is not None:
                at._ensure_grad()
                at.grad += _reduce_to(out.grad, at.data.shape)
            if bt is not None:
                bt._ensure_grad()
                bt.grad += _reduce_to(out.grad, bt.data.shape)

        return bwd

    return _out(data, build)


def sub(a, b) -> Tensor:
    at, bt, av, bv = _as_operands(a, b, "sub")
    data = av - bv

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            if at is not None:
                at._ensure_grad()
                at.grad += _reduce_to(out.grad, at.data.shape)
            if bt is not None:
                bt._ensure_grad()
                bt.grad -= _reduce_to(out.grad, bt.data.shape)

        return bwd

    return _out(data, build)


def mul(a, b) -> Tensor:
    at, bt, av, bv = _as_operands(a, b, "mul")
    data = av * bv

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            if at is not None:
                at._ensure_grad()
                at.grad += _reduce_to(out.grad * bv, at.data.shape)
            if bt is not None:
                bt._ensure_grad()
                bt.grad += _reduce_to(out.grad * av, bt.data.shape)

        return bwd

    return _out(data, build)


def neg(a: Tensor) -> Tensor:
    data = -a.data

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            a._ensure_grad()
            a.grad -= out.grad

        return bwd

    return _out(data, build)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product a[m×k] @ b[k×n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} do not match")
    data = a.data @ b.data

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            a._ensure_grad()
            a.grad += out.grad @ b.data.T
            b._ensure_grad()
            b.grad += a.data.T @ out.grad

        return bwd

    return _out(data, build)


def affine(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """x @ w.T (+ b), with w stored [out×in]; x may be [in] or [n×in]."""
    if w.ndim != 2:
        raise ShapeError(f"affine weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"affine: input dim {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"affine: bias {b.shape} does not match weight {w.shape}")
    if x.ndim == 1:
        data = w.data @ x.data
    elif x.ndim == 2:
        data = x.data @ w.data.T
    else:
        raise ShapeError(f"affine input must be 1-D or 2-D, got {x.shape}")
    if b is not None:
        data = data + b.data

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            g = out.grad
            x._ensure_grad()
            w._ensure_grad()
            if x.ndim == 1:
                x.grad += w.data.T @ g
                w.grad += np.outer(g, x.data)
            else:
                x.grad += g @ w.data
                w.grad += g.T @ x.data
            if b is not None:
                b._ensure_grad()
                b.grad += g if g.ndim == 1 else g.sum(axis=0)

        return bwd

    return _out(data, build)


def _unary(a: Tensor, data: np.ndarray, local_grad) -> Tensor:
    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            a._ensure_grad()
            a.grad += local_grad(out) * out.grad

        return bwd

    return _out(data, build)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, y, lambda out: out.data * (1.0 - out.data))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _unary(a, y, lambda out: 1.0 - out.data * out.data)


def exp(a: Tensor) -> Tensor:
    return _unary(a, np.exp(a.data), lambda out: out.data)


def log(a: Tensor) -> Tensor:
    return _unary(a, np.log(a.data), lambda out: 1.0 / a.data)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; output sums to 1 along that axis."""
    if x.data.shape == () or x.data.shape[axis] == 0:
        raise ShapeError(f"softmax needs a nonempty axis, got shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            x._ensure_grad()
            g = out.grad
            dot = np.sum(g * out.data, axis=axis, keepdims=True)
            x.grad += out.data * (g - dot)

        return bwd

    return _out(s, build)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape == () or x.data.shape[axis] == 0:
        raise ShapeError(f"log_softmax needs a nonempty axis, got shape {x.shape}")
    data = np_log_softmax(x.data, axis=axis)

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            x._ensure_grad()
            g = out.grad
            x.grad += g - np.exp(out.data) * np.sum(g, axis=axis, keepdims=True)

        return bwd

    return _out(data, build)


def np_log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-numpy log-softmax shared by forward-only code paths."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along the last axis (the only axis the fusion math needs)."""
    if axis not in (-1, parts[0].ndim - 1):
        raise ShapeError("concat only supports the last axis")
    datas = [p.data for p in parts]
    lead = {d.shape[:-1] for d in datas}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading dims differ: {[d.shape for d in datas]}")
    data = np.concatenate(datas, axis=-1)
    widths = [d.shape[-1] for d in datas]

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            start = 0
            for p, w in zip(parts, widths):
                p._ensure_grad()
                p.grad += out.grad[..., start : start + w]
                start += w

        return bwd

    return _out(data, build)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D blocks along axis 0 (sequence assembly plumbing)."""
    datas = [p.data for p in parts]
    if any(d.ndim != 2 for d in datas):
        raise ShapeError("concat_rows expects 2-D parts")
    data = np.concatenate(datas, axis=0)
    heights = [d.shape[0] for d in datas]

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            start = 0
            for p, h in zip(parts, heights):
                p._ensure_grad()
                p.grad += out.grad[start : start + h]
                start += h

        return bwd

    return _out(data, build)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[..., start:stop].copy()

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            x._ensure_grad()
            x.grad[..., start:stop] += out.grad

        return bwd

    return _out(data, build)


def take_rows(table: Tensor, indices) -> Tensor:
    """Row gather; gradient scatter-adds into the gathered rows."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D table, got {table.shape}")
    data = table.data[idx]

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            table._ensure_grad()
            np.add.at(table.grad, idx, out.grad)

        return bwd

    return _out(data, build)


def take_at(x: Tensor, rows, cols) -> Tensor:
    """Elementwise gather x[rows[i], cols[i]] -> 1-D tensor."""
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    data = x.data[r, c]

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            x._ensure_grad()
            np.add.at(x.grad, (r, c), out.grad)

        return bwd

    return _out(data, build)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Each row repeated k times consecutively: [n×d] -> [n·k×d]."""
    n, d = x.shape
    data = np.repeat(x.data, k, axis=0)

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            x._ensure_grad()
            x.grad += out.grad.reshape(n, k, d).sum(axis=1)

        return bwd

    return _out(data, build)


def tile_rows(x: Tensor, k: int) -> Tensor:
    """Whole block tiled k times: [n×d] -> [k·n×d]."""
    n, d = x.shape
    data = np.tile(x.data, (k, 1))

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            x._ensure_grad()
            x.grad += out.grad.reshape(k, n, d).sum(axis=0)

        return bwd

    return _out(data, build)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            x._ensure_grad()
            x.grad += out.grad.reshape(x.data.shape)

        return bwd

    return _out(data, build)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    data = np.asarray(np.sum(x.data))

    def build(out: Tensor):
        def bwd():
            if out.grad is None:
                return
            x._ensure_grad()
            x.grad += out.grad

        return bwd

    return _out(data, build)


def grad_check(f, params: Iterable[Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must be a deterministic nullary function returning a scalar Tensor
    built from `params`. Analytic gradients come from one taped run; the
    numeric side re-evaluates `f` tape-free with each parameter entry
    perturbed by ±epsilon.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    for p in params:
        p.clear_grad()
    with GradientTape() as tape:
        out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: f returned a non-finite value")
    tape.backward(out)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    for p in params:
        p.clear_grad()

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(f().data)
            flat[i] = orig - epsilon
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("grad_check: perturbed f is non-finite")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst
