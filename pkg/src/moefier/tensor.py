"""Dense 2-D tensors with a small reverse-mode tape.

Only the primitives needed by a SwiGLU mixture-of-experts block and its
distillation loss are provided. Every op takes and returns ``Tensor2``
values; when a ``GradTape`` is active and an input is tracked, the op is
recorded together with a closure computing its vector-Jacobian product.

Example::

    w = Tensor2(np.ones((3, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = mse(matmul(x, w), target)
    grads = backward(tape, loss)
    grads[w]  # ndarray, same shape as w
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """A tensor op produced NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor2:
    """Immutable row-major 2-D array of floats.

    Inputs are stored as ``float32`` unless ``dtype`` asks otherwise;
    ``float64`` exists so finite-difference gradient checks have enough
    resolution. Ops keep the precision of their inputs.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        arr = np.array(arr, dtype=dtype or DEFAULT_DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Tensor2 needs at most 2 dims, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, name: str | None = None) -> "Tensor2":
        # Internal constructor for op outputs: skips the defensive copy.
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"op {name} produced non-finite values")
        t = object.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = name
        return t

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor2{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    output: Tensor2
    inputs: tuple[Tensor2, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


@dataclass
class GradTape:
    """Ordered record of primitive ops executed while the tape is active.

    Nodes are appended in execution order, which is a topological order of
    the computation graph; ``backward`` walks them in reverse.
    """

    nodes: list[_Node] = field(default_factory=list)
    watched: dict[int, Tensor2] = field(default_factory=dict)
    _tracked: set[int] = field(default_factory=set)

    def watch(self, *tensors: Tensor2) -> None:
        for t in tensors:
            self.watched[id(t)] = t
            self._tracked.add(id(t))

    def is_tracked(self, t: Tensor2) -> bool:
        return id(t) in self._tracked or t.requires_grad

    def record(self, output: Tensor2, inputs: tuple[Tensor2, ...], vjp, op: str) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self.watched:
                self.watch(t)
        self.nodes.append(_Node(output, inputs, vjp, op))
        self._tracked.add(id(output))

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


_local = threading.local()


def _tape_stack() -> list[GradTape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(arr: np.ndarray, inputs: tuple[Tensor2, ...], vjp, op: str) -> Tensor2:
    out = Tensor2._wrap(arr, op)
    tape = _active_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(out, inputs, vjp, op)
    return out


def _check_same_shape(a: Tensor2, b: Tensor2, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- differentiable ops -----------------------------------------------------


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    _check_same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor2, b: Tensor2) -> Tensor2:
    _check_same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    """Elementwise product; ``b`` may also be a single column broadcast across ``a``."""
    A, B = a.data, b.data
    if a.shape == b.shape:
        return _emit(A * B, (a, b), lambda g: (g * B, g * A), "mul")
    if b.cols == 1 and b.rows == a.rows:
        return _emit(A * B, (a, b), lambda g: (g * B, (g * A).sum(axis=1, keepdims=True)), "mul_col")
    raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def scale(a: Tensor2, c: float) -> Tensor2:
    c = float(c)
    return _emit(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def swish(x: Tensor2) -> Tensor2:
    """SiLU: ``x * sigmoid(x)``."""
    X = x.data
    sig = _sigmoid(X)
    out = X * sig

    def vjp(g):
        return (g * (sig + X * sig * (1 - sig)),)

    return _emit(out, (x,), vjp, "swish")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x: Tensor2) -> Tensor2:
    X = x.data
    e = np.exp(X - X.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (x,), vjp, "softmax_rows")


def normalize_rows(x: Tensor2) -> Tensor2:
    """Divide each row by its sum. Rows must have a non-zero sum."""
    X = x.data
    tot = X.sum(axis=1, keepdims=True)
    if np.any(tot == 0):
        raise ZeroDivisionError("normalize_rows: row with zero sum")
    out = X / tot

    def vjp(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / tot,)

    return _emit(out, (x,), vjp, "normalize_rows")


def take_rows(x: Tensor2, idx) -> Tensor2:
    idx = np.asarray(idx, dtype=np.intp)
    n = x.rows

    def vjp(g):
        full = np.zeros((n, g.shape[1]), dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(x.data[idx], (x,), vjp, "take_rows")


def take_elements(x: Tensor2, rows, cols) -> Tensor2:
    """Pick ``x[rows[j], cols[j]]`` into a single column."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.broadcast_to(np.asarray(cols, dtype=np.intp), rows.shape)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (rows, cols), g[:, 0])
        return (full,)

    return _emit(x.data[rows, cols].reshape(-1, 1), (x,), vjp, "take_elements")


def scatter_rows(x: Tensor2, idx, n_rows: int) -> Tensor2:
    """Place row ``j`` of ``x`` at row ``idx[j]`` of an ``n_rows`` zero matrix (summing repeats)."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(idx) != x.rows:
        raise ValueError(f"scatter_rows: {len(idx)} indices for {x.rows} rows")
    out = np.zeros((n_rows, x.cols), dtype=x.dtype)
    np.add.at(out, idx, x.data)
    return _emit(out, (x,), lambda g: (g[idx],), "scatter_rows")


def mean_rows(x: Tensor2) -> Tensor2:
    """Column means, shape ``(1, cols)``."""
    n = x.rows
    if n == 0:
        raise ValueError("mean_rows: empty tensor")
    return _emit(x.data.mean(axis=0, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean_rows")


def sum_all(x: Tensor2) -> Tensor2:
    return _emit(x.data.sum().reshape(1, 1), (x,),
                 lambda g: (np.full(x.shape, g[0, 0], dtype=x.dtype),), "sum_all")


def mse(a: Tensor2, b: Tensor2) -> Tensor2:
    """Mean over all elements of ``(a - b)**2`` as a 1x1 tensor."""
    _check_same_shape(a, b, "mse")
    if a.data.size == 0:
        raise ValueError("mse: empty tensors")
    diff = a.data - b.data
    n = diff.size
    val = np.asarray((diff * diff).sum() / n, dtype=a.dtype).reshape(1, 1)

    def vjp(g):
        d = g[0, 0] * 2.0 / n * diff
        return (d, -d)

    return _emit(val, (a, b), vjp, "mse")


# --- non-differentiable helpers ----------------------------------------------


def rank_rows(x: Tensor2 | np.ndarray) -> np.ndarray:
    """Per-row column indices ordered by descending value, ties by lowest index."""
    arr = x.data if isinstance(x, Tensor2) else np.asarray(x)
    return np.argsort(-arr, axis=1, kind="stable")


def topk_rows(x: Tensor2, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest entries of each row.

    Indices are in descending value order; equal values keep the lower
    column index first.
    """
    if not 1 <= k <= x.cols:
        raise ValueError(f"topk_rows: k={k} out of range for {x.cols} columns")
    idx = rank_rows(x)[:, :k]
    return idx, np.take_along_axis(x.data, idx, axis=1)


def backward(tape: GradTape, loss: Tensor2, params: Sequence[Tensor2] = ()) -> dict[Tensor2, np.ndarray]:
    """Reverse-mode sweep over ``tape`` seeded at the scalar ``loss``.

    Returns a gradient for every trainable tensor the tape saw (plus any in
    ``params``). Tensors that are neither watched nor ``requires_grad`` get
    no entry.
    """
    wanted = dict(tape.watched)
    for p in params:
        wanted[id(p)] = p
    if not tape.nodes:
        return {p: np.zeros(p.shape, dtype=p.dtype) for p in wanted.values()}
    if loss.shape != (1, 1):
        raise TapeError(f"loss must be 1x1, got {loss.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise TapeError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not tape.is_tracked(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for key, p in wanted.items():
        g = grads.get(key)
        out[p] = np.zeros(p.shape, dtype=p.dtype) if g is None else np.asarray(g, dtype=p.dtype)
    return out
