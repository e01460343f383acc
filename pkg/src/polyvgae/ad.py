"""Define-by-run reverse-mode automatic differentiation over dense matrices.

Every value on a :class:`Tape` is a 2-D numpy array.  Ops append nodes to the
tape in creation order, which is already a topological order, so
:meth:`Tape.backward` is a single reverse sweep.  The tape is rebuilt for every
training step.

Also hosts the Adam optimizer, a finite-difference gradient checker and the
binary parameter checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "matmul",
    "spmm",
    "add",
    "add_row",
    "add_scalar",
    "mul",
    "mul_row",
    "relu",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "clip",
    "concat_cols",
    "gather_rows",
    "sum_all",
    "mean",
    "row_sum",
    "square",
    "scale",
    "transpose",
    "AdamState",
    "adam_step",
    "GradCheckReport",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """A node on a tape: value, accumulated gradient and how to backprop."""

    __slots__ = ("tape", "value", "grad", "parents", "backward_fn", "op", "name", "requires_grad")

    def __init__(self, tape, value, parents=(), backward_fn=None, op="leaf", name=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor<{self.op}{label} {self.shape[0]}x{self.shape[1]}>"


class Tape:
    """Records ops in execution order and runs the reverse sweep.

    ``dtype`` applies to every leaf and constant; float64 is the default
    because gradient checks need the headroom.
    """

    def __init__(self, dtype=np.float64, check_finite=True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Tensor] = []

    def _as_matrix(self, value):
        arr = np.array(value, dtype=self.dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are matrices; got {arr.ndim} dimensions")
        return arr

    def leaf(self, value, name=None, requires_grad=True) -> Tensor:
        t = Tensor(self, self._as_matrix(value), op="leaf", name=name, requires_grad=requires_grad)
        if self.check_finite and not np.all(np.isfinite(t.value)):
            raise NumericalError(f"non-finite value in leaf {name!r}")
        self.nodes.append(t)
        return t

    def const(self, value, name=None) -> Tensor:
        return self.leaf(value, name=name, requires_grad=False)

    def record(self, op, value, parents, backward_fn) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite output in op '{op}'")
        needs = any(p.requires_grad for p in parents)
        t = Tensor(self, value, tuple(parents), backward_fn if needs else None, op=op, requires_grad=needs)
        self.nodes.append(t)
        return t

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self:
            raise ValueError("loss tensor belongs to a different tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1), dtype=self.dtype)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def gradients(self, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Leaf gradients after :meth:`backward`; unreached leaves get zeros."""
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for name, t in leaves.items()
        }


def _same_tape(*tensors):
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return tape.record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def spmm(adj, x: Tensor) -> Tensor:
    """Sparse-dense product ``adj @ x``.

    ``adj`` is a scipy sparse matrix or anything exposing one as ``.matrix``
    (e.g. :class:`polyvgae.graph.RelationCSR`).  The sparse coefficients are
    data, so only ``x`` receives a gradient.
    """
    mat = adj.matrix if hasattr(adj, "matrix") else adj
    if not sp.issparse(mat):
        mat = sp.csr_matrix(mat)
    if mat.shape[1] != x.rows:
        raise ShapeError(f"spmm: {mat.shape} @ {x.shape}")
    out = np.asarray(mat @ x.value, dtype=x.tape.dtype)
    mat_t = mat.T.tocsr()
    return x.tape.record("spmm", out, (x,), lambda g: (np.asarray(mat_t @ g, dtype=g.dtype),))


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} + {b.shape}")
    return tape.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Broadcast-add a 1xC row to every row of ``a``."""
    tape = _same_tape(a, row)
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError(f"add_row: {a.shape} + {row.shape}")
    return tape.record(
        "add_row", a.value + row.value, (a, row), lambda g: (g, g.sum(axis=0, keepdims=True))
    )


def add_scalar(a: Tensor, c: float) -> Tensor:
    return a.tape.record("add_scalar", a.value + c, (a,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} * {b.shape}")
    av, bv = a.value, b.value
    return tape.record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def mul_row(a: Tensor, row: Tensor) -> Tensor:
    """Multiply every row of ``a`` elementwise by a 1xC row."""
    tape = _same_tape(a, row)
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError(f"mul_row: {a.shape} * {row.shape}")
    av, rv = a.value, row.value
    return tape.record(
        "mul_row", av * rv, (a, row), lambda g: (g * rv, (g * av).sum(axis=0, keepdims=True))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.value > 0
    return a.tape.record("relu", np.where(mask, a.value, 0.0).astype(a.value.dtype), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return a.tape.record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.value).astype(a.value.dtype)
    return a.tape.record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` without overflow; the logits form of -log(sigmoid(-x))."""
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = _stable_sigmoid(x)
    return a.tape.record("softplus", out.astype(x.dtype), (a,), lambda g: (g * sig,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return a.tape.record("exp", out, (a,), lambda g: (g * out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)
    return a.tape.record("clip", np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_cols needs at least one tensor")
    tape = _same_tape(*tensors)
    rows = {t.rows for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [t.cols for t in tensors])

    def back(g):
        return tuple(g[:, bounds[k] : bounds[k + 1]] for k in range(len(tensors)))

    return tape.record("concat_cols", np.hstack([t.value for t in tensors]), tuple(tensors), back)


def gather_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise ShapeError(f"gather_rows: index out of range for {a.rows} rows")
    n = a.rows

    def back(g):
        # sparse scatter-add keeps the reduction order fixed
        sel = sp.csr_matrix((np.ones(idx.size, dtype=g.dtype), (idx, np.arange(idx.size))), shape=(n, idx.size))
        return (np.asarray(sel @ g),)

    return a.tape.record("gather_rows", a.value[idx], (a,), back)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return a.tape.record(
        "sum", np.array([[a.value.sum()]], dtype=a.value.dtype), (a,), lambda g: (np.full(shape, g[0, 0], dtype=g.dtype),)
    )


def mean(a: Tensor) -> Tensor:
    n = a.value.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    shape = a.shape
    return a.tape.record(
        "mean",
        np.array([[a.value.mean()]], dtype=a.value.dtype),
        (a,),
        lambda g: (np.full(shape, g[0, 0] / n, dtype=g.dtype),),
    )


def row_sum(a: Tensor) -> Tensor:
    cols = a.cols
    return a.tape.record(
        "row_sum", a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, cols, axis=1),)
    )


def square(a: Tensor) -> Tensor:
    av = a.value
    return a.tape.record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def transpose(a: Tensor) -> Tensor:
    return a.tape.record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays, mutates ``state``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    The step is rejected before any state changes if a gradient is non-finite.
    """
    if state.lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {state.lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.t = t
    return out


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self):
        lines = [f"grad_check tol={self.tol:g} {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.max_rel_error.items():
            lines.append(f"  {name}: {err:.3e}{'' if err < self.tol else '  <-- FAIL'}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients with central differences, entry by entry.

    ``f(tape, leaves)`` must build a scalar loss from the leaf tensors.  The
    relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in base.items()}
    loss = f(tape, leaves)
    tape.backward(loss)
    analytic = tape.gradients(leaves)

    def evaluate(values):
        t = Tape()
        lv = {k: t.leaf(v, name=k) for k, v in values.items()}
        return f(t, lv).item()

    errors = {}
    for name, value in base.items():
        worst = 0.0
        work = dict(base)
        for pos in np.ndindex(value.shape):
            plus = value.copy()
            plus[pos] += eps
            minus = value.copy()
            minus[pos] -= eps
            work[name] = plus
            fp = evaluate(work)
            work[name] = minus
            fm = evaluate(work)
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[name][pos])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(errors, tol)


# ---------------------------------------------------------------------------
# Checkpoint format
#
# header:  magic(8) version(u16 LE) endianness(1: '<' or '>') dtype(1: 'd' or 'f')
#          section count (u32)
# section: name length (u16) name (utf-8) rows (u64) cols (u64) payload row-major
# All integers after the version field use the declared endianness.

MAGIC = b"PVGAECKP"
VERSION = 1
_DTYPES = {b"d": np.float64, b"f": np.float32}


def save_checkpoint(path, params: Mapping[str, np.ndarray], dtype=np.float64) -> None:
    dtype = np.dtype(dtype)
    code = {np.dtype(np.float64): b"d", np.dtype(np.float32): b"f"}.get(dtype)
    if code is None:
        raise ValueError(f"unsupported checkpoint dtype {dtype}")
    end = "<"
    chunks = [MAGIC, struct.pack("<H", VERSION), end.encode(), code, struct.pack(end + "I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name])
        if arr.ndim != 2:
            raise ShapeError(f"checkpoint section {name!r} must be a matrix, got shape {arr.shape}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack(end + "H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(end + "QQ", arr.shape[0], arr.shape[1]))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype.newbyteorder(end)).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    end = data[10:11].decode()
    if end not in "<>":
        raise DataError(f"{path}: bad endianness flag {end!r}")
    code = data[11:12]
    if code not in _DTYPES:
        raise DataError(f"{path}: bad dtype flag {code!r}")
    dtype = np.dtype(_DTYPES[code]).newbyteorder(end)
    (count,) = struct.unpack_from(end + "I", data, 12)
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from(end + "H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from(end + "QQ", data, pos)
            pos += 16
            nbytes = rows * cols * dtype.itemsize
            if pos + nbytes > len(data):
                raise DataError(f"{path}: truncated section {name!r}")
            arr = np.frombuffer(data, dtype=dtype, count=rows * cols, offset=pos).reshape(rows, cols)
            out[name] = arr.astype(dtype.newbyteorder("="))
            pos += nbytes
    except struct.error as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes")
    return out
