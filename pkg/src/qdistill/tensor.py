"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

Forward math runs on numpy float32 buffers. While a Tape is active, every
primitive op appends a record (inputs, output, vjp); Tape.backward walks the
records in exact reverse execution order and accumulates gradients additively,
so the gradient of any scalar w.r.t. every participating tensor is available
after one pass.

Broadcasting is deliberately restricted to bias-add and scalar ops; everything
else requires exact shape agreement so shape bugs fail loudly.
"""

from __future__ import annotations

import struct
import threading
from typing import BinaryIO, Callable, Sequence

import numpy as np
from scipy.special import erf as _erf, expit as _expit

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "finite_checks",
    "set_finite_checks",
    "from_op",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "sigmoid",
    "gelu",
    "softmax",
    "layer_norm",
    "embedding_lookup",
    "linear",
    "cross_entropy",
    "kl_divergence",
    "write_array",
    "read_array",
]

_INV_SQRT2 = np.float32(0.7071067811865476)
_INV_SQRT_2PI = np.float32(0.3989422804014327)


class Tensor:
    """A dense float32 value with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class OpRecord:
    """One executed primitive: forward inputs/output plus the vjp closure."""

    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class _ThreadState(threading.local):
    """Per-thread tape stack and mode flags; independent graphs on separate
    threads share no mutable state."""

    def __init__(self):
        self.tapes: list["Tape"] = []
        self.grad_enabled: list[bool] = [True]
        self.finite_checks: list[bool] = [True]


_STATE = _ThreadState()


class Tape:
    """Ordered log of executed ops; backward replays it in exact reverse order."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        _STATE.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tapes.pop()

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(t) into t.grad for every requires_grad tensor on the tape."""
        if grad is None:
            if output.data.ndim != 0:
                raise ValueError("backward() needs a scalar output or an explicit seed grad")
            grad = np.ones((), dtype=np.float32)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=np.float32)}
        holders: dict[int, Tensor] = {id(output): output}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue  # branch not on the path to the output
            out = rec.output
            out.grad = g if out.grad is None else out.grad + g
            for t, gin in zip(rec.inputs, rec.vjp(g)):
                if gin is None or not t.requires_grad:
                    continue
                tid = id(t)
                holders[tid] = t
                if tid in grads:
                    grads[tid] = grads[tid] + gin
                else:
                    grads[tid] = gin
        # whatever is left was never produced by a record: leaf tensors
        for tid, g in grads.items():
            t = holders[tid]
            t.grad = g if t.grad is None else t.grad + g


class no_grad:
    """Context manager that suppresses tape recording (e.g. teacher forward passes)."""

    def __enter__(self):
        _STATE.grad_enabled.append(False)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.grad_enabled.pop()


def set_finite_checks(enabled: bool) -> None:
    _STATE.finite_checks[0] = bool(enabled)


class finite_checks:
    """Temporarily enable/disable NaN/Inf screening of op outputs."""

    def __init__(self, enabled: bool):
        self.enabled = bool(enabled)

    def __enter__(self):
        _STATE.finite_checks.append(self.enabled)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.finite_checks.pop()


def _active_tape() -> Tape | None:
    if _STATE.tapes and _STATE.grad_enabled[-1]:
        return _STATE.tapes[-1]
    return None


def from_op(data, inputs: tuple[Tensor, ...], vjp: Callable, name: str = "op") -> Tensor:
    """Build an op output tensor, screening for non-finite values and recording on the tape.

    Extension point: modules outside this one (e.g. fake quantization) register
    custom-differentiable ops through it.
    """
    arr = np.asarray(data, dtype=np.float32)
    if _STATE.finite_checks[-1] and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {name}")
    out = Tensor(arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(OpRecord(inputs, out, vjp))
    return out


def _as_scalar32(x) -> np.float32:
    return np.float32(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float, np.floating)):
        c = _as_scalar32(b)
        return from_op(a.data + c, (a,), lambda g: (g,), name="add")
    if not isinstance(b, Tensor):
        raise TypeError(f"cannot add Tensor and {type(b).__name__}")
    if a.shape == b.shape:
        return from_op(a.data + b.data, (a, b), lambda g: (g, g), name="add")
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        # bias add, the one sanctioned broadcast
        n = b.shape[0]

        def vjp(g):
            return g, g.reshape(-1, n).sum(axis=0)

        return from_op(a.data + b.data, (a, b), vjp, name="bias_add")
    raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float, np.floating)):
        return add(a, -float(b))
    return add(a, mul(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float, np.floating)):
        c = _as_scalar32(b)
        return from_op(a.data * c, (a,), lambda g: (g * c,), name="mul")
    if not isinstance(b, Tensor):
        raise TypeError(f"cannot multiply Tensor and {type(b).__name__}")
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), name="mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul requires tensors of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree ({ad.shape} @ {bd.shape})")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: leading dimensions must match ({ad.shape} @ {bd.shape})")

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return from_op(ad @ bd, (a, b), vjp, name="matmul")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), name="transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), name="reshape")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    y = _expit(x.data)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return from_op(y, (x,), vjp, name="sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    e = _erf(xd * _INV_SQRT2)
    y = np.float32(0.5) * xd * (1.0 + e)

    def vjp(g):
        pdf = np.exp(np.float32(-0.5) * xd * xd) * _INV_SQRT_2PI
        return (g * (np.float32(0.5) * (1.0 + e) + xd * pdf),)

    return from_op(y, (x,), vjp, name="gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis` (max subtraction is mandatory)."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for rank {x.ndim}")
    z = x.data
    ez = np.exp(z - z.max(axis=axis, keepdims=True))
    y = ez / ez.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return from_op(y, (x,), vjp, name="softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply affine gamma/beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({d},)")
    if eps < 0:
        raise ValueError("layer_norm: eps must be >= 0")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def vjp(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxh = g * gamma.data
        m1 = dxh.mean(axis=-1, keepdims=True)
        m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
        dx = (dxh - m1 - xhat * m2) * inv
        return dx, dgamma, dbeta

    return from_op(y, (x, gamma, beta), vjp, name="layer_norm")


# ---------------------------------------------------------------------------
# lookup and affine
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer index; backward scatter-adds into the table."""
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding_lookup: ids must be integers")
    v, d = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"embedding_lookup: id out of range [0, {v})")

    def vjp(g):
        gt = np.zeros((v, d), dtype=np.float32)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return from_op(table.data[idx], (table,), vjp, name="embedding_lookup")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) where x may carry leading batch axes; composed from primitives."""
    if x.ndim == 2:
        y = matmul(x, w)
    else:
        din = x.shape[-1]
        flat = reshape(x, (-1, din))
        y = reshape(matmul(flat, w), x.shape[:-1] + (w.shape[-1],))
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log p(target); internally float64 for the log-sum-exp."""
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects [N, V] logits")
    n, v = logits.shape
    t = np.asarray(targets)
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("cross_entropy: targets must be integer ids")
    if t.shape != (n,):
        raise ValueError(f"cross_entropy: targets must have shape ({n},)")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"cross_entropy: target id out of range [0, {v})")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = np.float32((lse[:, 0] - z[rows, t]).mean())

    def vjp(g):
        p = np.exp(z - lse)
        p[rows, t] -= 1.0
        return ((p * (float(g) / n)).astype(np.float32),)

    return from_op(loss, (logits,), vjp, name="cross_entropy")


def kl_divergence(student_logits: Tensor, teacher_logits: Tensor, direction: str = "forward") -> Tensor:
    """KL divergence between softmax distributions, averaged over rows.

    direction="forward" is KL(teacher || student), the usual distillation loss;
    "reverse" is KL(student || teacher). Gradient flows to the student only;
    the teacher is treated as a constant.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"kl_divergence: shape mismatch {student_logits.shape} vs {teacher_logits.shape}"
        )
    if student_logits.ndim != 2:
        raise ValueError("kl_divergence expects [N, V] logits")
    if direction not in ("forward", "reverse"):
        raise ValueError(f"kl_divergence: unknown direction {direction!r}")
    n = student_logits.shape[0]
    zs = student_logits.data.astype(np.float64)
    zt = teacher_logits.data.astype(np.float64)
    ls = zs - _logsumexp(zs)
    lt = zt - _logsumexp(zt)
    ps = np.exp(ls)
    pt = np.exp(lt)
    if direction == "forward":
        per_row = np.where(pt > 0.0, pt * (lt - ls), 0.0).sum(axis=1)

        def vjp(g):
            return ((ps - pt) * (float(g) / n), None)

    else:
        per_row = (ps * (ls - lt)).sum(axis=1)

        def vjp(g):
            inner = (ls - lt) - per_row[:, None]
            return (ps * inner * (float(g) / n), None)

    loss = np.float32(per_row.mean())
    return from_op(loss, (student_logits, teacher_logits), vjp, name="kl_divergence")


def _logsumexp(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# flat binary serialization: rank + dims as int64 LE, then float32 LE row-major
# ---------------------------------------------------------------------------


def write_array(f: BinaryIO, arr: np.ndarray) -> None:
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim and not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)
    f.write(struct.pack("<q", a.ndim))
    f.write(np.asarray(a.shape, dtype="<i8").tobytes())
    f.write(a.astype("<f4", copy=False).tobytes())


def read_array(f: BinaryIO) -> np.ndarray:
    rank_b = _read_exact(f, 8, "array header")
    rank = struct.unpack("<q", rank_b)[0]
    if not 0 <= rank <= 16:
        raise ValueError(f"corrupt array header: rank {rank}")
    dims = np.frombuffer(_read_exact(f, 8 * rank, "array dims"), dtype="<i8")
    if rank and dims.min() < 0:
        raise ValueError(f"corrupt array header: dims {dims.tolist()}")
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(f, 4 * count, "array data"), dtype="<f4")
    return data.reshape(tuple(int(d) for d in dims)).astype(np.float32)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated stream while reading {what}")
    return buf
