"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op checks its output for NaN/Inf and raises NumericsError at the
op itself rather than letting bad values propagate. The tape is the set
of closures hanging off each result tensor; it is rebuilt by every
forward pass and consumed by backward().
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import InputError, NumericsError, ShapeError, TapeError

# Ops that register gradients. The finite-difference checker must cover
# every name in this list (see gradcheck.op_coverage).
DIFFERENTIABLE_OPS: list[str] = [
    "add",
    "sub",
    "mul",
    "matmul",
    "sigmoid",
    "gelu",
    "softmax",
    "layernorm",
    "cross_entropy_logits",
    "reshape",
    "swapaxes",
    "concat",
    "slice_axis",
    "embedding",
    "mean_abs",
    "sum_all",
    "mean_all",
]


def _guard(arr: np.ndarray, op: str) -> None:
    # min/max both propagate NaN and catch the two infinities; this avoids
    # materializing a boolean array on every op.
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NumericsError(f"non-finite values produced by op '{op}'")


_GRAD_ENABLED = True


class no_grad:
    """Skip tape construction inside the block; values are unchanged."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Row-major float64 array plus an optional gradient buffer.

    Tensors are immutable by convention once created; the optimizer is
    the only writer of .data in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        _guard(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; consumes the tape."""
        if self.data.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward()")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            _guard(node.grad, f"backward[{node.op}]")
            node._backward(node.grad)
            node.grad = None  # internal buffers are transient; leaves keep theirs
            node._parents = ()
            node._backward = None
            node._consumed = True

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, _parents=parents, _backward=backward)
    return Tensor(data, requires_grad=False, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g)  # copy: g may alias another node's buffer
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} x {b.shape}")
    # batched-x-matrix is the hot shape; one flat GEMM beats a strided loop
    flat_rhs = b.ndim == 2 and a.ndim > 2
    if flat_rhs:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def bw(g):
        if flat_rhs:
            g2 = g.reshape(-1, b.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                _accum(b, a.data.reshape(-1, a.shape[-1]).T @ g2)
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out, "matmul", (a, b), bw)


# Largest/smallest doubles inside the open interval (0, 1); sigmoid output
# is pinned there because f64 saturates to exactly 0/1 past |x| ~ 37.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid_local_grad(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, _SIG_LO, _SIG_HI, out=out)

    def bw(g):
        _accum(x, g * _sigmoid_local_grad(out))

    return _make(out, "sigmoid", (x,), bw)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    x = _coerce(x)
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = d * cdf

    def bw(g):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT_2PI
        _accum(x, g * (cdf + d * pdf))

    return _make(out, "gelu", (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, "softmax", (x,), bw)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    e = x.shape[-1]
    if gain.shape != (e,) or bias.shape != (e,):
        raise ShapeError(
            f"layernorm affine shapes {gain.shape}/{bias.shape} do not match trailing dim {e}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    # an overflowed variance would silently normalize to zeros, so the
    # output guard alone cannot catch it
    _guard(var, "layernorm")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    return _make(out, "layernorm", (x, gain, bias), bw)


def cross_entropy_logits(logits, targets, ignore_index: int = -1) -> Tensor:
    """Mean NLL over positions whose target != ignore_index.

    logits: [S, V]; targets: int array [S] with values in [0, V) or equal
    to ignore_index.
    """
    logits = _coerce(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects [S, V] logits, got {logits.shape}")
    s, v = logits.shape
    if targets.shape != (s,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits rows {s}")
    valid = targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise InputError("degenerate batch: every position carries ignore_index")
    tv = targets[valid]
    if tv.min() < 0 or tv.max() >= v:
        raise InputError(f"target ids outside [0, {v})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.flatnonzero(valid)
    out = -logp[rows, tv].sum() / n_valid

    def bw(g):
        grad = np.exp(logp)
        grad[rows, tv] -= 1.0
        grad[~valid] = 0.0
        _accum(logits, (float(g) / n_valid) * grad)

    return _make(np.float64(out), "cross_entropy_logits", (logits,), bw)


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    out = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _make(out, "reshape", (x,), bw)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _coerce(x)
    out = np.swapaxes(x.data, a, b)

    def bw(g):
        _accum(x, np.swapaxes(g, a, b))

    return _make(out, "swapaxes", (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out, "concat", tuple(ts), bw)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _coerce(x)
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            _accum(x, full)

    return _make(out, "slice_axis", (x,), bw)


def embedding(table, ids) -> Tensor:
    """Row lookup table[ids]; backward scatters into the used rows only."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be [V, E], got {table.shape}")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise InputError(f"embedding ids outside [0, {v})")
    out = table.data[ids]

    def bw(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(table, gt)

    return _make(out, "embedding", (table,), bw)


def mean_abs(x) -> Tensor:
    x = _coerce(x)
    out = np.float64(np.abs(x.data).mean())

    def bw(g):
        _accum(x, (float(g) / x.data.size) * np.sign(x.data))

    return _make(out, "mean_abs", (x,), bw)


def sum_all(x) -> Tensor:
    x = _coerce(x)
    out = np.float64(x.data.sum())

    def bw(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _make(out, "sum_all", (x,), bw)


def mean_all(x) -> Tensor:
    x = _coerce(x)
    out = np.float64(x.data.mean())

    def bw(g):
        _accum(x, np.full_like(x.data, float(g) / x.data.size))

    return _make(out, "mean_all", (x,), bw)
