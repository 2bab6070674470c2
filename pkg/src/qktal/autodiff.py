"""Minimal reverse-mode autodiff over dense float64 arrays.

Ops execute eagerly on numpy arrays and, while a ComputationRecord is
active, append themselves to it. A record replays its op list in reverse
to accumulate gradients; execution order is a valid topological order, so
a single reverse sweep visits every recorded op exactly once and the
accumulation order is deterministic.

Only the broadcasting patterns the model actually uses are allowed:
same-shape elementwise, a trailing 1-D vector against a matrix's last
dimension (bias add, row-wise scale), and 0-d scalars.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

_local = threading.local()


def _record_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_record():
    stack = _record_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 tensor; a leaf parameter or the output of an op."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, _validate: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _validate and not np.all(np.isfinite(arr)):
            raise ValueError("tensor rejects non-finite entries (NaN/Inf)")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a tensor from external data, rejecting NaN/Inf entries."""
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    """Build a learnable leaf tensor."""
    return Tensor(data, requires_grad=True)


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "grad_fn")

    def __init__(self, name, inputs, output, grad_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class ComputationRecord:
    """Ordered tape of executed ops plus the grad-requiring tensors seen.

    Use as a context manager; ops run inside the ``with`` block are
    recorded when any input requires a gradient. Backward passes may be
    run repeatedly and yield identical results.
    """

    def __init__(self):
        self.ops: list[_OpRecord] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self) -> "ComputationRecord":
        _record_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _record_stack().pop()
        assert popped is self

    def _track(self, t: Tensor) -> None:
        self._tracked.setdefault(id(t), t)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar loss for every tracked tensor.

        Returns a mapping from ``id(tensor)`` to its gradient array and
        also stores each gradient on ``tensor.grad``. Tensors that require
        a gradient but are unreachable from the loss get zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward seed must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops):
            gout = grads.get(id(op.output))
            if gout is None:
                continue
            gins = op.grad_fn(gout)
            for inp, gin in zip(op.inputs, gins):
                if gin is None or not inp.requires_grad:
                    continue
                # numpy returns immutable scalars for 0-d results; normalize
                # so accumulation below never mutates a stored array in place
                gin = np.asarray(gin, dtype=np.float64)
                if gin.shape != inp.data.shape:
                    raise ShapeError(
                        f"{op.name}: gradient shape {gin.shape} != input shape {inp.data.shape}"
                    )
                acc = grads.get(id(inp))
                grads[id(inp)] = gin if acc is None else acc + gin
        out: dict[int, np.ndarray] = {}
        for tid, t in self._tracked.items():
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(t.data)
            out[tid] = g
            t.grad = g
        return out


def _result(name: str, data: np.ndarray, inputs: Sequence[Tensor],
            grad_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    rec = _active_record()
    needs = rec is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, _validate=False)
    if needs:
        for t in inputs:
            if t.requires_grad:
                rec._track(t)
        rec._track(out)
        rec.ops.append(_OpRecord(name, tuple(inputs), out, grad_fn))
    return out


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_pairwise(name: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    # trailing-vector pattern: bias add / row-wise scale
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    raise ShapeError(f"{name}: unsupported operand shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pairwise("add", a, b)
    data = a.data + b.data

    def grad_fn(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _result("add", data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pairwise("sub", a, b)
    data = a.data - b.data

    def grad_fn(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _result("sub", data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pairwise("mul", a, b)
    data = a.data * b.data

    def grad_fn(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _result("mul", data, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_pairwise("div", a, b)
    data = a.data / b.data

    def grad_fn(g):
        return (_reduce_to(g / b.data, a.data.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _result("div", data, (a, b), grad_fn)


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", t.data * c, (t,), lambda g: (g * c,))


def add_const(t: Tensor, c: float) -> Tensor:
    return _result("add_const", t.data + float(c), (t,), lambda g: (g,))


def rsub_const(c: float, t: Tensor) -> Tensor:
    """Elementwise ``c - t``."""
    return _result("rsub_const", float(c) - t.data, (t,), lambda g: (-g,))


def exp(t: Tensor) -> Tensor:
    data = np.exp(t.data)
    return _result("exp", data, (t,), lambda g: (g * data,))


def log(t: Tensor) -> Tensor:
    data = np.log(t.data)
    return _result("log", data, (t,), lambda g: (g / t.data,))


def sqrt(t: Tensor) -> Tensor:
    data = np.sqrt(t.data)
    return _result("sqrt", data, (t,), lambda g: (g * 0.5 / data,))


def absolute(t: Tensor) -> Tensor:
    sign = np.sign(t.data)
    return _result("abs", np.abs(t.data), (t,), lambda g: (g * sign,))


def maximum_const(t: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(t, floor)``; gradient passes only where t > floor."""
    mask = t.data > floor
    return _result("maximum_const", np.maximum(t.data, floor), (t,),
                   lambda g: (g * mask,))


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _result("sigmoid", data, (t,), lambda g: (g * data * (1.0 - data),))


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    x = t.data
    factor = np.where(x >= 0, 1.0, slope)
    return _result("leaky_relu", x * factor, (t,), lambda g: (g * factor,))


def relu(t: Tensor) -> Tensor:
    return leaky_relu(t, 0.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", data, (a, b), grad_fn)


def transpose(t: Tensor) -> Tensor:
    if t.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {t.data.shape}")
    return _result("transpose", t.data.T.copy(), (t,), lambda g: (g.T,))


def reshape(t: Tensor, shape) -> Tensor:
    old = t.data.shape
    return _result("reshape", t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def get_row(t: Tensor, i: int) -> Tensor:
    """Row i of a matrix as a 1-D tensor; gradient scatters back into the row."""
    if t.data.ndim != 2:
        raise ShapeError(f"get_row expects a 2-D tensor, got {t.data.shape}")

    def grad_fn(g):
        full = np.zeros_like(t.data)
        full[i] = g
        return (full,)

    return _result("get_row", t.data[i].copy(), (t,), grad_fn)


def total(t: Tensor) -> Tensor:
    """Sum of all entries as a 0-d scalar."""
    def grad_fn(g):
        return (np.broadcast_to(g, t.data.shape).astype(np.float64, copy=True),)

    return _result("sum", np.asarray(t.data.sum()), (t,), grad_fn)


def mean(t: Tensor) -> Tensor:
    n = t.data.size

    def grad_fn(g):
        return (np.broadcast_to(g / n, t.data.shape).astype(np.float64, copy=True),)

    return _result("mean", np.asarray(t.data.mean()), (t,), grad_fn)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by per-row max subtraction."""
    if m.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {m.data.shape}")
    y = _softmax_last(m.data)

    def grad_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _result("softmax_rows", y, (m,), grad_fn)


def softmax_vec(v: Tensor) -> Tensor:
    """Softmax of a 1-D tensor."""
    if v.data.ndim != 1:
        raise ShapeError(f"softmax_vec expects a 1-D tensor, got {v.data.shape}")
    y = _softmax_last(v.data)

    def grad_fn(g):
        inner = (g * y).sum()
        return (y * (g - inner),)

    return _result("softmax_vec", y, (v,), grad_fn)


def layer_norm(v: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last dimension, then apply gain and bias."""
    x = v.data
    d = x.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match last dimension {d}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = xhat * gain.data + bias.data

    def grad_fn(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        axes = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=axes) if axes else g * xhat
        dbias = g.sum(axis=axes) if axes else g
        return dx, dgain.reshape(gain.data.shape), dbias.reshape(bias.data.shape)

    return _result("layer_norm", data, (v, gain, bias), grad_fn)


def conv1d_temporal(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Temporal convolution of a [T, Cin] sequence with [Cout, Cin, k] kernels.

    Odd kernel only; zero padding of (k-1)/2 keeps the output length at T.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError(f"conv1d_temporal: expects x [T,Cin] and w [Cout,Cin,k], "
                         f"got {x.data.shape} and {w.data.shape}")
    t_len, cin = x.data.shape
    cout, w_cin, k = w.data.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d_temporal: kernel size must be odd, got {k}")
    if w_cin != cin:
        raise ShapeError(f"conv1d_temporal: input channels {cin} != kernel channels {w_cin}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv1d_temporal: bias shape {b.data.shape} != ({cout},)")
    pad = (k - 1) // 2
    xp = np.zeros((t_len + 2 * pad, cin))
    xp[pad:pad + t_len] = x.data
    out = np.tile(b.data, (t_len, 1))
    for j in range(k):
        out += xp[j:j + t_len] @ w.data[:, :, j].T

    def grad_fn(g):
        dx_p = np.zeros_like(xp)
        dw = np.empty_like(w.data)
        for j in range(k):
            dx_p[j:j + t_len] += g @ w.data[:, :, j]
            dw[:, :, j] = g.T @ xp[j:j + t_len]
        db = g.sum(axis=0)
        return dx_p[pad:pad + t_len], dw, db

    return _result("conv1d_temporal", out, (x, w, b), grad_fn)


def _topk_indices(row: np.ndarray, k: int) -> np.ndarray:
    # stable argsort on negated values: ties resolve to the lowest index
    return np.argsort(-row, kind="stable")[:k]


def topk_mean(values: Tensor, k: int) -> Tensor:
    """Mean of the k largest entries of a 1-D tensor (ties: lowest index)."""
    if values.data.ndim != 1:
        raise ShapeError(f"topk_mean expects a 1-D tensor, got {values.data.shape}")
    n = values.data.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"topk_mean: k={k} out of range [1, {n}]")
    idx = _topk_indices(values.data, k)

    def grad_fn(g):
        out = np.zeros_like(values.data)
        out[idx] = float(g) / k
        return (out,)

    return _result("topk_mean", np.asarray(values.data[idx].mean()), (values,), grad_fn)


def topk_mean_rows(m: Tensor, k: int) -> Tensor:
    """topk_mean applied to every row of a matrix; returns a 1-D tensor."""
    if m.data.ndim != 2:
        raise ShapeError(f"topk_mean_rows expects a 2-D tensor, got {m.data.shape}")
    rows, cols = m.data.shape
    if not 1 <= k <= cols:
        raise ValueError(f"topk_mean_rows: k={k} out of range [1, {cols}]")
    idx = np.stack([_topk_indices(m.data[r], k) for r in range(rows)])
    vals = np.take_along_axis(m.data, idx, axis=1).mean(axis=1)

    def grad_fn(g):
        out = np.zeros_like(m.data)
        np.put_along_axis(out, idx, g[:, None] / k, axis=1)
        return (out,)

    return _result("topk_mean_rows", vals, (m,), grad_fn)


def stop_gradient(t: Tensor) -> Tensor:
    """Value-identical copy through which no gradient flows."""
    return Tensor(t.data, requires_grad=False, _validate=False)


COSINE_MAGNITUDE_FLOOR = 1e-8


def cosine_distance(e1: Tensor, e2: Tensor) -> Tensor:
    """1 - cos(e1, e2) for 1-D vectors, with magnitudes floored at 1e-8."""
    if e1.data.shape != e2.data.shape or e1.data.ndim != 1:
        raise ShapeError(f"cosine_distance expects matching 1-D vectors, "
                         f"got {e1.data.shape} and {e2.data.shape}")
    dot = total(mul(e1, e2))
    n1 = maximum_const(sqrt(total(mul(e1, e1))), COSINE_MAGNITUDE_FLOOR)
    n2 = maximum_const(sqrt(total(mul(e2, e2))), COSINE_MAGNITUDE_FLOOR)
    return rsub_const(1.0, div(dot, mul(n1, n2)))


def finite_diff_check(f: Callable[[], Tensor], point: Sequence[Tensor],
                      h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument scalar-valued closure over the tensors in
    ``point``; relative error per entry is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    with ComputationRecord() as rec:
        loss = f()
    grads = rec.backward(loss)
    worst = 0.0
    for p in point:
        analytic = grads.get(id(p))
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f().data)
            flat[i] = orig - h
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
