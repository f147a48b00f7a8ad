"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is deliberately closed: matmul, add, multiply, tanh,
sigmoid, relu, softmax, log-softmax, layer norm, concat, indexing and
embedding lookup.  Everything else in the package is composed from these.
All arithmetic is 64-bit; forward and backward passes are deterministic
functions of their inputs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A node in the computation graph: float64 data plus an optional grad."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = ()):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward: Callable[[], None] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail(
            f"item: tensor of shape {self.shape} is not a scalar")

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, multiply(other, -1.0))

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    # -- autodiff ------------------------------------------------------
    def backward(self, seed=None) -> None:
        """Reverse-mode sweep from this tensor.

        ``seed`` defaults to ones and must match this tensor's shape.
        Gradients accumulate additively across fan-out; leaves created
        with ``requires_grad=False`` receive none.
        """
        if not self.requires_grad:
            raise RuntimeError(
                "backward: tensor has no recorded graph; evaluate a forward "
                "pass over requires_grad inputs first")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = _as_f64(seed)
            if seed.shape != self.data.shape:
                _fail(f"backward: seed shape {seed.shape} != output shape {self.data.shape}")

        order = self._topological_order()
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def _topological_order(self) -> list:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return order


def _fail(message: str):
    raise ValueError(message)


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, op="input")


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True, op="parameter")


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False, op="constant")


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = grad if t.grad is None else t.grad + grad


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, op=op,
                 parents=tuple(parents) if track else ())
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        _fail(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = _node(data, (a, b), "add")
    if out.requires_grad:
        def backward():
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(out.grad, b.shape))
        out._backward = backward
    return out


def multiply(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        _fail(f"multiply: shapes {a.shape} and {b.shape} do not broadcast")
    out = _node(data, (a, b), "multiply")
    if out.requires_grad:
        def backward():
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward = backward
    return out


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading (batch) axes broadcast; ``transpose_a``/``transpose_b`` swap the
    last two axes of the corresponding operand before multiplying.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        _fail(f"matmul: operands must have >= 2 dims, got {a.shape} and {b.shape}")
    lhs = a.data.swapaxes(-1, -2) if transpose_a else a.data
    rhs = b.data.swapaxes(-1, -2) if transpose_b else b.data
    if lhs.shape[-1] != rhs.shape[-2]:
        _fail(f"matmul: inner dimensions disagree, {lhs.shape} @ {rhs.shape}")
    data = lhs @ rhs
    out = _node(data, (a, b), "matmul")
    if out.requires_grad:
        def backward():
            g = out.grad
            ga = g @ rhs.swapaxes(-1, -2)
            if transpose_a:
                ga = ga.swapaxes(-1, -2)
            gb = lhs.swapaxes(-1, -2) @ g
            if transpose_b:
                gb = gb.swapaxes(-1, -2)
            _accumulate(a, _unbroadcast(ga, a.shape))
            _accumulate(b, _unbroadcast(gb, b.shape))
        out._backward = backward
    return out


def tanh(a) -> Tensor:
    a = _wrap(a)
    data = np.tanh(a.data)
    out = _node(data, (a,), "tanh")
    if out.requires_grad:
        def backward():
            _accumulate(a, out.grad * (1.0 - data * data))
        out._backward = backward
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    data = sigmoid_np(a.data)
    out = _node(data, (a,), "sigmoid")
    if out.requires_grad:
        def backward():
            _accumulate(a, out.grad * data * (1.0 - data))
        out._backward = backward
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out = _node(np.where(mask, a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        def backward():
            _accumulate(a, out.grad * mask)
        out._backward = backward
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    data = softmax_np(a.data, axis=axis)
    out = _node(data, (a,), "softmax")
    if out.requires_grad:
        def backward():
            g = out.grad
            inner = (g * data).sum(axis=axis, keepdims=True)
            _accumulate(a, data * (g - inner))
        out._backward = backward
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    data = log_softmax_np(a.data, axis=axis)
    out = _node(data, (a,), "log_softmax")
    if out.requires_grad:
        def backward():
            g = out.grad
            _accumulate(a, g - np.exp(data) * g.sum(axis=axis, keepdims=True))
        out._backward = backward
    return out


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis (no affine; compose scale/shift with
    multiply/add).  A constant vector normalizes to exact zeros."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = centered * inv
    out = _node(data, (a,), "layer_norm")
    if out.requires_grad:
        def backward():
            g = out.grad
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * data).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (g - gm - data * gy))
        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        _fail("concat: empty tensor list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        _fail(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = _node(data, tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward():
            g = out.grad
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])
        out._backward = backward
    return out


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice, type(None), type(Ellipsis)))
               for p in parts)


def take(a, key) -> Tensor:
    """Numpy indexing (basic slices, ints, None, or integer arrays)."""
    a = _wrap(a)
    data = a.data[key]
    out = _node(np.ascontiguousarray(data), (a,), "take")
    if out.requires_grad:
        basic = _is_basic_key(key)

        def backward():
            buf = np.zeros_like(a.data)
            if basic:
                buf[key] += out.grad     # basic keys address unique positions
            else:
                np.add.at(buf, key, out.grad)
            _accumulate(a, buf)
        out._backward = backward
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]`` with duplicate-id gradients summed."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        _fail(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if table.ndim != 2:
        _fail(f"embedding: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        _fail(f"embedding: id out of range for table with {table.shape[0]} rows")
    data = table.data[ids]
    out = _node(data, (table,), "embedding")
    if out.requires_grad:
        def backward():
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids, out.grad)
            _accumulate(table, buf)
        out._backward = backward
    return out


def attention(q, k, v, bias) -> Tensor:
    """Fused ``softmax(q @ k^T + bias, axis=-1) @ v``.

    Mathematically this is the matmul/add/softmax/matmul composition; fusing
    it keeps only the attention weights on the tape instead of three
    score-sized intermediates.  ``bias`` is an additive mask constant (no
    gradient).  Shifted scores are floored at -700 so fully masked entries
    underflow to a normal-range weight instead of tripping slow libm paths.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    bias_arr = bias.data if isinstance(bias, Tensor) else _as_f64(bias)
    if q.shape[-1] != k.shape[-1]:
        _fail(f"attention: q/k width mismatch {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        _fail(f"attention: k/v length mismatch {k.shape} vs {v.shape}")
    scores = q.data @ k.data.swapaxes(-1, -2) + bias_arr
    scores -= scores.max(axis=-1, keepdims=True)
    np.maximum(scores, -700.0, out=scores)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    del scores
    out = _node(weights @ v.data, (q, k, v), "attention")
    if out.requires_grad:
        def backward():
            g = out.grad
            gw = g @ v.data.swapaxes(-1, -2)
            gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
            _accumulate(q, _unbroadcast(gs @ k.data, q.shape))
            _accumulate(k, _unbroadcast(gs.swapaxes(-1, -2) @ q.data, k.shape))
            _accumulate(v, _unbroadcast(weights.swapaxes(-1, -2) @ g, v.shape))
        out._backward = backward
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only on the training path."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return multiply(a, constant(keep))


# ---------------------------------------------------------------------
# plain-numpy companions (shared by the inference paths)
# ---------------------------------------------------------------------

def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def layer_norm_np(x: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps)


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                      eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, looping coordinates."""
    x = _as_f64(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
