"""Minimal reverse-mode automatic differentiation over numpy arrays.

Graphs are built on the fly (define-by-run). Every op records its parents and
a closure that pushes the output gradient back to them. ``Tensor.backward``
walks the graph once in reverse topological order.

Only the operations needed by the encoder-decoder are provided. The GRU cell
exists both as a composition of primitive ops (see ``gru_cell_reference``) and
as a fused op with a hand-written backward pass, which is what the model uses.
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_gown")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._gown = False  # True when ``grad`` is a private buffer safe to update in place

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None
        self._gown = False

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        if self.requires_grad:
            _accumulate(self, grad)
        else:
            self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._gown = False
    elif t._gown:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._gown = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise and arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), "neg", backward)


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting. A plain array operand is a constant."""
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), "scale", backward)


def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant (dropout) mask; the mask receives no gradient."""
    mask = np.asarray(mask, dtype=x.dtype)
    _check_broadcast("apply_mask", x, Tensor(mask))

    def backward(g):
        _accumulate(x, _unbroadcast(g * mask, x.shape))

    return _result(x.data * mask, (x,), "apply_mask", backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - y * y))

    return _result(y, (x,), "tanh", backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        _accumulate(x, g * y * (1.0 - y))

    return _result(y, (x,), "sigmoid", backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _result(y, (x,), "relu", backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * y)

    return _result(y, (x,), "exp", backward)


def log(x: Tensor) -> Tensor:
    tiny = np.finfo(x.dtype).tiny
    safe = np.maximum(x.data, tiny)

    def backward(g):
        _accumulate(x, g / safe)

    return _result(np.log(safe), (x,), "log", backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        def backward(g):
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                k = a.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
    else:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got shape {x.shape}")

    def backward(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(x.data, -1, -2), (x,), "transpose", backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None

    def backward(g):
        _accumulate(x, g.reshape(old))

    return _result(y, (x,), "reshape", backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        _accumulate(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _result(y, (x,), "log_softmax", backward)


# ---------------------------------------------------------------------------
# indexing and structure
# ---------------------------------------------------------------------------

def gather(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by an integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather: ids out of range for table of {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, gt)

    return _result(table.data[ids], (table,), "gather", backward)


def pick(x: Tensor, ids) -> Tensor:
    """Select one entry per row along the last axis: ``x[..., ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.shape[:-1] != ids.shape:
        raise ShapeError(f"pick: index shape {ids.shape} does not match {x.shape[:-1]}")
    flat = x.data.reshape(-1, x.shape[-1])
    rows = np.arange(flat.shape[0])
    y = flat[rows, ids.reshape(-1)].reshape(ids.shape)

    def backward(g):
        gx = np.zeros_like(flat)
        gx[rows, ids.reshape(-1)] = g.reshape(-1)
        _accumulate(x, gx.reshape(x.shape))

    return _result(y, (x,), "pick", backward)


def slice_(x: Tensor, index) -> Tensor:
    y = x.data[index]

    def backward(g):
        # write straight into a private gradient buffer: per-timestep slices of
        # a long sequence would otherwise allocate a full-size zero array each
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
            x._gown = True
        elif not x._gown:
            x.grad = x.grad.copy()
            x._gown = True
        x.grad[index] += g

    return _result(y, (x,), "slice", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _result(y, tensors, "concat", backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            _accumulate(t, part)

    return _result(y, tensors, "stack", backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _result(np.asarray(y), (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------

def gru_cell(xw: Tensor, h: Tensor, U: Tensor, step_mask=None, state_mask=None) -> Tensor:
    """Fused GRU transition.

    ``xw`` is the input projection plus bias, laid out as [reset | update |
    candidate] blocks of width H; ``U`` is the (H, 3H) recurrent matrix. The
    new state is ``z * h + (1 - z) * c``. ``state_mask`` is a constant dropout
    mask on the recurrent input; ``step_mask`` (B, 1) keeps ``h`` unchanged on
    padded positions.
    """
    H = h.shape[-1]
    if xw.shape[-1] != 3 * H or U.shape != (H, 3 * H) or xw.shape[:-1] != h.shape[:-1]:
        raise ShapeError(f"gru_cell: xw {xw.shape}, h {h.shape}, U {U.shape} are inconsistent")
    hd = h.data if state_mask is None else h.data * state_mask
    hu = hd @ U.data
    x = xw.data
    r = _sigmoid(x[:, :H] + hu[:, :H])
    z = _sigmoid(x[:, H:2 * H] + hu[:, H:2 * H])
    c = np.tanh(x[:, 2 * H:] + r * hu[:, 2 * H:])
    new = z * h.data + (1.0 - z) * c
    if step_mask is not None:
        out = step_mask * new + (1.0 - step_mask) * h.data
    else:
        out = new

    def backward(g):
        if step_mask is not None:
            g_new = g * step_mask
            g_keep = g * (1.0 - step_mask)
        else:
            g_new, g_keep = g, None
        d_pre_c = g_new * (1.0 - z) * (1.0 - c * c)
        d_pre_z = g_new * (h.data - c) * z * (1.0 - z)
        d_pre_r = d_pre_c * hu[:, 2 * H:] * r * (1.0 - r)
        if xw.requires_grad:
            _accumulate(xw, np.concatenate([d_pre_r, d_pre_z, d_pre_c], axis=1))
        d_hu = np.concatenate([d_pre_r, d_pre_z, d_pre_c * r], axis=1)
        if U.requires_grad:
            _accumulate(U, hd.T @ d_hu)
        if h.requires_grad:
            dh = d_hu @ U.data.T
            if state_mask is not None:
                dh = dh * state_mask
            dh = dh + g_new * z
            if g_keep is not None:
                dh = dh + g_keep
            _accumulate(h, dh)

    return _result(out, (xw, h, U), "gru_cell", backward)


def gru_cell_reference(xw: Tensor, h: Tensor, U: Tensor, step_mask=None, state_mask=None) -> Tensor:
    """The same transition as ``gru_cell`` composed from primitive ops."""
    H = h.shape[-1]
    hd = h if state_mask is None else apply_mask(h, state_mask)
    hu = hd @ U
    r = sigmoid(xw[:, :H] + hu[:, :H])
    z = sigmoid(xw[:, H:2 * H] + hu[:, H:2 * H])
    c = tanh(xw[:, 2 * H:] + r * hu[:, 2 * H:])
    new = z * h + (1.0 - z) * c
    if step_mask is None:
        return new
    return apply_mask(new, step_mask) + apply_mask(h, 1.0 - step_mask)


# ---------------------------------------------------------------------------
# randomness and dropout
# ---------------------------------------------------------------------------

def rng_for(seed: int, purpose: str, step: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, purpose, step).

    Streams for different purposes or steps are independent, so a dropout mask
    does not depend on how many other masks were drawn before it.
    """
    digest = hashlib.sha256(f"{seed}|{purpose}|{step}".encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def dropout_mask(shape: tuple, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted dropout mask: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def variational_dropout(xs, p: float, rng: np.random.Generator | None = None, training: bool = True):
    """Dropout with one mask per sequence, shared by every timestep.

    ``xs`` is either a list of (B, D) tensors (one per step) or a single
    (B, T, D) tensor. Returns the same structure.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return xs
    if rng is None:
        raise ValueError("variational_dropout needs an rng in training mode")
    if isinstance(xs, Tensor):
        B, _, D = xs.shape
        return apply_mask(xs, dropout_mask((B, 1, D), p, rng, xs.dtype))
    B, D = xs[0].shape
    mask = dropout_mask((B, D), p, rng, xs[0].dtype)
    return [apply_mask(x, mask) for x in xs]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors, iterated in sorted-name order."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple, init: str | np.ndarray = "glorot") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if isinstance(init, np.ndarray):
            if init.shape != tuple(shape):
                raise ShapeError(f"init for {name}: shape {init.shape} != {shape}")
            data = init.astype(self.dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "glorot":
            fan_in, fan_out = shape[0], shape[-1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng_for(self.seed, "init:" + name).uniform(-limit, limit, size=shape).astype(self.dtype)
        elif init == "normal":
            data = (rng_for(self.seed, "init:" + name).standard_normal(shape) * 0.01).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, op="param")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            extra = sorted(set(state) - set(self._params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            if name not in self._params:
                continue
            t = self._params[name]
            if t.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {t.shape}")
            t.data = np.array(arr, dtype=self.dtype)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``x.data``."""
    grad = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(fn().data.sum())
            flat[i] = old - h
            down = float(fn().data.sum())
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / (||a|| + ||b||)."""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between backprop and finite differences over ``inputs``."""
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward(np.ones_like(out.data))
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_gradient(fn, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
