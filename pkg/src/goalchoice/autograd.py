"""Small define-by-run reverse-mode autodiff over numpy arrays.

Every op returns a :class:`Tensor` remembering its parents and a closure
mapping the output gradient to parent gradients. ``backward`` walks the graph
in reverse topological order and accumulates into ``.grad``. Values keep the
dtype of their inputs, so a graph can be evaluated in ``np.longdouble`` as well
as ``float64``.
"""
from __future__ import annotations

import io
import itertools
import math
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, IoError, NumericError, SchemaError, ShapeError

_ids = itertools.count()


class Tensor:
    __slots__ = ("value", "grad", "parents", "op", "id", "requires_grad", "_backward")

    def __init__(self, value, parents: Sequence["Tensor"] = (), op: str = "leaf",
                 backward: Optional[Callable] = None, requires_grad: bool = False):
        self.value = np.asarray(value)
        if self.value.dtype.kind != "f":
            self.value = self.value.astype(float)
        self.parents = tuple(parents)
        self.op = op
        self.id = next(_ids)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward = backward
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)


def tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(value, parents, op, backward) -> Tensor:
    value = np.asarray(value)
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite value produced by {op}")
    return Tensor(value, parents, op, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.value + b.value, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.value - b.value, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("mul", a, b)
    return _node(a.value * b.value, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def square(a) -> Tensor:
    a = tensor(a)
    return _node(a.value * a.value, (a,), "square", lambda g: (2 * a.value * g,))


def reciprocal(a) -> Tensor:
    a = tensor(a)
    out = 1 / a.value
    return _node(out, (a,), "reciprocal", lambda g: (-g * out * out,))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    # split by sign so exp never overflows
    x = a.value
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1 - out),))


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), "tanh", lambda g: (g * (1 - out * out),))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    if np.any(a.value <= 0):
        raise NumericError("log of a nonpositive value")
    return _node(np.log(a.value), (a,), "log", lambda g: (g / a.value,))


# ----------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), "matmul", back)


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [tensor(t) for t in items]
    try:
        out = np.concatenate([t.value for t in items], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in items]} on axis {axis}") from None
    sizes = [t.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]
    return _node(out, items, "concat", lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = tensor(a)
    try:
        out = a.value[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        full = np.zeros_like(a.value)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), "slice", back)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = tensor(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _node(np.array(out), (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


# ----------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), "sum", back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / n)


def max(a, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = tensor(a)
    idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)
    out = np.take_along_axis(a.value, idx, axis=axis)

    def back(g):
        full = np.zeros_like(a.value)
        if not keepdims:
            g = np.expand_dims(g, axis)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _node(out if keepdims else np.squeeze(out, axis), (a,), "max", back)


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    e = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), "softmax", back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), "log_softmax", back)


# ------------------------------------------------------------------- backward


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d root / d leaf into ``.grad`` of every leaf requiring gradients."""
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo(root)
    grads = {root.id: np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg).reshape(parent.shape)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


# ----------------------------------------------------------------- parameters


class ParamStore:
    """Named leaf tensors with fixed shapes."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=float), requires_grad=True)
        t.op = f"param:{name}"
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=self._params[name].value.dtype)
        if value.shape != self._params[name].shape:
            raise ShapeError(f"parameter {name}: shape {value.shape} != {self._params[name].shape}")
        self._params[name].value = value.copy()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (n, t.grad if t.grad is not None else np.zeros_like(t.value)) for n, t in self._params.items()
        )

    def values(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.value) for n, t in self._params.items())

    def n_values(self) -> int:
        return int(np.sum([t.value.size for t in self._params.values()]))

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore()
        for n, t in self._params.items():
            out.add(n, t.value)
            if dtype is not None:
                out[n].value = t.value.astype(dtype)
        return out


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: Tensor, b: Tensor,
              fused: bool = False) -> tuple[Tensor, Tensor]:
    """One LSTM step; ``w`` is (in + hidden, 4 * hidden) with gate order i, f, g, o.

    The default builds the cell from primitives. ``fused=True`` records a
    single node with a hand-written backward (same values, far fewer graph
    entries); the network uses it for speed.
    """
    x, h_prev, c_prev = tensor(x), tensor(h_prev), tensor(c_prev)
    hidden = h_prev.shape[-1]
    if w.shape != (x.shape[-1] + hidden, 4 * hidden) or b.shape[-1] != 4 * hidden:
        raise ShapeError(
            f"lstm_cell: input {x.shape}, hidden {h_prev.shape} incompatible with weights {w.shape}, bias {b.shape}"
        )
    if fused:
        return _lstm_fused(x, h_prev, c_prev, tensor(w), tensor(b), hidden)
    gates = add(matmul(concat([x, h_prev], axis=-1), w), b)
    i = sigmoid(gates[..., :hidden])
    f = sigmoid(gates[..., hidden : 2 * hidden])
    g = tanh(gates[..., 2 * hidden : 3 * hidden])
    o = sigmoid(gates[..., 3 * hidden :])
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def _lstm_fused(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: Tensor, b: Tensor, hidden: int):
    xh = np.concatenate([x.value, np.broadcast_to(h_prev.value, x.shape[:-1] + (hidden,))], axis=-1)
    z = xh @ w.value + b.value
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1 / (1 + e), e / (1 + e))
    i, f, o = sig[..., :hidden], sig[..., hidden : 2 * hidden], sig[..., 3 * hidden :]
    g = np.tanh(z[..., 2 * hidden : 3 * hidden])
    c = f * c_prev.value + i * g
    tc = np.tanh(c)
    h = o * tc

    def back(grad):
        gh, gc = grad[..., :hidden], grad[..., hidden:]
        dc = gc + gh * o * (1 - tc * tc)
        dz = np.concatenate(
            [dc * g * i * (1 - i), dc * c_prev.value * f * (1 - f), dc * i * (1 - g * g), gh * tc * o * (1 - o)],
            axis=-1,
        )
        dxh = dz @ w.value.T
        dz2 = dz.reshape(-1, 4 * hidden)
        dw = xh.reshape(-1, xh.shape[-1]).T @ dz2
        return (
            _unbroadcast(dxh[..., : x.shape[-1]], x.shape),
            _unbroadcast(dxh[..., x.shape[-1] :], h_prev.shape),
            _unbroadcast(dc * f, c_prev.shape),
            dw,
            dz2.sum(axis=0),
        )

    # h and c travel as one node so the cell costs a single graph entry
    packed = _node(np.concatenate([h, c], axis=-1), (x, h_prev, c_prev, w, b), "lstm_cell", back)
    return packed[..., :hidden], packed[..., hidden:]


def init_lstm(params: ParamStore, prefix: str, n_in: int, hidden: int, rng: np.random.Generator) -> None:
    params.add(f"{prefix}.w", xavier_uniform(rng, n_in + hidden, 4 * hidden))
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0  # forget gate
    params.add(f"{prefix}.b", bias)


class Adam:
    """Adam with bias correction. State is keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: dict[str, np.ndarray], frozen: Iterable[str] = ()) -> None:
        frozen = set(frozen)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, t in params.items():
            if name in frozen or name not in grads:
                continue
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m, v = np.zeros_like(t.value), np.zeros_like(t.value)
            if m.shape != t.shape:
                raise ShapeError(f"adam state for {name} has shape {m.shape}, parameter {t.shape}")
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            t.value = t.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: ParamStore, grads, state: Adam, lr: Optional[float] = None, beta1=None, beta2=None, eps=None) -> None:
    """Functional wrapper over :meth:`Adam.step` for callers that hold the state themselves."""
    if lr is not None:
        state.lr = lr
    if beta1 is not None:
        state.beta1 = beta1
    if beta2 is not None:
        state.beta2 = beta2
    if eps is not None:
        state.eps = eps
    state.step(params, grads)


# ----------------------------------------------------------------- checkpoints

MAGIC = b"GCKP"
VERSION = 1


def save_checkpoint(params: ParamStore, path) -> None:
    """Binary container: magic, version, count, then (name, shape, little-endian float64 data)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise SchemaError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        pos += 8 * size
    return out
