"""A small reverse-mode autodiff layer over numpy arrays.

Enough to express the localization network and to check it against finite
differences. Gradients accumulate into leaf tensors' ``.grad`` across
``backward`` calls until :meth:`Adam.zero_grad` (or manual reset); each
``backward`` call propagates through the recorded graph exactly once, so a
graph may be backpropagated repeatedly.
"""
from __future__ import annotations

import contextlib
import math
import struct
from pathlib import Path

import numpy as np
from scipy.special import expit


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __array_ufunc__ = None  # make ndarray (op) Tensor dispatch to Tensor's reflected ops

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes)


class Parameter(Tensor):
    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _make(data, parents, backward_fn) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _bshape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _bshape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _bshape("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _bshape("div", a, b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / b.data ** 2, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    out = np.clip(x.data, lo, hi)
    return _make(out, (x,), lambda g: (g * ((x.data >= lo) & (x.data <= hi)),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


# -- linear algebra / reductions ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / n)


def max_(x: Tensor, axis: int = -1, keepdims=False) -> Tensor:
    """Maximum along one axis; ties route the gradient to the first maximum."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        if not keepdims:
            g = np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis)
        return (gx,)

    return _make(out, (x,), bw)


# -- shape ops -------------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeMismatch(f"broadcast_to: {x.shape} -> {tuple(shape)}") from None
    return _make(out.copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(xs, axis: int = -1) -> Tensor:
    xs = [_t(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(x.shape[k] != ref[k] for k in range(len(ref)) if k != ax):
            raise ShapeMismatch(f"concat along axis {axis}: shapes {ref} and {x.shape}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(xs, axis: int = 0) -> Tensor:
    xs = [_t(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):]) for x in xs]
    return concat(expanded, axis)


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(out), (x,), bw)


# -- backward ------------------------------------------------------------------------------

def _topo(root: Tensor):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, grad=None):
    """Reverse-mode accumulation of d(loss)/d(leaf) into each leaf's ``.grad``."""
    if grad is None:
        if loss.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    bufs = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(_topo(loss)):
        g = bufs.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            bufs[key] = pg if key not in bufs else bufs[key] + pg


# -- layers ---------------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Parameter container; names are dotted paths through child modules."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray, trainable: bool = True) -> Parameter:
        p = Parameter(value, name=name, trainable=trainable)
        self._params[name] = p
        return p

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {prefix + k: p for k, p in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.asarray(state[k], dtype=p.dtype).copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x @ W + b``; with ``stack`` the layer holds independent copies.

    A stacked layer has weight ``(*stack, n_in, n_out)`` and expects input
    ``(*stack, batch, n_in)``: slice ``k`` of the stack only ever sees slice
    ``k`` of the input.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, stack: tuple = (), dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out, self.stack = n_in, n_out, tuple(stack)
        self.weight = self.add_param("weight", xavier_uniform(rng, n_in, n_out, self.stack + (n_in, n_out)).astype(dtype))
        bshape = self.stack + (1, n_out) if self.stack else (n_out,)
        self.bias = self.add_param("bias", np.zeros(bshape, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"Linear expects last dim {self.n_in}, got input shape {x.shape}")
        return matmul(x, self.weight) + self.bias


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, None: lambda x: x, "linear": lambda x: x}


class MLP(Module):
    """Alternating linear / activation layers; the last layer is linear unless
    ``head_activation`` is given."""

    def __init__(self, dims, rng, activation="relu", head_activation=None, stack=(), dtype=np.float64):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.dims = tuple(dims)
        self.layers = [
            self.add_module(str(k), Linear(dims[k], dims[k + 1], rng, stack, dtype)) for k in range(len(dims) - 1)
        ]
        self.act = _ACTIVATIONS[activation]
        self.head_act = _ACTIVATIONS[head_activation]

    def __call__(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            x = self.act(x) if k < len(self.layers) - 1 else self.head_act(x)
        return x


def sinusoidal_positional_encoding(n_pos: int, d: int) -> np.ndarray:
    """Interleaved sine (even columns) / cosine (odd columns) encoding."""
    if d % 2:
        raise ValueError("positional encoding needs an even width")
    pos = np.arange(n_pos)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2) / d)[None, :]
    pe = np.zeros((n_pos, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model: int, heads: int, rng, dtype=np.float64):
        super().__init__()
        if d_model % heads:
            raise ShapeMismatch(f"d_model {d_model} not divisible by {heads} heads")
        self.d_model, self.heads = d_model, heads
        self.q = self.add_module("q", Linear(d_model, d_model, rng, dtype=dtype))
        self.k = self.add_module("k", Linear(d_model, d_model, rng, dtype=dtype))
        self.v = self.add_module("v", Linear(d_model, d_model, rng, dtype=dtype))
        self.out = self.add_module("out", Linear(d_model, d_model, rng, dtype=dtype))
        self.last_weights = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        x = reshape(x, tuple(lead) + (t, self.heads, d // self.heads))
        return swapaxes(x, -2, -3)  # (..., heads, T, dh)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[-1] != self.d_model:
            raise ShapeMismatch(f"attention expects (..., T, {self.d_model}), got {x.shape}")
        dh = self.d_model // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        w = softmax(scores, axis=-1)
        self.last_weights = w.data
        ctx = swapaxes(matmul(w, v), -2, -3)  # (..., T, heads, dh)
        ctx = reshape(ctx, ctx.shape[:-2] + (self.d_model,))
        return self.out(ctx)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the time axis: ``(..., T, d) -> (..., d)``."""
    return mean(x, axis=-2)


# -- optimiser --------------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params, state: dict | None = None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> dict:
    """Functional single Adam update; ``state`` carries moments between calls."""
    if state is None:
        state = {"opt": Adam(params, lr, beta1, beta2, eps)}
    state["opt"].step()
    return state


# -- checkpoints -------------------------------------------------------------------------------
#
#   magic    4 bytes  b"BLCK"
#   version  uint32   format version (1)
#   count    uint32   number of tensors
#   names    count x (uint16 byte length, utf-8 bytes)
#   shapes   count x (uint8 ndim, ndim x uint32)
#   payload  float32 little-endian, row-major, tensors in table order

CKPT_MAGIC = b"BLCK"
CKPT_VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray]):
    names = sorted(state)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(names))]
    for n in names:
        b = n.encode()
        parts.append(struct.pack("<H", len(b)) + b)
    for n in names:
        a = state[n]
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    for n in names:
        parts.append(np.ascontiguousarray(state[n], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    names = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        names.append(buf[off + 2 : off + 2 + n].decode())
        off += 2 + n
    shapes = []
    for _ in range(count):
        (nd,) = struct.unpack_from("<B", buf, off)
        shapes.append(struct.unpack_from(f"<{nd}I", buf, off + 1))
        off += 1 + 4 * nd
    state = {}
    for n, s in zip(names, shapes):
        size = int(np.prod(s))
        state[n] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(s).copy()
        off += 4 * size
    if off != len(buf):
        raise ValueError(f"{path}: payload size does not match header")
    return state
