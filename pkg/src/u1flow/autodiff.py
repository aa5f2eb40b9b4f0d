"""A small define-by-run reverse-mode autodiff engine over float64 arrays.

Each :class:`Tensor` produced by an operation on grad-requiring inputs keeps
references to its parents and a vector-Jacobian product closure. Calling
:func:`backward` (or :func:`grad`) linearizes the reachable graph into a
:class:`Tape` ordered by creation, runs it once in reverse, and releases the
saved intermediates, so a second backward over the same graph is an error.

Broadcasting follows numpy: shapes are aligned on trailing dimensions and
the VJP sums gradients back over broadcast axes.
"""
from __future__ import annotations

import functools
import itertools
import math
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from . import lattice

_counter = itertools.count()


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._seq = next(_counter)

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op}{flag})"

    # arithmetic sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None): return tsum(self, axis)
    def mean(self, axis=None): return mean(self, axis)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def primitive(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Register a custom op: ``vjp(g)`` returns one cotangent per parent."""
    return _make(data, [as_tensor(p) for p in parents], vjp, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


# ----------------------------------------------------------------- unary ops

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def expm1(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.expm1(a.data), (a,), lambda g: (g * np.exp(a.data),), "expm1")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log1p(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),), "log1p")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def tan(a) -> Tensor:
    a = as_tensor(a)
    out = np.tan(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 + out * out),), "tan")


def arctan(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),), "arctan")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def wrap(a) -> Tensor:
    """Shift angles by multiples of 2 pi into (-pi, pi]; the shift is piecewise constant."""
    a = as_tensor(a)
    return _make(lattice.wrap_angle(a.data), (a,), lambda g: (g,), "wrap")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape),)

    return _make(np.sum(a.data, axis=axes), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, axes), a.shape),)

    return _make(np.mean(a.data, axis=axes), (a,), vjp, "mean")


# ------------------------------------------------------------ shape plumbing

def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp, "getitem")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None
    n = len(ts)
    return _make(out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def roll(a, shift: int, axis: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.roll(a.data, shift, axis=axis), (a,), lambda g: (np.roll(g, -shift, axis=axis),), "roll")


# ----------------------------------------------------------- lattice kernels

def plaquettes(links) -> Tensor:
    """Unwrapped plaquette angles of a ``[..., 2, Lx, Ly]`` link tensor."""
    links = as_tensor(links)
    return _make(lattice.plaquette_field(links.data), (links,),
                 lambda g: (lattice.plaquette_vjp(g),), "plaquettes")


def wilson_action(links, beta: float) -> Tensor:
    """Wilson action per configuration; the VJP is the analytic lattice force."""
    links = as_tensor(links)
    xp = lattice.plaquette_field(links.data)
    out = beta * np.sum(1.0 - np.cos(xp), axis=(-2, -1))

    def vjp(g):
        # multiplying by a unit cotangent is exact, so a lone action reproduces
        # lattice.action_gradient bit for bit
        return (lattice.plaquette_vjp(np.sin(xp) * beta * np.asarray(g)[..., None, None]),)

    return _make(out, (links,), vjp, "wilson_action")


# --------------------------------------------------------------- convolution

@functools.lru_cache(maxsize=64)
def _gather_index(h: int, w: int, k: int) -> np.ndarray:
    """Flat indices ``[H*W, k*k]`` of each output site's periodic receptive field."""
    p = k // 2
    ih = (np.arange(h)[:, None, None, None] + np.arange(k)[None, None, :, None] - p) % h
    iw = (np.arange(w)[None, :, None, None] + np.arange(k)[None, None, None, :] - p) % w
    return (ih * w + iw).reshape(h * w, k * k)


@functools.lru_cache(maxsize=64)
def _batch_gather_index(b: int, h: int, w: int, k: int) -> np.ndarray:
    idx = _gather_index(h, w, k)
    return idx[None] + (h * w) * np.arange(b)[:, None, None]


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # channels-last x: [B, H, W, C] -> [B*H*W, k*k*C], column order (i, j, c);
    # a single leading fancy index keeps the gather C-contiguous
    b, h, w, c = x.shape
    return x.reshape(b * h * w, c)[_batch_gather_index(b, h, w, k)].reshape(b * h * w, k * k * c)


def _check_conv(x: Tensor, kernel: Tensor, bias: Tensor, c_axis: int) -> int:
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d_periodic: kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"conv2d_periodic: kernel size must be odd, got {k}")
    if x.ndim not in (3, 4) or x.shape[c_axis] != kernel.shape[1]:
        raise ShapeError(f"conv2d_periodic: input {x.shape} does not match kernel {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d_periodic: bias {bias.shape} does not match kernel {kernel.shape}")
    return k


def _conv_last(xd: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    """Channels-last periodic conv on ``[B, H, W, C]``; returns output and a VJP."""
    b, h, w, c_in = xd.shape
    c_out, _, k, _ = kernel.shape
    cols = _im2col(xd, k)
    kmat = kernel.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = (cols @ kmat.T + bias).reshape(b, h, w, c_out)

    def vjp(g):
        g2 = g.reshape(b * h * w, c_out)
        g_bias = g2.sum(axis=0)
        g_kernel = (g2.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        # transposed convolution = correlation of g with the flipped, channel-swapped kernel
        flipped = kernel[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c_in, -1)
        g_x = (_im2col(np.ascontiguousarray(g), k) @ flipped.T).reshape(b, h, w, c_in)
        return g_x, np.ascontiguousarray(g_kernel), g_bias

    return out, vjp


def conv2d_periodic(x, kernel, bias) -> Tensor:
    """Periodic 2D convolution, cross-correlation orientation.

    ``out[..., o, h, w] = b[o] + sum_{c,i,j} K[o, c, i, j] * x[..., c, (h+i-p) % H, (w+j-p) % W]``
    with ``p = k // 2``. ``x`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``, the
    kernel ``[C_out, C_in, k, k]`` with odd ``k``, the bias ``[C_out]``.
    The output has the same spatial size as the input.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    _check_conv(x, kernel, bias, -3)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    out, inner = _conv_last(np.ascontiguousarray(xd.transpose(0, 2, 3, 1)), kernel.data, bias.data)
    out = out.transpose(0, 3, 1, 2)

    def vjp(g):
        gb = g[None] if squeeze else g
        g_x, g_k, g_b = inner(gb.transpose(0, 2, 3, 1))
        g_x = g_x.transpose(0, 3, 1, 2)
        return (g_x[0] if squeeze else g_x, g_k, g_b)

    return _make(out[0] if squeeze else out, (x, kernel, bias), vjp, "conv2d_periodic")


def conv2d_periodic_last(x, kernel, bias) -> Tensor:
    """Same convolution on channels-last input ``[H, W, C_in]`` or ``[B, H, W, C_in]``."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    _check_conv(x, kernel, bias, -1)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    out, inner = _conv_last(np.ascontiguousarray(xd), kernel.data, bias.data)

    def vjp(g):
        g_x, g_k, g_b = inner(g[None] if squeeze else g)
        return (g_x[0] if squeeze else g_x, g_k, g_b)

    return _make(out[0] if squeeze else out, (x, kernel, bias), vjp, "conv2d_periodic")


# ------------------------------------------------------------------ backward

class Tape:
    """Creation-ordered record of every op reachable from a root node."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)


def grad(loss: Tensor, wrt: Iterable[Tensor], check_finite: bool = True) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to the leaves ``wrt``.

    Leaves the loss does not depend on get exact zeros. The graph is consumed.
    """
    wrt = list(wrt)
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return [np.zeros(w.shape) for w in wrt]
    if loss._op == "consumed":
        raise BackwardError("graph already consumed by a previous backward pass")
    tape = Tape.from_root(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if node._vjp is None:
            continue
        if g is None:
            g = np.zeros(node.shape)
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if check_finite and not math.isfinite(np.add.reduce(pg, axis=None)):
                raise NonFiniteGradientError(f"non-finite gradient produced by op '{node._op}'")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        if node is not loss:
            del grads[id(node)]
    for node in tape.nodes:
        if node._vjp is not None:
            node._vjp = None
            node._parents = ()
            node._op = "consumed"
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(np.zeros(w.shape) if g is None else np.array(g, dtype=np.float64))
    return out


class ParamStore:
    """Named parameters with a stable iteration order and gradient slots."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self.grads[name] = np.zeros(t.shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def values(self) -> dict[str, np.ndarray]:
        return OrderedDict((k, v.data) for k, v in self._params.items())

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self._params[name].shape:
                raise ShapeError(f"parameter {name!r}: expected {self._params[name].shape}, got {value.shape}")
            self._params[name].data = value.copy()

    def zero_grad(self) -> None:
        for name, t in self._params.items():
            self.grads[name] = np.zeros(t.shape)

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for t in self._params.values():
            n = t.size
            t.data = np.asarray(vec[i:i + n], dtype=np.float64).reshape(t.shape).copy()
            i += n

    def flat_grad(self) -> np.ndarray:
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_requires_grad(self, flag: bool) -> None:
        for t in self._params.values():
            t.requires_grad = flag

    def copy(self) -> "ParamStore":
        return ParamStore(OrderedDict((k, v.data.copy()) for k, v in self._params.items()))


def backward(loss: Tensor, params: ParamStore) -> ParamStore:
    """Populate ``params.grads`` with d loss / d param for every parameter."""
    names = params.names()
    grads = grad(loss, [params[n] for n in names])
    for n, g in zip(names, grads):
        params.grads[n] = g
    return params


def gradient_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5,
                   floor: float = 1e-8) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The relative error of component
    ``i`` is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``.
    """
    x0 = np.array(point, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    (analytic,) = grad(f(xt), [xt])
    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
