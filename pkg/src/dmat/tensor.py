"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the DMAT forward and backward passes are
provided. Every differentiable op records a node holding its parents and a
closure that maps the output gradient to input gradients. Nodes carry a
monotonically increasing sequence number, so sorting the nodes reachable from
a loss by that number in descending order replays the executed ops in
reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "DimensionError",
    "ContractError",
    "ParameterError",
    "Tensor",
    "GradTape",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "abs_",
    "relu",
    "tanh",
    "sigmoid",
    "silu",
    "softplus",
    "sum_",
    "mean",
    "reshape",
    "permute",
    "concat",
    "roll",
    "matmul",
    "softmax",
    "conv2d",
    "bilinear_upsample",
    "interp_matrix",
    "max_pool2d",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class ParameterError(ValueError):
    """A scalar argument is out of its admissible range."""


_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "parents", "backward_fn", "name")

    def __init__(self, parents, backward_fn, name):
        self.seq = next(_seq)
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """N-dimensional float array that can take part in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn, name)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class GradTape:
    """Reverse-ordered record of the ops reachable from a scalar loss.

    Built on demand by :func:`backward`; ``nodes`` lists ``(tensor, node)``
    pairs in reverse execution order, each exactly once.
    """

    def __init__(self, root: Tensor):
        seen: set[int] = set()
        entries: list[tuple[Tensor, _Node]] = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(t) in seen:
                continue
            seen.add(id(t))
            entries.append((t, node))
            stack.extend(p for p in node.parents if p.requires_grad)
        entries.sort(key=lambda e: e[1].seq, reverse=True)
        self.nodes = entries

    def __len__(self) -> int:
        return len(self.nodes)

    def op_names(self) -> list[str]:
        return [node.name for _, node in self.nodes]


def backward(loss: Tensor) -> GradTape:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    The recorded graph is released afterwards; a second call on the same
    loss raises :class:`ContractError`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    if loss._node is None and not loss.is_leaf:
        raise ContractError("graph already released")
    tape = GradTape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf:
        _accumulate(loss, grads[id(loss)])
        return tape
    for t, node in tape.nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                _accumulate(parent, pg)
            else:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    for t, _ in tape.nodes:
        t._node = None
        t.requires_grad = False
    return tape


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "data", None))
    b = _as_tensor(b, a.data)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data**exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), bw, "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs_(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid_np(a.data)
    out = a.data * s

    def bw(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make(out, (a,), bw, "silu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"permute axes {axes} do not match rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "permute")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _make(np.array(out), (a,), bw, "slice")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise DimensionError(f"concat: shapes {[x.shape for x in tensors]} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bw, "concat")


def roll(a: Tensor, shift, axis) -> Tensor:
    """Cyclic shift, as numpy.roll."""
    out = np.roll(a.data, shift, axis=axis)
    neg_shift = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return _make(out, (a,), lambda g: (np.roll(g, neg_shift, axis=axis),), "roll")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, N]``."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.data)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: a axis -1 has {a.shape[-1]}, b axis -2 has {b.shape[-2]}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} vs {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ParameterError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = as_strided(x, (n, ho, wo, c, k, k), (s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False)
    return view.reshape(n * ho * wo, c * k * k), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with square kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d channel axis mismatch: input axis 1 has {c}, weight axis 1 has {wc}")
    if kh != kw:
        raise DimensionError(f"conv2d needs square kernels, weight axes 2,3 are {kh},{kw}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ParameterError(f"bad stride {stride} / padding {padding}")
    k = kh
    if (h + 2 * padding - k) // stride + 1 < 1 or (w + 2 * padding - k) // stride + 1 < 1:
        raise DimensionError(f"conv2d output would be empty for input {h}x{w}, kernel {k}, padding {padding}")
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            hp, wp = h + 2 * padding, w + 2 * padding
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _interp_index(size: int, factor: int):
    dst = np.arange(size * factor, dtype=np.float64)
    src = np.maximum((dst + 0.5) / factor - 0.5, 0.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    return i0, i1, frac


def interp_matrix(size: int, factor: int) -> np.ndarray:
    """Dense ``(size*factor, size)`` linear interpolation operator (half-pixel centres)."""
    i0, i1, frac = _interp_index(size, factor)
    m = np.zeros((size * factor, size))
    rows = np.arange(size * factor)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _lerp_axis(x: np.ndarray, axis: int, factor: int) -> np.ndarray:
    i0, i1, frac = _interp_index(x.shape[axis], factor)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = -1
    frac = frac.astype(x.dtype).reshape(shape)
    # a + t*(b-a) keeps constants bit-exact
    return a + frac * (b - a)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear resize of NCHW input by an integer factor, align_corners=False."""
    if int(factor) != factor or factor < 1:
        raise ParameterError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample needs NCHW input, got {x.shape}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    h, w = x.shape[2], x.shape[3]
    out = _lerp_axis(_lerp_axis(x.data, 2, factor), 3, factor)

    def bw(g):
        mh = interp_matrix(h, factor).astype(g.dtype)
        mw = interp_matrix(w, factor).astype(g.dtype)
        return (mh.T @ g @ mw,)

    return _make(out, (x,), bw, "upsample")


def max_pool2d(x: np.ndarray, size: int) -> np.ndarray:
    """Non-overlapping max pooling of the last two axes (used on masks)."""
    *lead, h, w = x.shape
    if h % size or w % size:
        raise ParameterError(f"max_pool2d: {h}x{w} not divisible by {size}")
    return x.reshape(*lead, h // size, size, w // size, size).max(axis=(-3, -1))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-3,
    params: Sequence[Tensor] = (),
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between autodiff and central differences.

    ``f`` maps a tensor to a scalar tensor. The error for each coordinate is
    ``|analytic - numeric| / (|numeric| + 1e-8)``. ``params`` are extra
    leaves whose gradients are checked as well; ``max_coords`` subsamples
    coordinates per leaf (chosen with ``seed``) to bound the cost.
    """
    if eps <= 0:
        raise ParameterError("eps must be positive")
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    leaves = [xt, *params]
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    loss = f(xt)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = f(xt).data.item()
                flat[i] = orig - eps
                down = f(xt).data.item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
                worst = max(worst, float(err))
    return worst
