"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a backward rule.  Nodes receive a monotonically increasing
id at creation, so sorting the reachable subgraph by descending id yields a
valid reverse topological order; that ordering is the tape.

Broadcasting is deliberately limited to Python scalars against tensors.  Use
:func:`expand` and :func:`reshape` for everything else.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "GradientError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "precision",
    "get_default_dtype",
    "detect_anomaly",
    "tensor",
    "zeros",
    "ones",
    "backward",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "log_sigmoid",
    "leaky_relu",
    "relu",
    "clamp",
    "square",
    "sum",
    "mean",
    "reshape",
    "flatten",
    "transpose",
    "expand",
    "concat",
    "stack",
    "take",
    "pad2d",
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "avgpool2d",
    "softmax",
    "log_softmax",
    "custom_grad",
    "custom_op",
    "detach",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class GradientError(RuntimeError):
    """Backward pass was requested under an invalid contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while anomaly detection was enabled."""


_grad_enabled = True
_check_finite = False
_default_dtype: type = np.float32
_ids = itertools.count()


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the default floating dtype for new tensors (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    prev, _default_dtype = _default_dtype, dtype
    try:
        yield
    finally:
        _default_dtype = prev


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def detect_anomaly() -> Iterator[None]:
    """Raise :class:`NonFiniteError` as soon as any op yields NaN or Inf."""
    global _check_finite
    prev, _check_finite = _check_finite, True
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    """An n-dimensional float array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # np.require keeps 0-d input 0-d; ascontiguousarray would promote it to (1,)
        self.data: np.ndarray = np.require(data, dtype or _default_dtype, "C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.op = "leaf"

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GradientError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def detach(self):
        return detach(self)


class Parameter(Tensor):
    """A trainable leaf tensor.  ``name`` is filled in by the owning module."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.op = op
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# backward traversal
# ---------------------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad and p._id not in seen)
    return sorted(seen.values(), key=lambda n: n._id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Each recorded operation is visited exactly once.  Leaf gradients add to
    whatever is already stored, so call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent._id)
            pending[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _make(a.data - a.dtype.type(b), (a,), lambda g: (g,), "sub_scalar")
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scalar_mul(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # piecewise form keeps exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)
    return _make(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)), stable for large |x|."""
    x = a.data
    y = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return _make(y, (a,), lambda g: (g * _sigmoid_np(-x),), "log_sigmoid")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    scale = np.where(x >= 0, 1.0, slope).astype(x.dtype)
    return _make(x * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi].  Subgradient is 1 inside (boundary included), 0 outside."""
    x = a.data
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    mask = inside.astype(x.dtype)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2 * g * x,), "square")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def _bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scalar_mul(sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(y, (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a: Tensor, start: int = 1) -> Tensor:
    return reshape(a, a.shape[:start] + (-1,))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.require(a.data.transpose(axes), None, "C"), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat size-1 axes (and prepend leading axes) up to ``shape``."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0 or any(s != 1 and s != t for s, t in zip(a.shape, shape[lead:])):
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    src = a.shape
    summed = tuple(range(lead)) + tuple(lead + i for i, s in enumerate(src) if s == 1 and shape[lead + i] != 1)

    def _bw(g):
        return (g.sum(axis=summed, keepdims=True).reshape(src) if summed else g,)

    return _make(np.require(np.broadcast_to(a.data, shape), None, "C"), (a,), _bw, "expand")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {ax}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), _bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    for t in tensors[1:]:
        _check_same(tensors[0], t, "stack")
    ax = axis % (tensors[0].ndim + 1)

    def _bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=ax), tuple(tensors), _bw, "stack")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def take(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    shape = a.shape
    dtype = a.dtype
    basic = _is_basic_index(idx)

    def _bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.require(a.data[idx], None, "C"), (a,), _bw, "take")


def pad2d(a: Tensor, padding: int | tuple[int, int, int, int], value: float = 0.0) -> Tensor:
    """Constant-pad the last two axes; ``padding`` is (top, bottom, left, right)."""
    if isinstance(padding, int):
        padding = (padding,) * 4
    top, bottom, left, right = padding
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    H, W = a.shape[-2:]

    def _bw(g):
        return (g[..., top:top + H, left:left + W],)

    return _make(np.pad(a.data, widths, constant_values=value), (a,), _bw, "pad2d")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, dtype=a.dtype)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), _bw, "matmul")


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


# Every conv runs on one channel-first grid.  The input is laid out as planes of
# shape (Hq, Wq) per sample, flattened over the batch, so tap (i, j) is a single
# shifted slice.  With stride 1 neighbouring rows and samples share their zero
# padding; with stride s the padded input is split into s*s phase planes and tap
# (i, j) reads plane (i % s, j % s).  Grid cells past the valid outputs are junk:
# cropped in the forward pass, zero in gradients.

class _Grid:
    def __init__(self, N: int, hw: tuple[int, int], khw: tuple[int, int], stride: int, padding: int):
        s, p = stride, padding
        self.N, (self.H, self.W), (self.kh, self.kw), self.s, self.p = N, hw, khw, s, p
        Hp, Wp = self.H + 2 * p, self.W + 2 * p
        self.Ho, self.Wo = (Hp - self.kh) // s + 1, (Wp - self.kw) // s + 1
        if s == 1:
            # p zero rows/columns after each sample/row double as the next one's leading padding
            self.Hq = max(self.H + p, self.Ho)
            self.Wq = max(self.W + p, self.Wo)
            self.lead = p * self.Wq + p
            self.taps = [(i, j, 0, 0, i * self.Wq + j) for i in range(self.kh) for j in range(self.kw)]
        else:
            self.Hq, self.Wq = -(-Hp // s), -(-Wp // s)
            self.lead = 0
            self.taps = [(i, j, i % s, j % s, (i // s) * self.Wq + j // s)
                         for i in range(self.kh) for j in range(self.kw)]
        self.L = N * self.Hq * self.Wq
        self.span = self.L + max(self.lead, max(t[4] for t in self.taps))

    def planes(self, x: np.ndarray) -> np.ndarray:
        """(N, C, H, W) -> (C, s, s, span)."""
        C, s, p = x.shape[1], self.s, self.p
        buf = np.zeros((C, s, s, self.span), dtype=x.dtype)
        if s == 1:
            grid = buf[:, 0, 0, self.lead:self.lead + self.L].reshape(C, self.N, self.Hq, self.Wq)
            grid[:, :, :self.H, :self.W] = x.transpose(1, 0, 2, 3)
            return buf
        full = np.zeros((C, self.N, self.Hq * s, self.Wq * s), dtype=x.dtype)
        full[:, :, p:p + self.H, p:p + self.W] = x.transpose(1, 0, 2, 3)
        phases = full.reshape(C, self.N, self.Hq, s, self.Wq, s).transpose(0, 3, 5, 1, 2, 4)
        buf[..., :self.L].reshape(C, s, s, self.N, self.Hq, self.Wq)[...] = phases
        return buf

    def unplanes(self, planes: np.ndarray) -> np.ndarray:
        """(C, s, s, span) -> (N, C, H, W), dropping the padding."""
        C, s, p = planes.shape[0], self.s, self.p
        if s == 1:
            grid = planes[:, 0, 0, self.lead:self.lead + self.L].reshape(C, self.N, self.Hq, self.Wq)
            return np.ascontiguousarray(grid[:, :, :self.H, :self.W].transpose(1, 0, 2, 3))
        buf = planes[..., :self.L].reshape(C, s, s, self.N, self.Hq, self.Wq).transpose(0, 3, 4, 1, 5, 2)
        buf = buf.reshape(C, self.N, self.Hq * s, self.Wq * s)[:, :, p:p + self.H, p:p + self.W]
        return np.ascontiguousarray(buf.transpose(1, 0, 2, 3))

    def cols(self, x: np.ndarray) -> np.ndarray:
        """(N, C, H, W) -> (C*kh*kw, L), rows ordered (c, i, j)."""
        planes, C, L = self.planes(x), x.shape[1], self.L
        out = np.empty((C, self.kh, self.kw, L), dtype=x.dtype)
        for i, j, r, rc, off in self.taps:
            out[:, i, j] = planes[:, r, rc, off:off + L]
        return out.reshape(C * self.kh * self.kw, L)

    def scatter(self, cols: np.ndarray, C: int) -> np.ndarray:
        """Adjoint of :meth:`cols`."""
        cols, L = cols.reshape(C, self.kh, self.kw, self.L), self.L
        planes = np.zeros((C, self.s, self.s, self.span), dtype=cols.dtype)
        for i, j, r, rc, off in self.taps:
            planes[:, r, rc, off:off + L] += cols[:, i, j]
        return self.unplanes(planes)

    def to_out(self, y: np.ndarray) -> np.ndarray:
        """(F, L) -> (N, F, Ho, Wo)."""
        y = y.reshape(y.shape[0], self.N, self.Hq, self.Wq)[:, :, :self.Ho, :self.Wo]
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))

    def from_out(self, g: np.ndarray) -> np.ndarray:
        """(N, F, Ho, Wo) -> (F, L), zero on the junk cells."""
        buf = np.zeros((g.shape[1], self.N, self.Hq, self.Wq), dtype=g.dtype)
        buf[:, :, :self.Ho, :self.Wo] = g.transpose(1, 0, 2, 3)
        return buf.reshape(g.shape[1], self.L)


def _conv_input_grad(g: np.ndarray, k: np.ndarray, stride: int, padding: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    grid = _Grid(g.shape[0], in_hw, k.shape[2:], stride, padding)
    return grid.scatter(k.reshape(k.shape[0], -1).T @ grid.from_out(g), k.shape[1])


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, stride: int, padding: int,
                      khw: tuple[int, int], cols: np.ndarray | None = None) -> np.ndarray:
    grid = _Grid(x.shape[0], x.shape[2:], khw, stride, padding)
    if cols is None:
        cols = grid.cols(x)
    return (grid.from_out(g) @ cols.T).reshape(g.shape[1], x.shape[1], *khw)


def _bias_bw(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (F,C,kh,kw)."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    H, W = x.shape[2:]
    kh, kw = kernel.shape[2:]
    Ho, Wo = _out_extent(H, kh, stride, padding), _out_extent(W, kw, stride, padding)
    if Ho < 1 or Wo < 1 or kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"conv2d: non-positive output extent for input {x.shape}, "
                         f"kernel {kernel.shape}, stride {stride}, padding {padding}")
    xd, kd = x.data, kernel.data
    grid = _Grid(x.shape[0], (H, W), (kh, kw), stride, padding)
    cols = grid.cols(xd)
    y = grid.to_out(kd.reshape(kd.shape[0], -1) @ cols)
    if not (_grad_enabled and kernel.requires_grad):
        cols = None
    if bias is not None:
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {kernel.shape[0]} filters")
        y += bias.data.reshape(1, -1, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        gx = _conv_input_grad(g, kd, stride, padding, (H, W)) if x.requires_grad else None
        gk = _conv_kernel_grad(xd, g, stride, padding, (kh, kw), cols) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, (_bias_bw(g) if bias.requires_grad else None)

    return _make(y, parents, _bw, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``kernel`` is (C_in, C_out, kh, kw)."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv_transpose2d: invalid stride={stride} padding={padding}")
    H, W = x.shape[2:]
    kh, kw = kernel.shape[2:]
    Ho = (H - 1) * stride - 2 * padding + kh
    Wo = (W - 1) * stride - 2 * padding + kw
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv_transpose2d: non-positive output extent for input {x.shape}, "
                         f"kernel {kernel.shape}, stride {stride}, padding {padding}")
    xd, kd = x.data, kernel.data
    y = _conv_input_grad(xd, kd, stride, padding, (Ho, Wo))
    if bias is not None:
        if bias.shape != (kernel.shape[1],):
            raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match {kernel.shape[1]} outputs")
        y += bias.data.reshape(1, -1, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bw(g):
        gx = gk = None
        if x.requires_grad or kernel.requires_grad:
            # both gradients read the same columns of g
            grid = _Grid(g.shape[0], (Ho, Wo), (kh, kw), stride, padding)
            cols = grid.cols(g)
            if x.requires_grad:
                gx = grid.to_out(kd.reshape(kd.shape[0], -1) @ cols)
            if kernel.requires_grad:
                gk = (grid.from_out(xd) @ cols.T).reshape(kd.shape)
        if bias is None:
            return gx, gk
        return gx, gk, (_bias_bw(g) if bias.requires_grad else None)

    return _make(y, parents, _bw, "conv_transpose2d")


def avgpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d expects N,C,H,W input, got {x.shape}")
    N, C, H, W = x.shape
    if window > H or window > W or (H - window) % stride or (W - window) % stride:
        raise ShapeError(f"avgpool2d: window {window} / stride {stride} does not tile {H}x{W}")
    Ho, Wo = (H - window) // stride + 1, (W - window) // stride + 1
    area = window * window
    xd = x.data
    if stride == window:
        # sum column pairs first, then row pairs of the half-width result
        cols = xd[..., 0::window] + xd[..., 1::window] if window > 1 else xd.copy()
        for j in range(2, window):
            cols += xd[..., j::window]
        y = cols[:, :, 0::window]
        for i in range(1, window):
            y = y + cols[:, :, i::window]
        y = np.ascontiguousarray(y) * xd.dtype.type(1.0 / area)

        def _bw(g):
            share = g * g.dtype.type(1.0 / area)
            return (np.repeat(np.repeat(share, window, axis=3), window, axis=2),)
    else:
        y = _windows(xd, window, window, stride).mean(axis=(4, 5))

        def _bw(g):
            gx = np.zeros_like(xd)
            share = g / area
            for i in range(window):
                for j in range(window):
                    gx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += share
            return (gx,)

    return _make(np.ascontiguousarray(y, dtype=xd.dtype), (x,), _bw, "avgpool2d")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (x,), _bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def _bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _make(y, (x,), _bw, "log_softmax")


# ---------------------------------------------------------------------------
# custom gradients
# ---------------------------------------------------------------------------

def custom_op(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], tuple], name: str) -> Tensor:
    """Record an op whose forward value is already computed.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    return _make(data, tuple(parents), backward_fn, name)


def custom_grad(forward: Callable[[np.ndarray], np.ndarray],
                backward: Callable[[np.ndarray], np.ndarray],
                name: str = "custom") -> Callable[[Tensor], Tensor]:
    """Build an elementwise op whose derivative is replaced by ``backward``.

    The returned op evaluates ``forward(x)``; in the backward pass the incoming
    gradient is multiplied by ``backward(x)`` evaluated at the forward input.
    """

    def op(x: Tensor) -> Tensor:
        xd = x.data
        y = np.asarray(forward(xd), dtype=xd.dtype)

        def _bw(g):
            return (g * np.asarray(backward(xd), dtype=xd.dtype),)

        return _make(y, (x,), _bw, name)

    op.__name__ = name
    return op
