"""Dense n-d arrays with tape-based reverse-mode differentiation.

Every op computes its result eagerly with numpy and, when any input needs a
gradient, appends a node to the calling thread's active :class:`Tape`.
``loss.backward()`` walks that tape once in reverse.

Pixel-space conventions used by the sampling ops: index ``i`` has its centre
at ``i + 0.5``; resizes use the align-corners-false mapping.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NaNError

_state = threading.local()

_DEFAULT_DTYPE = np.float64
# Test builds keep this on; it enables NaN and unit-norm contract checks.
STRICT = True

LAYERNORM_EPS = 1e-5
EPS = 1e-8


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_strict(flag: bool) -> None:
    global STRICT
    STRICT = bool(flag)


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


# --------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "parents", "backward", "generation", "tape")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.generation = 0
        self.tape = None


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Nodes are appended in execution order, so the list is already a
    topological order. After :meth:`backward` the tape is consumed: a second
    backward over the same pass raises, and the next recorded op starts a
    fresh pass.
    """

    def __init__(self, retain_grads: bool = True):
        self.nodes: list[_Node] = []
        self.generation = 0
        self.consumed = False
        # with retain_grads off, intermediate gradients and saved arrays are
        # released as soon as their node has been processed
        self.retain_grads = retain_grads

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    @staticmethod
    def current() -> "Tape":
        return _tape_stack()[-1]

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1
        self.consumed = False

    def record(self, node: _Node) -> None:
        if self.consumed:
            self.reset()
        node.generation = self.generation
        node.tape = self
        self.nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None:
            raise ContractError("backward() on a tensor that was not produced by a recorded op")
        if self.consumed or node.generation != self.generation:
            raise ContractError(
                "backward() already ran for this pass; run a new forward pass first"
            )
        loss.grad = np.ones_like(loss.data)
        nodes, self.nodes = self.nodes, []
        while nodes:
            nd = nodes.pop()
            g = nd.out.grad
            if g is not None:
                pgrads = nd.backward(g)
                for p, pg in zip(nd.parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    if p.grad is None:
                        p.grad = np.array(pg, dtype=p.data.dtype, copy=True).reshape(p.data.shape)
                    else:
                        p.grad = p.grad + pg
            if not self.retain_grads:
                nd.out.grad = None
                nd.backward = nd.parents = None
        self.consumed = True


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = [Tape()]
    return stack


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# --------------------------------------------------------------------------
# tensor


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=dtype or _DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None
        self.name = name

    # basic attributes -----------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def backward(self) -> None:
        if self._node is None:
            raise ContractError("backward() on a tensor that was not produced by a recorded op")
        self._node.tape.backward(self)

    # arithmetic -----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    # method forms ---------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        node = _Node(out, tuple(parents), backward)
        Tape.current().record(node)
        out._node = node
        out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _binary_operands(a, b):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    dtype = (ta if ta is not None else tb).data.dtype
    if ta is None:
        ta = Tensor(a, dtype=dtype)
    if tb is None:
        tb = Tensor(b, dtype=dtype)
    return ta, tb


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient passes where ``a > floor``."""
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def where(cond, a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _make(np.where(cond, a.data, b.data), (a, b), bw)


# --------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer)) for i in items)


def index(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for i in range(len(tensors)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


# --------------------------------------------------------------------------
# linear algebra and network primitives


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if STRICT and np.isnan(x.data).any():
        raise NaNError("softmax received NaN input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    c = x.shape[-1]
    if c < 2:
        raise DimensionError(f"layernorm needs at least 2 channels, got {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    y = _make(xhat, (x,), bw)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[C,H,W]`` or ``[N,C,H,W]``; ``weight`` is ``[O,C,kh,kw]``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"conv2d: input {x.shape} has {c} channels, kernel {weight.shape} expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {weight.shape}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {weight.shape} larger than padded input {(n, c, hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = _pad_hw(x.data, pad)

    def im2col():
        # [N, C*kh*kw, Ho*Wo], channel-major so products land in NCHW order
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)

    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, im2col())
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            # columns are rebuilt rather than kept: they are kh*kw times the input
            gw = np.matmul(g2, im2col().transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    y = _make(out, parents, bw)
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def resize_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` matrix for 1-D linear resampling.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to the valid index range.
    """
    m = np.zeros((n_out, n_in), dtype=dtype or _DEFAULT_DTYPE)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (align-corners-false)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: target extent must be positive, got {(out_h, out_w)}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = resize_matrix(h, out_h, x.dtype)
    rx = resize_matrix(w, out_w, x.dtype)
    out = ry @ x.data @ rx.T

    def bw(g):
        return (ry.T @ g @ rx,)

    return _make(out, (x,), bw)


def sample_bilinear(x: Tensor, px: np.ndarray, py: np.ndarray) -> Tensor:
    """Sample ``x[..., H, W]`` at continuous index coordinates ``(px, py)``.

    ``px``/``py`` are ``[H', W']`` arrays in index units (pixel centre of
    index ``i`` is ``i``). Taps outside the map contribute zero. Gradients
    flow to ``x`` only.
    """
    h, w = x.shape[-2:]
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    tx = (px - x0).astype(x.dtype)
    ty = (py - y0).astype(x.dtype)
    taps = []
    for dy, wy in ((0, 1.0 - ty), (1, ty)):
        for dx, wx in ((0, 1.0 - tx), (1, tx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            taps.append((np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1), wy * wx * inside))
    out = sum(x.data[..., yi, xi] * wgt for yi, xi, wgt in taps)

    def bw(g):
        lead = int(np.prod(x.shape[:-2], dtype=np.int64))
        hw = h * w
        rows = (np.arange(lead) * hw)[:, None]
        gflat = g.reshape(lead, -1)
        acc = np.zeros(lead * hw, dtype=x.dtype)
        for yi, xi, wgt in taps:
            lin = rows + (yi * w + xi).reshape(1, -1)
            acc += np.bincount(lin.ravel(), weights=(gflat * wgt.reshape(1, -1)).ravel(), minlength=lead * hw)
        return (acc.reshape(x.shape),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw)


# --------------------------------------------------------------------------
# utilities


def zeros(*shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(*shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, coords: Iterable[tuple], h: float = 1e-5) -> list[float]:
    """Central finite differences of scalar ``f()`` w.r.t. ``param`` entries."""
    out = []
    for c in coords:
        old = param.data[c]
        param.data[c] = old + h
        with no_grad():
            fp = float(f().data)
        param.data[c] = old - h
        with no_grad():
            fm = float(f().data)
        param.data[c] = old
        out.append((fp - fm) / (2 * h))
    return out


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], n_coords: int = 20,
                    rng: np.random.Generator | None = None, h: float = 1e-5) -> float:
    """Compare tape gradients of scalar ``f()`` with central differences.

    Samples ``n_coords`` coordinates across ``params`` and returns the worst
    relative error ``|a - n| / max(|a| + |n|, 1e-8)``.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
        loss.backward()
    sizes = np.array([p.size for p in params])
    picks = rng.choice(len(params), size=n_coords, p=sizes / sizes.sum())
    worst = 0.0
    for k in picks:
        p = params[k]
        c = np.unravel_index(rng.integers(p.size), p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[c])
        (numeric,) = numeric_gradient(f, p, [c], h)
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
