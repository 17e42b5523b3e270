"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks the tape in reverse
topological order and accumulates into ``.grad`` of leaf tensors that
require gradients.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    # numpy should defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------ tape
    def tape(self) -> list["Tensor"]:
        """Topologically ordered list of tensors this one depends on (inputs first)."""
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self.tape()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shape mismatch {a.shape} vs {b.shape}")
    return mul(a, b)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), backward, "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), backward, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), backward, "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    out = np.clip(a.data, lo, hi)

    def backward(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _make(out, (a,), backward, "clip")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = a.data * mask

    def backward(g):
        return (g * mask,)

    return _make(out, (a,), backward, "relu")


# ---------------------------------------------------------------------- reductions / shape
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), backward, "transpose")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    xs = [_wrap(x) for x in xs]
    if not xs:
        raise DimensionError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(f"cannot concat {x.shape} with {ref}")
    out = np.concatenate([x.data for x in xs], axis=1)
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(out, xs, backward, "concat")


# ---------------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions are treated as a batch."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row maximum."""
    # row-major copy: the reductions then sum in the same order whether or
    # not the input is a transposed view
    out = np.array(x.data, order="C")
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = g - np.einsum("...i,...i->...", g, out)[..., None]
        gx *= out
        return (gx,)

    return _make(out, (x,), backward, "softmax")


# ---------------------------------------------------------------------- convolution
def _out_size(n: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (n + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _gather_patches(xp: np.ndarray, kh: int, kw: int, Ho: int, Wo: int, stride: int, dilation: int) -> np.ndarray:
    N, C = xp.shape[:2]
    cols = np.empty((N, C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            r, c = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r:r + stride * (Ho - 1) + 1:stride, c:c + stride * (Wo - 1) + 1:stride]
    return cols.reshape(N, C * kh * kw, Ho * Wo)


def _scatter_patches(dcols: np.ndarray, shape: tuple, kh: int, kw: int, Ho: int, Wo: int, stride: int,
                     dilation: int, padding: int) -> np.ndarray:
    N, C, H, W = shape
    dcols = dcols.reshape(N, C, kh, kw, Ho, Wo)
    gxp = np.zeros((N, C, H + 2 * padding, W + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            r, c = i * dilation, j * dilation
            gxp[:, :, r:r + stride * (Ho - 1) + 1:stride, c:c + stride * (Wo - 1) + 1:stride] += dcols[:, :, i, j]
    return gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp


# below this many output pixels the batch is folded into one GEMM
_FOLD_PIXELS = 256


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OCkk kernel (im2col + GEMM)."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d bias shape {b.shape} does not match {w.shape[0]} filters")
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = _out_size(H, kh, stride, padding, dilation)
    Wo = _out_size(W, kw, stride, padding, dilation)
    if Ho <= 0 or Wo <= 0:
        raise DimensionError("conv2d output would be empty")
    P = Ho * Wo
    K = C * kh * kw

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(N, C, P)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _gather_patches(xp, kh, kw, Ho, Wo, stride, dilation)
    fold = P < _FOLD_PIXELS and N > 1
    wmat = w.data.reshape(O, K)
    if fold:
        cols = cols.transpose(1, 0, 2).reshape(K, N * P)
        out = wmat @ cols
        if b is not None:
            out += b.data[:, None]
        out = out.reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3)
    else:
        out = np.matmul(wmat, cols)
        if b is not None:
            out += b.data[:, None]
        out = out.reshape(N, O, Ho, Wo)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if fold:
            gmat = g.transpose(1, 0, 2, 3).reshape(O, N * P)
            gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
            gb = gmat.sum(axis=1)
        else:
            gmat = g.reshape(N, O, P)
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
            gb = gmat.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            if fold:
                dcols = (wmat.T @ gmat).reshape(K, N, P).transpose(1, 0, 2)
            else:
                dcols = np.matmul(wmat.T, gmat)
            if pointwise:
                gx = dcols.reshape(N, C, H, W)
            else:
                gx = _scatter_patches(dcols, x.shape, kh, kw, Ho, Wo, stride, dilation, padding)
        if b is None:
            return gx, gw
        return gx, gw, gb

    return _make(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------- normalization / pooling
class BatchNormState:
    """Running statistics shared between train and eval mode."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor."""
    if x.ndim != 4 or x.shape[1] != gamma.shape[0] or beta.shape != gamma.shape:
        raise DimensionError(f"batch_norm: input {x.shape} vs gamma {gamma.shape}")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n == 0:
        raise DimensionError("batch_norm on an empty batch")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                gx = (inv[None, :, None, None] / n) * (
                    n * gxhat
                    - gxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                )
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: [N,C,H,W] -> [N,C,1,1]."""
    return mean(x, axis=(2, 3), keepdims=True)


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centers (align_corners=False), source index clamped at 0
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for d in range(n_out):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NCHW tensor with half-pixel centers."""
    if x.ndim != 4:
        raise DimensionError(f"upsample_bilinear expects NCHW, got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    mh = _bilinear_matrix(out_h, h)
    mw = _bilinear_matrix(out_w, w)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _make(out, (x,), backward, "upsample")


def l2_normalize_spatial(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel spatial L2 norm, sqrt(sum_hw x^2 + eps): [N,C,H,W] -> [N,C,1,1]."""
    return sqrt(tsum(x * x, axis=(2, 3), keepdims=True) + eps)


def channel_normalize(s: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale channel scalars to RMS one: s * sqrt(C) / sqrt(sum_c s^2 + eps)."""
    c = s.shape[1]
    denom = sqrt(tsum(s * s, axis=1, keepdims=True) + eps)
    return s * np.sqrt(c) / denom


def stack_batch(xs: Iterable[Tensor]) -> Tensor:
    """Concatenate along axis 0 (used to batch per-sample tensors)."""
    xs = list(xs)
    out = np.concatenate([x.data for x in xs], axis=0)
    splits = np.cumsum([x.shape[0] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    return _make(out, xs, backward, "stack")


def split_batch(x: Tensor, parts: int) -> list[Tensor]:
    """Inverse of ``stack_batch`` for equal-sized chunks along axis 0."""
    if x.shape[0] % parts:
        raise DimensionError(f"cannot split batch of {x.shape[0]} into {parts}")
    k = x.shape[0] // parts
    return [index_axis0(x, slice(i * k, (i + 1) * k)) for i in range(parts)]


def index_axis0(x: Tensor, sl: slice) -> Tensor:
    out = x.data[sl]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _make(out, (x,), backward, "slice")


def index_axis1(x: Tensor, i: int) -> Tensor:
    """x[:, i] for a tensor with at least two axes."""
    out = x.data[:, i]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, i] = g
        return (gx,)

    return _make(out, (x,), backward, "select")
