"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the codec model needs are provided. Every op records a
closure that maps the output gradient to parent gradients; the graph is
rebuilt on every forward pass and released after ``backward``.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_grad_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (e.g. double backward)."""


class NonFiniteError(FloatingPointError):
    """Raised when an op receives or produces NaN/Inf values."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_released", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._released = False
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- arithmetic sugar --------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    # -- differentiation ---------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.size != 1:
            raise GraphError(f"backward() needs a scalar, got shape {self.shape}")
        if self._released:
            raise GraphError("graph already released; run the forward pass again before backward()")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._released = True


class Parameter(Tensor):
    """Trainable leaf tensor, optionally clamped from below after each update."""

    __slots__ = ("lower_bound",)

    def __init__(self, data, lower_bound: float | None = None, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype or DEFAULT_DTYPE, name=name)
        self.lower_bound = lower_bound


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in input")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise & reductions ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(parts)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    xd = x.data
    _check_finite(xd, "gelu")
    cdf = 0.5 * (1.0 + erf(xd * (1.0 / math.sqrt(2.0))))
    cdf = cdf.astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * (1.0 / math.sqrt(2.0 * math.pi))
        return (g * (cdf + xd * pdf.astype(xd.dtype, copy=False)),)

    return _result(xd * cdf, (x,), backward)


# -- convolution -----------------------------------------------------------

def normalize_padding(padding) -> tuple[int, int, int, int]:
    """Return per-edge padding as (top, bottom, left, right)."""
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return (p, p, p, p)
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return (padding[0], padding[0], padding[1], padding[1])
    if len(padding) == 4:
        return padding  # type: ignore[return-value]
    raise ValueError(f"padding must be an int, 2-tuple or 4-tuple, got {padding!r}")


def conv_output_size(n: int, k: int, stride: int, pad_lo: int, pad_hi: int) -> int:
    return (n + pad_lo + pad_hi - k) // stride + 1


def conv_transpose_output_size(n: int, k: int, stride: int, pad_lo: int, pad_hi: int, output_padding: int = 0) -> int:
    return (n - 1) * stride - pad_lo - pad_hi + k + output_padding


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns laid out [C*kh*kw, N*ho*wo] so each kernel offset is one contiguous slab."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    hspan = (ho - 1) * stride + 1
    wspan = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + hspan : stride, j : j + wspan : stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int, kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add [C*kh*kw, N*ho*wo] columns back onto a [N, C, hp, wp] grid."""
    buf = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    hspan = (ho - 1) * stride + 1
    wspan = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + hspan : stride, j : j + wspan : stride] += cols6[:, i, j]
    return buf.transpose(1, 0, 2, 3)


def _channels_first(mat: np.ndarray, n: int, c: int, h: int, w: int) -> np.ndarray:
    """[C, N*h*w] matrix to a contiguous [N, C, h, w] array."""
    return np.ascontiguousarray(mat.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def _channels_major(arr: np.ndarray) -> np.ndarray:
    """[N, C, h, w] array to a [C, N*h*w] matrix."""
    return np.ascontiguousarray(arr.transpose(1, 0, 2, 3)).reshape(arr.shape[1], -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,kh,kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {ci}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    pt, pb, pl, pr = normalize_padding(padding)
    ho = conv_output_size(h, kh, stride, pt, pb)
    wo = conv_output_size(w, kw, stride, pl, pr)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    _check_finite(x.data, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    hp, wp = xp.shape[2:]
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _channels_first(out, n, o, ho, wo)

    def backward(g):
        gm = _channels_major(g)
        dx = dw = db = None
        if x.requires_grad:
            dxp = _col2im(wmat.T @ gm, n, c, hp, wp, kh, kw, stride, ho, wo)
            dx = np.ascontiguousarray(dxp[:, :, pt : pt + h, pl : pl + w])
        if weight.requires_grad:
            dw = (gm @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = gm.sum(axis=1)
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding=0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is [C_in, C_out, kh, kw].

    With identical kernel, stride and padding this is exactly the transpose of
    the linear map computed by ``conv2d`` (bias aside).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv_transpose2d: input has {c} channels but kernel expects {ci}")
    if stride < 1:
        raise ValueError("conv_transpose2d: stride must be >= 1")
    pt, pb, pl, pr = normalize_padding(padding)
    ho = conv_transpose_output_size(h, kh, stride, pt, pb, output_padding)
    wo = conv_transpose_output_size(w, kw, stride, pl, pr, output_padding)
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d: padding leaves an empty output")
    _check_finite(x.data, "conv_transpose2d")

    hf, wf = ho + pt + pb, wo + pl + pr
    xm = _channels_major(x.data)
    wmat = weight.data.reshape(c, -1)
    full = _col2im(wmat.T @ xm, n, o, hf, wf, kh, kw, stride, h, w)
    out = np.ascontiguousarray(full[:, :, pt : pt + ho, pl : pl + wo])
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gf = np.pad(g, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else g
        gcols = _im2col(gf, kh, kw, stride, h, w)
        dx = dw = db = None
        if x.requires_grad:
            dx = _channels_first(wmat @ gcols, n, c, h, w)
        if weight.requires_grad:
            dw = (xm @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# -- generalized divisive normalization --------------------------------------

def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """GDN ``x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``; IGDN multiplies instead."""
    n, c, h, w = x.shape
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ValueError(f"gdn: parameters shaped {beta.shape}/{gamma.shape} do not match {c} channels")
    _check_finite(x.data, "gdn")
    xf = x.data.reshape(n, c, h * w)
    x2 = xf * xf
    r = np.matmul(gamma.data, x2) + beta.data[:, None]
    if not (r > 0).all():
        raise NonFiniteError("gdn: normalization pool must be positive")
    root = np.sqrt(r)
    y = xf * root if inverse else xf / root

    def backward(g):
        gf = g.reshape(n, c, h * w)
        if inverse:
            a = gf * xf / root
            half = 0.5
            dx = gf * root + xf * np.matmul(gamma.data.T, a)
        else:
            a = gf * xf / (r * root)
            half = -0.5
            dx = gf / root - xf * np.matmul(gamma.data.T, a)
        dbeta = half * a.sum(axis=(0, 2)) if beta.requires_grad else None
        dgamma = half * np.matmul(a, x2.transpose(0, 2, 1)).sum(axis=0) if gamma.requires_grad else None
        return dx.reshape(n, c, h, w), dbeta, dgamma

    return _result(y.reshape(n, c, h, w), (x, beta, gamma), backward)


# -- quantization plumbing ---------------------------------------------------

def straight_through(z_e: Tensor, z_q) -> Tensor:
    """Forward value is exactly ``z_q``; the gradient passes to ``z_e`` unchanged."""
    zq = z_q.data if isinstance(z_q, Tensor) else np.asarray(z_q)
    if zq.shape != z_e.shape:
        raise ValueError(f"straight_through: shapes differ {z_e.shape} vs {zq.shape}")
    return _result(zq.astype(z_e.dtype, copy=True), (z_e,), lambda g: (g,))


def fft_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean over frequency bins of ``|F(x_hat) - F(x)|^2`` (unnormalized 2D DFT).

    Only ``x_hat`` receives a gradient.
    """
    h, w = x_hat.shape[-2:]
    for n in (h, w):
        if n < 1 or n & (n - 1):
            raise ValueError(f"fft_loss needs power-of-two extents, got {h}x{w}")
    d = x_hat.data.astype(np.float64) - x.data.astype(np.float64)
    spec = np.fft.fft2(d)
    bins = spec.size
    val = np.asarray((spec.real ** 2 + spec.imag ** 2).sum() / bins, dtype=x_hat.dtype)

    def backward(g):
        # F^H y = (h*w) * ifft2(y)
        grad = 2.0 * (h * w) / bins * np.fft.ifft2(spec).real
        return (None, (g * grad).astype(x_hat.dtype))

    return _result(val, (x, x_hat), backward)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
