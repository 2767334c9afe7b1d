"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array together with a gradient slot and a
backward closure, forming one node of a per-step computation graph.  The op
set is exactly what the three-block network and its local objectives need:
elementwise arithmetic, matmul, reductions, reshapes, conv2d (grouped),
pooling, ReLU, non-affine batch norm, multi-copy dropout, a linear layer and
softmax cross-entropy.  Everything runs in float32 by default; float64 mode
(via :func:`use_dtype`) is meant for finite-difference gradient checks and
makes conv2d accumulate in a fixed summation order so its output is bitwise
comparable against a naive direct-convolution oracle.
"""

from __future__ import annotations

import contextlib
import ctypes
import os
from typing import Callable, Sequence

import numpy as np

from . import _kernels


def _tune_allocator():
    """Serve large allocations from the heap so freed blocks get reused.

    Training repeatedly allocates and frees 100MB-class arrays; with glibc's
    default mmap threshold every one round-trips through mmap/munmap and the
    page faults dominate the numeric kernels.  Set SFFC_NO_MALLOPT to skip.
    """
    if os.environ.get("SFFC_NO_MALLOPT"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:  # non-glibc platform
        pass


_tune_allocator()

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

# Column buffers above this many elements make conv2d process the batch in
# chunks; purely a peak-memory cap, identical results per fixed shape.
_COL_BUDGET = 1 << 25


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; ops inside return detached results."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def _as_array(data) -> np.ndarray:
    if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
        return np.asarray(data)
    return np.asarray(data, dtype=_DEFAULT_DTYPE)


class Tensor:
    """A value node: numpy payload, gradient slot, parents, backward rule.

    Graphs are acyclic by construction and single-use: :meth:`backward`
    releases intermediate state as it runs.  Leaf tensors (no parents) keep
    their accumulated ``grad`` across passes, which is what makes gradient
    accumulation over summed losses additive.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def assert_finite(self, what: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"{what} contains NaN or Inf")
        return self

    def detach(self) -> "Tensor":
        """A view of the same data with no parents and no gradient flow."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph mechanics ----------------------------------------------------

    def backward(self):
        """Reverse pass from a scalar node, accumulating into leaf grads."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                # single-use graph: drop closures and intermediate grads
                node._backward = None
                node._parents = ()
                if node is not self:
                    node.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Parameter:
    """A named, optionally trainable leaf tensor."""

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


class NumericError(RuntimeError):
    """NaN/Inf reached a place where only finite values are valid."""


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, pi = stack.pop()
        if pi == 0:
            s = state.get(id(node))
            if s == 2:
                continue
            if s == 1:
                raise ValueError("cycle detected in computation graph")
            state[id(node)] = 1
        if pi < len(node._parents):
            stack.append((node, pi + 1))
            stack.append((node._parents[pi], 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def reverse_pass(loss: Tensor):
    """Run the reverse pass from ``loss`` (alias for ``loss.backward()``)."""
    loss.backward()


# -- op construction helpers ------------------------------------------------


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False):
    """Add ``g`` into ``t.grad``.

    ``own=True`` promises that ``g`` is a freshly allocated array no other
    node will touch, letting the first accumulation adopt the buffer instead
    of copying.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if own and isinstance(g, np.ndarray) and g.dtype == t.data.dtype and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out axes that numpy broadcasting introduced or stretched."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise and reduction ops -------------------------------------------


def add(a, b) -> Tensor:
    # python scalars stay scalars so numpy's weak promotion keeps the dtype
    if isinstance(a, (int, float)):
        a, b = b, a
    if isinstance(b, (int, float)):
        a = _lift(a)
        out_data = a.data + b

        def bw_scalar(g):
            _accumulate(a, g)

        return _node(out_data, (a,), bw_scalar)
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    if isinstance(a, (int, float)):
        a, b = b, a
    if isinstance(b, (int, float)):
        a = _lift(a)
        out_data = a.data * b

        def bw_scalar(g):
            _accumulate(a, g * b, own=True)

        return _node(out_data, (a,), bw_scalar)
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape), own=True)
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape), own=True)

    return _node(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _lift(a)
        out_data = a.data / b

        def bw_scalar(g):
            _accumulate(a, g / b, own=True)

        return _node(out_data, (a,), bw_scalar)
    if isinstance(a, (int, float)):
        b = _lift(b)
        out_data = a / b.data

        def bw_num(g):
            _accumulate(b, -g * a / (b.data * b.data), own=True)

        return _node(out_data, (b,), bw_num)
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape), own=True)
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape), own=True)

    return _node(out_data, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    exponent = float(exponent)
    out_data = a.data ** exponent

    def bw(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0), own=True)

    return _node(out_data, (a,), bw)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def bw(g):
        _accumulate(a, g.reshape(old_shape))

    return _node(out_data, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out_data = a.data.transpose(axes)  # view; downstream ops copy if they must

    def bw(g):
        _accumulate(a, g.transpose(inverse))

    return _node(out_data, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.data.shape), own=True)
        _accumulate(b, _unbroadcast(gb, b.data.shape), own=True)

    return _node(out_data, (a, b), bw)


def trace_last2(a) -> Tensor:
    """Trace over the trailing two (square) axes."""
    a = _lift(a)
    k = a.data.shape[-1]
    if a.data.shape[-2] != k:
        raise ValueError("trace_last2 requires square trailing axes")
    out_data = np.trace(a.data, axis1=-2, axis2=-1)
    eye = np.eye(k, dtype=a.data.dtype)

    def bw(g):
        _accumulate(a, np.asarray(g)[..., None, None] * eye, own=True)

    return _node(out_data, (a,), bw)


def index_select0(a, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def bw(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accumulate(a, buf, own=True)

    return _node(out_data, (a,), bw)


def relu(a, inplace: bool = False) -> Tensor:
    """Elementwise max(0, x).  ``inplace`` may only be used when the caller
    owns the input buffer exclusively (e.g. a conv output it just created)."""
    a = _lift(a)
    if inplace:
        out_data = np.maximum(a.data, a.data.dtype.type(0), out=a.data)
    else:
        out_data = np.maximum(a.data, a.data.dtype.type(0))

    def bw(g):
        # x > 0 iff out > 0 (the x == 0 boundary gets zero gradient either way)
        _accumulate(a, g * (out_data > 0), own=True)

    return _node(out_data, (a,), bw)


# -- convolution --------------------------------------------------------------


def _pad_spatial(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    b, c, h, w = x.shape
    if value == 0.0:
        out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    else:
        out = np.full((b, c, h + 2 * padding, w + 2 * padding), value, dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[B,C,Hp,Wp] -> [B, C*kh*kw, oh*ow] with (c, kh, kw) ordered rows."""
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, padding, oh, ow) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to image grads."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xg = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xg[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    if padding:
        xg = xg[:, :, padding:-padding, padding:-padding]
    return xg


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {n + 2 * padding}")
    return span // stride + 1


def _grouped_gemm(w2d: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Contract [G,M,K] with [B,G,K,P] -> [B,G,M,P].

    In float64 the contraction runs as an ordered loop over K so every output
    element accumulates addends in ascending (channel, kh, kw) order, making
    the result bitwise reproducible against a naive direct convolution.
    """
    b, g, k, p = cols.shape
    m = w2d.shape[1]
    if cols.dtype == np.float64:
        out = np.zeros((b, g, m, p), dtype=np.float64)
        for kk in range(k):
            out += w2d[None, :, :, kk, None] * cols[:, :, None, kk, :]
        return out
    return np.matmul(w2d, cols)  # [G,M,K] x [B,G,K,P] -> [B,G,M,P]


def conv2d(x, w, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation, no bias, grouped when ``groups`` > 1."""
    x, w = _lift(x), _lift(w)
    b, cin, h, wdt = x.data.shape
    cout, cin_g, kh, kw = w.data.shape
    if cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide in/out channels ({cin}, {cout})")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects {cin_g} channels per group, input provides {cin // groups}")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(wdt, kw, stride, padding)
    m = cout // groups
    kdim = cin_g * kh * kw
    w2d = w.data.reshape(groups, m, kdim)
    p = oh * ow

    if _kernels.HAS_NUMBA and x.data.dtype == np.float32 and w.data.dtype == np.float32:
        xp = _pad_spatial(x.data, padding)
        out_data = np.zeros((b, cout, oh, ow), dtype=np.float32)
        if stride == 1 and kh == 3 and kw == 3:
            _kernels.conv2d_fwd_3x3(xp, w.data, groups, out_data)
        elif stride == 1 and kh == 5 and kw == 5:
            _kernels.conv2d_fwd_5x5(xp, w.data, groups, out_data)
        else:
            _kernels.conv2d_fwd(xp, w.data, stride, groups, out_data)

        def bw(g):
            gw = np.zeros_like(w.data)
            _kernels.conv2d_bwd_w(xp, np.ascontiguousarray(g), stride, groups, gw)
            _accumulate(w, gw, own=True)
            if x.requires_grad:
                gcols = np.matmul(np.swapaxes(w2d, -1, -2), g.reshape(b, groups, m, p))
                gx = _col2im(gcols.reshape(b, cin * kh * kw, p),
                             x.data.shape, kh, kw, stride, padding, oh, ow)
                _accumulate(x, gx, own=True)

        return _node(out_data, (x, w), bw)

    chunk = max(1, _COL_BUDGET // max(1, cin * kh * kw * p))
    saved_cols = []
    if chunk >= b:
        xp = _pad_spatial(x.data, padding)
        cols = _im2col(xp, kh, kw, stride, oh, ow).reshape(b, groups, kdim, p)
        out_data = _grouped_gemm(w2d, cols).reshape(b, cout, oh, ow)
        saved_cols.append(cols)
    else:
        out_data = np.empty((b, cout, oh, ow), dtype=np.result_type(x.data, w.data))
        for s in range(0, b, chunk):
            xp = _pad_spatial(x.data[s : s + chunk], padding)
            cols = _im2col(xp, kh, kw, stride, oh, ow)
            cols = cols.reshape(cols.shape[0], groups, kdim, p)
            out_data[s : s + chunk] = _grouped_gemm(w2d, cols).reshape(-1, cout, oh, ow)
            saved_cols.append(cols)

    def bw(g):
        gout = g.reshape(b, groups, m, p)
        gw = np.zeros((groups, m, kdim), dtype=w.data.dtype)
        need_gx = x.requires_grad
        gx = np.empty_like(x.data) if need_gx else None
        for i, s in enumerate(range(0, b, chunk)):
            cols = saved_cols[i]
            gchunk = gout[s : s + chunk]
            # dW[g] += sum_b dOut[b,g] @ cols[b,g]^T
            gw += np.einsum("bgmp,bgkp->gmk", gchunk, cols, optimize=True)
            if need_gx:
                gcols = np.matmul(np.swapaxes(w2d, -1, -2)[None], gchunk)  # [b,G,K,P]
                gx[s : s + chunk] = _col2im(
                    gcols.reshape(gcols.shape[0], cin * kh * kw, p),
                    (gcols.shape[0], cin, h, wdt), kh, kw, stride, padding, oh, ow,
                )
        _accumulate(w, gw.reshape(w.data.shape), own=True)
        if need_gx:
            _accumulate(x, gx, own=True)

    return _node(out_data, (x, w), bw)


# -- pooling ------------------------------------------------------------------


def _slice_reduce_max(x: np.ndarray, axis: int, group: int) -> np.ndarray:
    """Max over groups of ``group`` adjacent entries along ``axis``.

    Built from elementwise np.maximum over strided slices; numpy's reduction
    machinery is an order of magnitude slower on tiny trailing axes.
    """
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(0, None, group)
    out = x[tuple(sl)].copy()
    for t in range(1, group):
        sl[axis] = slice(t, None, group)
        np.maximum(out, x[tuple(sl)], out=out)
    return out


def _maxpool_fast(xp: np.ndarray, k: int, s: int, oh: int, ow: int):
    """k x k / stride s max pool via per-axis tile maxima (k % s == 0).

    Returns the pooled values and the horizontal-stage row maxima, which the
    backward pass needs to route gradients.
    """
    r = k // s
    tmax = _slice_reduce_max(xp, 3, s)
    hbest = tmax[..., :ow].copy()
    for t in range(1, r):
        np.maximum(hbest, tmax[..., t : t + ow], out=hbest)
    vmax = _slice_reduce_max(hbest, 2, s)
    out = vmax[:, :, :oh].copy()
    for t in range(1, r):
        np.maximum(out, vmax[:, :, t : t + oh], out=out)
    return out, hbest


def pool2d(x, mode: str, k: int, stride: int, padding: int = 0) -> Tensor:
    """Max or average pooling.

    Max routes gradient to the first maximal position per window (row-major
    first index on ties); average divides by the number of non-pad cells in
    each window and spreads the gradient uniformly over them.
    """
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pool mode {mode!r}")
    if k < 1:
        raise ValueError("pool window must be >= 1")
    if padding >= k:
        raise ValueError("pooling window covers only padding")
    x = _lift(x)
    b, c, h, w = x.data.shape
    oh = _conv_out_size(h, k, stride, padding)
    ow = _conv_out_size(w, k, stride, padding)
    dt = x.data.dtype
    hp, wp = h + 2 * padding, w + 2 * padding

    if mode == "max":
        if _kernels.HAS_NUMBA and dt == np.float32:
            xc = np.ascontiguousarray(x.data)
            out = np.empty((b, c, oh, ow), dtype=dt)
            _kernels.maxpool_fwd(xc, k, stride, padding, out)

            def bw_kernel(g):
                gx = np.zeros((b, c, h, w), dtype=dt)
                _kernels.maxpool_bwd(xc, out, np.ascontiguousarray(g), k, stride, padding, gx)
                _accumulate(x, gx, own=True)

            return _node(out, (x,), bw_kernel)
        xp = _pad_spatial(x.data, padding, value=-np.inf)
        fast = k % stride == 0 and hp % stride == 0 and wp % stride == 0
        if fast:
            out, hbest = _maxpool_fast(xp, k, stride, oh, ow)
        else:
            out = None
            for i in range(k):
                for j in range(k):
                    sl = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                    out = sl.copy() if out is None else np.maximum(out, sl, out=out)

        def _route(source, target_grad, upstream, axis):
            """Scatter ``upstream`` into ``target_grad`` at the first slice of
            ``source`` (along spatial ``axis``) equal to its window max."""
            eq = np.empty(upstream.shape, dtype=bool)
            free = np.ones(upstream.shape, dtype=bool)
            contrib = np.empty(upstream.shape, dtype=upstream.dtype)
            ref = out if axis == 2 else hbest
            n = oh if axis == 2 else ow
            sl = [slice(None)] * 4
            for t in range(k):
                sl[axis] = slice(t, t + stride * n, stride)
                np.equal(source[tuple(sl)], ref, out=eq)
                eq &= free
                free ^= eq  # eq is a subset of free, so xor clears exactly it
                np.multiply(upstream, eq, out=contrib)
                target_grad[tuple(sl)] += contrib

        def bw_fast(g):
            # route down, then across; first equality wins at each stage,
            # which reproduces row-major first-index argmax exactly
            ghb = np.zeros_like(hbest)
            _route(hbest, ghb, g, axis=2)
            gxp = np.zeros_like(xp)
            _route(xp, gxp, ghb, axis=3)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gxp, own=padding == 0)

        def bw_generic(g):
            gxp = np.zeros_like(xp)
            found = np.zeros(g.shape, dtype=bool)
            for i in range(k):
                for j in range(k):
                    sl = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                    eq = (sl == out) & ~found
                    found |= eq
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g * eq
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gxp, own=padding == 0)

        return _node(out, (x,), bw_fast if fast else bw_generic)

    # average pooling
    if padding == 0 and k == stride:
        crop = x.data[:, :, : oh * k, : ow * k]
        acc = crop[:, :, 0::k, 0::k].copy()
        for i in range(k):
            for j in range(k):
                if i or j:
                    acc += crop[:, :, i::k, j::k]
        out = acc * dt.type(1.0 / (k * k))

        def bw(g):
            gx = np.zeros_like(x.data)
            scaled = g * dt.type(1.0 / (k * k))
            for i in range(k):
                for j in range(k):
                    gx[:, :, i : oh * k : k, j : ow * k : k] = scaled
            _accumulate(x, gx, own=True)

        return _node(out, (x,), bw)

    xp = _pad_spatial(x.data, padding, value=0.0)
    acc = np.zeros((b, c, oh, ow), dtype=dt)
    cnt = np.zeros((1, 1, oh, ow), dtype=dt)
    ones = _pad_spatial(np.ones((1, 1, h, w), dtype=dt), padding, value=0.0)
    for i in range(k):
        for j in range(k):
            acc += xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cnt += ones[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    out = acc / cnt

    def bw(g):
        gxp = np.zeros((b, c, hp, wp), dtype=dt)
        gc = g / cnt
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gc
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        _accumulate(x, gxp)

    return _node(out, (x,), bw)


# -- batch norm ---------------------------------------------------------------


class BatchNormState:
    """Running per-channel statistics for a non-affine batch norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        dtype = dtype or _DEFAULT_DTYPE
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        other = BatchNormState(self.channels, self.momentum, self.eps, self.running_mean.dtype)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


def batchnorm2d(x, state: BatchNormState, mode: str = "train") -> Tensor:
    """Normalize [B,C,H,W] per channel; no learned affine parameters.

    Train mode uses batch statistics (biased variance) and updates running
    stats with the state's momentum; eval mode uses the running statistics.
    """
    x = _lift(x)
    b, c, h, w = x.data.shape
    if c != state.channels:
        raise ValueError(f"batch norm state has {state.channels} channels, input has {c}")
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        n = b * h * w
        unbiased = var * (n / max(1, n - 1))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    elif mode == "eval":
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.data.dtype)
    if mode == "eval":
        # fused x*a + b with one temporary
        shift = (-mean * inv_std).astype(x.data.dtype)
        xhat = x.data * inv_std[:, None, None]
        xhat += shift[:, None, None]
    else:
        xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]

    def bw(g):
        if mode == "eval":
            _accumulate(x, g * inv_std[:, None, None], own=True)
        else:
            gm = g.mean(axis=(0, 2, 3), keepdims=True)
            gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
            _accumulate(x, inv_std[:, None, None] * (g - gm - xhat * gxm), own=True)

    return _node(xhat.astype(x.data.dtype, copy=False), (x,), bw)


# -- dropout copies -----------------------------------------------------------


def dropout_copies(x, p: float, n_copies: int, rng: np.random.Generator | None = None,
                   mask: np.ndarray | None = None) -> Tensor:
    """Stack ``n_copies`` independently dropout-corrupted copies of a batch.

    Inverted dropout: survivors are scaled by 1/(1-p) so the expected copy
    equals the input.  The copy axis is inserted after the batch axis.  A
    precomputed boolean ``mask`` of shape [B, n_copies, ...] may be supplied
    instead of a generator (used for per-sample reproducible noise).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _lift(x)
    out_shape = (x.data.shape[0], n_copies) + x.data.shape[1:]
    if p == 0.0:
        scaled = np.ones(out_shape, dtype=x.data.dtype)
    else:
        if mask is None:
            if rng is None:
                raise ValueError("dropout_copies needs a generator or an explicit mask")
            mask = rng.random(out_shape) >= p
        elif mask.shape != out_shape:
            raise ValueError(f"mask shape {mask.shape} does not match {out_shape}")
        scaled = mask.astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - p))
    out_data = x.data[:, None] * scaled

    def bw(g):
        _accumulate(x, (g * scaled).sum(axis=1), own=True)

    return _node(out_data, (x,), bw)


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Plain inverted dropout used for classifier regularization."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _lift(x)
    if p == 0.0:
        return x
    scaled = (rng.random(x.data.shape) >= p).astype(x.data.dtype) * x.data.dtype.type(1.0 / (1.0 - p))
    out_data = x.data * scaled

    def bw(g):
        _accumulate(x, g * scaled, own=True)

    return _node(out_data, (x,), bw)


# -- linear layer and loss ------------------------------------------------------


def linear(x, w, b) -> Tensor:
    """y = x W^T + b with x:[B,Din], w:[Dout,Din], b:[Dout]."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.data.shape[-1] != w.data.shape[1]:
        raise ValueError(f"linear expects {w.data.shape[1]} input dims, got {x.data.shape[-1]}")
    out_data = x.data @ w.data.T + b.data

    def bw(g):
        _accumulate(x, g @ w.data, own=True)
        _accumulate(w, g.T @ x.data, own=True)
        _accumulate(b, g.sum(axis=0), own=True)

    return _node(out_data, (x, w, b), bw)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    logits = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.data.shape
    if labels.shape != (b,):
        raise ValueError(f"labels must have shape ({b},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(b), labels].mean()
    softmax = np.exp(logp)

    def bw(g):
        grad = softmax.copy()
        grad[np.arange(b), labels] -= 1.0
        _accumulate(logits, (float(g) / b) * grad, own=True)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


# -- gradient checking ----------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], p: Parameter, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` rebuilds the scalar loss from scratch (any randomness inside must be
    frozen).  Run under float64 for meaningful tolerances.
    """
    p.zero_grad()
    f().backward()
    analytic = p.tensor.grad.copy() if p.tensor.grad is not None else np.zeros_like(p.data)
    flat = p.tensor.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))
