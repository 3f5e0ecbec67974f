"""Minimal numpy-backed tensors with reverse-mode automatic differentiation.

Supplies exactly the operations the conditional U-Net and its losses need:
conv2d, group_norm, avg/max pooling, SiLU, softmax, (batched) matmul, a
handful of elementwise/reduction/shape ops, and an explicit broadcast_to.
Binary arithmetic requires matching shapes or a python scalar; everything
else goes through broadcast_to so the gradient surface stays small.

Training runs in float32; gradient checking promotes to float64.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TensorError(ValueError):
    """Shape/usage violation in a tensor operation."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


_grad_enabled = True
_check_finite = True
_scope: list[str] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (forward passes only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def scope(name):
    """Label a region of the forward pass for non-finite diagnostics."""
    _scope.append(name)
    try:
        yield
    finally:
        _scope.pop()


def set_check_finite(flag):
    global _check_finite
    prev = _check_finite
    _check_finite = bool(flag)
    return prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    @property
    def _tracked(self):
        return self.requires_grad or bool(self._parents)

    def detach(self):
        return Tensor(self.data)

    def _accum(self, g):
        # grad arrays are never mutated in place, so aliasing the first
        # contribution is safe and accumulation always allocates fresh
        if self.grad is None:
            self.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Populate .grad on every tracked ancestor of this scalar.

        Repeated calls without clearing .grad accumulate gradients.
        """
        if self.size != 1:
            raise TensorError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, iter(self._parents))]
        seen.add(id(self))
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if id(p) not in seen and p._tracked:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        for node in topo:
            if node._parents:  # leaves keep accumulating across backward calls
                node.grad = None
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_scalar_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_scalar_like(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_scalar_like(value, ref):
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _finite_or_raise(arr, op):
    # single-pass reduction: NaN/Inf propagate into the sum, so this is a
    # cheap full check (no boolean temporary) at float magnitudes we use
    if _check_finite and not np.isfinite(float(arr.sum())):
        where = "/".join(_scope) or "<top>"
        raise NonFiniteError(f"non-finite values produced by {op} in {where}")


def _make(data, parents, op):
    _finite_or_raise(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._bwd = None
    if _grad_enabled and any(p._tracked for p in parents):
        out._parents = tuple(parents)
    else:
        out._parents = ()
    return out


def _coerce(x, other=None):
    if isinstance(x, Tensor):
        return x
    dtype = other.dtype if other is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_check(a, b, op):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise TensorError(f"{op}: shapes {a.shape} and {b.shape} differ (only same-shape or scalar operands)")


def _reduce_to(g, shape):
    """Sum a gradient down to `shape` (used for scalar operands)."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape in ((), (1,)) else np.sum(g, axis=tuple(range(g.ndim - len(shape))), dtype=g.dtype).reshape(shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _binary_check(a, b, "add")
    out = _make(a.data + b.data, (a, b), "add")
    if out._parents:
        def bwd(g):
            if a._tracked:
                a._accum(_reduce_to(g, a.shape))
            if b._tracked:
                b._accum(_reduce_to(g, b.shape))
        out._bwd = bwd
    return out


def sub(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _binary_check(a, b, "sub")
    out = _make(a.data - b.data, (a, b), "sub")
    if out._parents:
        def bwd(g):
            if a._tracked:
                a._accum(_reduce_to(g, a.shape))
            if b._tracked:
                b._accum(-_reduce_to(g, b.shape))
        out._bwd = bwd
    return out


def mul(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _binary_check(a, b, "mul")
    out = _make(a.data * b.data, (a, b), "mul")
    if out._parents:
        def bwd(g):
            if a._tracked:
                a._accum(_reduce_to(g * b.data, a.shape))
            if b._tracked:
                b._accum(_reduce_to(g * a.data, b.shape))
        out._bwd = bwd
    return out


def div(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _binary_check(a, b, "div")
    out = _make(a.data / b.data, (a, b), "div")
    if out._parents:
        def bwd(g):
            if a._tracked:
                a._accum(_reduce_to(g / b.data, a.shape))
            if b._tracked:
                b._accum(_reduce_to(-g * a.data / (b.data * b.data), b.shape))
        out._bwd = bwd
    return out


def square(x):
    out = _make(x.data * x.data, (x,), "square")
    if out._parents:
        out._bwd = lambda g: x._accum(2.0 * x.data * g)
    return out


def sqrt(x):
    r = np.sqrt(x.data)
    out = _make(r, (x,), "sqrt")
    if out._parents:
        out._bwd = lambda g: x._accum(g / (2.0 * r))
    return out


def exp(x):
    e = np.exp(x.data)
    out = _make(e, (x,), "exp")
    if out._parents:
        out._bwd = lambda g: x._accum(g * e)
    return out


def log(x):
    out = _make(np.log(x.data), (x,), "log")
    if out._parents:
        out._bwd = lambda g: x._accum(g / x.data)
    return out


# -- reductions --------------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    out = _make(np.sum(x.data, axis=axis, keepdims=keepdims, dtype=x.dtype), (x,), "sum")
    if out._parents:
        def bwd(g):
            if axis is None:
                x._accum(np.broadcast_to(g.reshape((1,) * x.ndim), x.shape))
            else:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                gs = g if keepdims else np.expand_dims(g, axes)
                x._accum(np.broadcast_to(gs, x.shape))
        out._bwd = bwd
    return out


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation -------------------------------------------------------

def reshape(x, shape):
    out = _make(x.data.reshape(shape), (x,), "reshape")
    if out._parents:
        out._bwd = lambda g: x._accum(g.reshape(x.shape))
    return out


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _make(x.data.transpose(axes), (x,), "transpose")
    if out._parents:
        out._bwd = lambda g: x._accum(g.transpose(inv))
    return out


def broadcast_to(x, shape):
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise TensorError(f"broadcast_to: {x.shape} -> {shape}: {e}") from None
    out = _make(data, (x,), "broadcast_to")
    if out._parents:
        def bwd(g):
            extra = g.ndim - x.ndim
            if extra:
                g = g.sum(axis=tuple(range(extra)), dtype=g.dtype)
            keep = tuple(i for i, (sx, sg) in enumerate(zip(x.shape, g.shape)) if sx == 1 and sg != 1)
            if keep:
                g = g.sum(axis=keep, keepdims=True, dtype=g.dtype)
            x._accum(g)
        out._bwd = bwd
    return out


def concat(tensors, axis):
    tensors = list(tensors)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out._parents:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t._tracked:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t._accum(g[tuple(idx)])
        out._bwd = bwd
    return out


def split(x, sizes, axis):
    """Split along `axis` into consecutive chunks of the given sizes."""
    if sum(sizes) != x.shape[axis]:
        raise TensorError(f"split: sizes {sizes} do not cover axis {axis} of {x.shape}")
    outs = []
    offsets = np.cumsum([0] + list(sizes))
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(int(lo), int(hi))
        idx = tuple(idx)
        piece = _make(x.data[idx], (x,), "split")
        if piece._parents:
            def bwd(g, idx=idx):
                full = np.zeros(x.shape, dtype=g.dtype)
                full[idx] = g
                x._accum(full)
            piece._bwd = bwd
        outs.append(piece)
    return outs


# -- activations ---------------------------------------------------------------

def silu(x):
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = _make(x.data * s, (x,), "silu")
    if out._parents:
        del s  # recomputed in backward; cheaper than retaining per-activation copies

        def bwd(g):
            s = 1.0 / (1.0 + np.exp(-x.data))
            x._accum(g * (s * (1.0 + x.data * (1.0 - s))))
        out._bwd = bwd
    return out


def softmax(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise TensorError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = _make(y, (x,), "softmax")
    if out._parents:
        def bwd(g):
            dot = np.sum(g * y, axis=axis, keepdims=True)
            x._accum(y * (g - dot))
        out._bwd = bwd
    return out


def activation(x, kind, axis=-1):
    """Dispatch helper: kind is 'silu' or 'softmax_over_axis'."""
    if kind == "silu":
        return silu(x)
    if kind == "softmax_over_axis":
        return softmax(x, axis)
    raise TensorError(f"unknown activation kind {kind!r}")


# -- matmul ---------------------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise TensorError(f"matmul: incompatible ranks/batch dims {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out._parents:
        def bwd(g):
            if a._tracked:
                a._accum(g @ np.swapaxes(b.data, -1, -2))
            if b._tracked:
                b._accum(np.swapaxes(a.data, -1, -2) @ g)
        out._bwd = bwd
    return out


# -- padding helpers ---------------------------------------------------------


def _pad_amount(kernel, pad, op):
    if pad == "same":
        if kernel % 2 == 0:
            raise TensorError(f"{op}: 'same' padding requires an odd kernel, got {kernel}")
        return (kernel - 1) // 2
    if pad == "valid":
        return 0
    raise TensorError(f"{op}: pad must be 'same' or 'valid', got {pad!r}")


def _windows(padded, k, stride):
    # [N, C, Ho, Wo, k, k] view over the padded input
    w = sliding_window_view(padded, (k, k), axis=(2, 3))
    return w[:, :, ::stride, ::stride, :, :]


def _fold_edge_padding(gp, p):
    """Fold gradient mass in replicate-padding margins back onto the edges."""
    if p == 0:
        return gp
    gp[:, :, p, :] += gp[:, :, :p, :].sum(axis=2)
    gp[:, :, -p - 1, :] += gp[:, :, -p:, :].sum(axis=2)
    gp = gp[:, :, p:-p, :]
    gp[:, :, :, p] += gp[:, :, :, :p].sum(axis=3)
    gp[:, :, :, -p - 1] += gp[:, :, :, -p:].sum(axis=3)
    return gp[:, :, :, p:-p]


def _scatter_windows(gwin, in_shape, p, k, stride, mode):
    """Accumulate per-window gradients [N,C,Ho,Wo,k,k] back to the input."""
    n, c, h, w = in_shape
    gp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gwin.dtype)
    ho, wo = gwin.shape[2], gwin.shape[3]
    for i in range(k):
        for j in range(k):
            gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gwin[:, :, :, :, i, j]
    if p == 0:
        return gp
    if mode == "edge":
        return _fold_edge_padding(gp, p)
    return gp[:, :, p:-p, p:-p]


# -- conv2d ----------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, pad="same"):
    """Cross-correlation with zero padding; differentiable in x, w, b.

    Patches are gathered into an [N, C*k*k, Ho*Wo] matrix whose reshapes are
    all free (axis-aligned copies only), then contracted with BLAS.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise TensorError(f"conv2d: need 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if kh != kw:
        raise TensorError(f"conv2d: only square kernels, got {w.shape}")
    if c != cw:
        raise TensorError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    if b is not None and b.shape != (f,):
        raise TensorError(f"conv2d: bias shape {b.shape} does not match {f} filters")
    p = _pad_amount(kh, pad, "conv2d")
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho = (xp.shape[2] - kh) // s + 1
    wo = (xp.shape[3] - kw) // s + 1
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d: kernel {kh} too large for input {x.shape} with pad={pad}")
    # channels-first patch matrix [C*k*k, N*M]: the transpose is paid once on
    # an input-sized array, every patch copy is axis-aligned, and the whole
    # contraction is a single fat GEMM instead of N skinny ones
    def im2col_cn(src_cn):
        if kh == 1 and s == 1:
            return src_cn.reshape(c, n * ho * wo)
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=src_cn.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = src_cn[:, :, i:i + s * ho:s, j:j + s * wo:s]
        return cols.reshape(c * kh * kw, n * ho * wo)

    def pad_cn(arr):
        xcn = arr.transpose(1, 0, 2, 3)
        if p:
            return np.pad(xcn, ((0, 0), (0, 0), (p, p), (p, p)))
        return np.ascontiguousarray(xcn)

    xcn = pad_cn(x.data)
    cols2 = im2col_cn(xcn)
    w2 = w.data.reshape(f, c * kh * kw)
    out2 = w2 @ cols2  # [F, N*M]
    if b is not None:
        out2 += b.data[:, None]
    data = out2.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    parents = (x, w) if b is None else (x, w, b)
    out = _make(np.ascontiguousarray(data), parents, "conv2d")
    if out._parents:
        del cols2, xcn, data  # rebuilt in backward; retaining them per-conv is costly

        def bwd(g):
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
            if b is not None and b._tracked:
                b._accum(gt.sum(axis=1, dtype=g.dtype))
            if w._tracked:
                gw = gt @ im2col_cn(pad_cn(x.data)).T.astype(g.dtype, copy=False)
                w._accum(gw.reshape(f, c, kh, kw))
            if x._tracked:
                gcols = w2.T.astype(g.dtype, copy=False) @ gt
                if kh == 1 and s == 1 and p == 0:
                    gx = gcols.reshape(c, n, ho, wo)
                else:
                    gcols = gcols.reshape(c, kh, kw, n, ho, wo)
                    gx = np.zeros((c, n, h + 2 * p, wd + 2 * p), dtype=g.dtype)
                    for i in range(kh):
                        for j in range(kw):
                            gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j]
                    if p:
                        gx = gx[:, :, p:-p, p:-p]
                x._accum(gx.transpose(1, 0, 2, 3))
        out._bwd = bwd
    return out


# -- pooling -----------------------------------------------------------------------

def pool2d(x, kind, kernel, stride=1, pad="same"):
    """Window-wise mean or max.

    'same' padding replicates edges (keeps binary maps binary); max gradient
    routes to the first argmax element of each window.
    """
    if kind not in ("avg", "max"):
        raise TensorError(f"pool2d: kind must be 'avg' or 'max', got {kind!r}")
    if x.ndim != 4:
        raise TensorError(f"pool2d: need 4-d input, got {x.shape}")
    if kernel < 1:
        raise TensorError(f"pool2d: kernel must be >= 1, got {kernel}")
    p = _pad_amount(kernel, pad, "pool2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge") if p else x.data
    win = _windows(xp, kernel, stride)
    n, c, ho, wo = win.shape[:4]
    if ho < 1 or wo < 1:
        raise TensorError(f"pool2d: kernel {kernel} too large for input {x.shape} with pad={pad}")
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    if kind == "avg":
        data = flat.mean(axis=-1, dtype=x.dtype)
    else:
        idx = np.argmax(flat, axis=-1)  # first index on ties
        data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = _make(np.ascontiguousarray(data), (x,), "pool2d")
    if out._parents:
        if kind == "avg":
            def bwd(g):
                gwin = np.broadcast_to((g / (kernel * kernel))[..., None, None],
                                       (n, c, ho, wo, kernel, kernel))
                x._accum(_scatter_windows(gwin, x.shape, p, kernel, stride, "edge"))
        else:
            def bwd(g):
                gwin = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
                np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
                gwin = gwin.reshape(n, c, ho, wo, kernel, kernel)
                x._accum(_scatter_windows(gwin, x.shape, p, kernel, stride, "edge"))
        out._bwd = bwd
    return out


# -- group normalization ---------------------------------------------------------------

def group_norm(x, groups, eps=1e-5):
    """Per (sample, group) zero-mean unit-variance normalization, no affine."""
    if x.ndim != 4:
        raise TensorError(f"group_norm: need 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if eps <= 0:
        raise TensorError(f"group_norm: eps must be > 0, got {eps}")
    if groups < 1 or c % groups != 0:
        raise TensorError(f"group_norm: {c} channels not divisible by {groups} groups")
    m = (c // groups) * h * w
    xr = x.data.reshape(n, groups, m)
    mu = xr.mean(axis=-1, keepdims=True, dtype=x.dtype)
    xc = xr - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    y = xc * inv
    out = _make(y.reshape(n, c, h, w), (x,), "group_norm")
    if out._parents:
        ydata = out.data  # capture the array, not the Tensor (no reference cycle)
        del y, xc

        def bwd(g):
            yr = ydata.reshape(n, groups, m)
            gr = g.reshape(n, groups, m)
            gm = gr.mean(axis=-1, keepdims=True, dtype=g.dtype)
            gy = np.mean(gr * yr, axis=-1, keepdims=True, dtype=g.dtype)
            x._accum((inv * (gr - gm - yr * gy)).reshape(x.shape))
        out._bwd = bwd
    return out


# -- resampling --------------------------------------------------------------------------

def upsample_nearest2(x):
    """Nearest-neighbor 2x spatial upsampling."""
    if x.ndim != 4:
        raise TensorError(f"upsample_nearest2: need 4-d input, got {x.shape}")
    d = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    out = _make(d, (x,), "upsample_nearest2")
    if out._parents:
        n, c, h, w = x.shape

        def bwd(g):
            x._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=g.dtype))
        out._bwd = bwd
    return out


# -- gradient checking ---------------------------------------------------------------------

def gradcheck(fn, inputs, rtol=1e-4, h=1e-5, atol=1e-7):
    """Compare analytic gradients of scalar fn(*inputs) with central differences.

    Inputs are promoted to float64. Returns the worst relative error; raises
    AssertionError when any element violates |a - n| <= atol + rtol*|n|.
    """
    ts = [Tensor(np.asarray(i.data if isinstance(i, Tensor) else i, dtype=np.float64).copy(),
                 requires_grad=True) for i in inputs]
    out = fn(*ts)
    out.backward()
    worst = 0.0
    for t in ts:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(u.data) for u in ts]).item()
            flat[i] = orig - h
            fm = fn(*[Tensor(u.data) for u in ts]).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        err = np.abs(analytic - numeric)
        bound = atol + rtol * np.abs(numeric)
        if np.any(err > bound):
            k = int(np.argmax(err - bound))
            raise AssertionError(
                f"gradcheck failed: analytic {analytic.reshape(-1)[k]:.8g} vs numeric "
                f"{numeric.reshape(-1)[k]:.8g} (|diff| {err.reshape(-1)[k]:.3g})")
        denom = np.maximum(np.abs(numeric), 1.0)
        worst = max(worst, float(np.max(err / denom)))
    return worst
