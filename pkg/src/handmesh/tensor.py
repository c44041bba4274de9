"""Dense tensors with reverse-mode autodiff on top of numpy.

Eager, single-tape, scalar objectives only. Every op records a closure that
maps the upstream gradient to gradients for its inputs; backward() toposorts
the graph, runs the closures, and frees the tape. No higher-order derivatives.

Default precision is float64. Training code can opt into float32 via
set_default_dtype / the precision() context manager.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache

import numpy as np


class TensorError(Exception):
    pass


class DimensionError(TensorError):
    """Shape mismatch between operands."""


class NumericError(TensorError):
    """NaN/Inf detected where finite values are required."""


class UsageError(TensorError):
    """API misuse (non-scalar backward, bad grad_check step, ...)."""


_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. float32 for training)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block. Forward values are unchanged."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor constructor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # fast path for op results: skips the finite check and dtype cast
    @staticmethod
    def _from_op(data, parents, backward):
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = parents
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

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

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() on non-scalar tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Run reverse-mode accumulation from a scalar output.

        Frees the tape as it goes: parents/closures and intermediate grads are
        dropped, only leaf tensors keep .grad.
        """
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar objective")
        # iterative postorder so deep graphs don't hit the recursion limit
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._parents = ()
                node._backward = None
                node.grad = None  # intermediates don't keep gradients

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g  # never in place: g may alias another node's grad


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    if not np.all(np.isfinite(out_data)):
        raise NumericError("division produced non-finite values")

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return Tensor._from_op(-a.data, (a,), bwd)


def power(a: Tensor, p) -> Tensor:
    p = float(p)
    with np.errstate(all="ignore"):
        out_data = a.data**p
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"pow({p}) produced non-finite values")

    def bwd(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return Tensor._from_op(out_data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)
    if not np.all(np.isfinite(out_data)):
        raise NumericError("sqrt of negative value")

    def bwd(g):
        _accum(a, g * (0.5 / out_data))

    return Tensor._from_op(out_data, (a,), bwd)


def sin(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g * np.cos(a.data))

    return Tensor._from_op(np.sin(a.data), (a,), bwd)


def cos(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g * np.sin(a.data))

    return Tensor._from_op(np.cos(a.data), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return Tensor._from_op(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise 1/(1+e^-x), computed branch-stably.

    Output is clipped into the open interval (0, 1): saturation in floating
    point would otherwise return exactly 0.0 or 1.0 for |x| beyond ~37 and
    break the strict-range guarantee downstream code relies on.
    """
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    fi = np.finfo(x.dtype)
    np.clip(out_data, fi.tiny, 1.0 - fi.epsneg, out=out_data)

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), bwd)


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select a where mask else b. mask is a constant ndarray, not a Tensor."""
    mask = np.asarray(mask, dtype=bool)
    if a.data.shape != b.data.shape or mask.shape != a.data.shape:
        raise DimensionError("where() requires equal shapes")
    out_data = np.where(mask, a.data, b.data)

    def bwd(g):
        _accum(a, g * mask)
        _accum(b, g * ~mask)

    return Tensor._from_op(out_data, (a, b), bwd)


# -- reductions ---------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return Tensor._from_op(out_data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / count)

    return Tensor._from_op(out_data, (a,), bwd)


# -- shape ops ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor._from_op(out_data, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")

    def bwd(g):
        _accum(a, g.T)

    return Tensor._from_op(np.ascontiguousarray(a.data.T), (a,), bwd)


def take(a: Tensor, key) -> Tensor:
    """Basic slicing/indexing; gradient scatters back into a zero buffer."""
    out_data = a.data[key]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data)
    else:
        out_data = out_data.copy()

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        _accum(a, buf)

    return Tensor._from_op(out_data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat of empty sequence")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return Tensor._from_op(out_data, tuple(tensors), bwd)


# -- linear algebra -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects matrices, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by row-max subtraction."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.data.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows on non-finite input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        # dx = y * (g - sum_j g_j y_j) per row
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accum(x, out_data * (g - dot))

    return Tensor._from_op(out_data, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of a matrix with a learned affine (gamma, beta)."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects a matrix, got {x.data.shape}")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError("layer_norm affine params must have shape (d,)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv  # (N, d) normalized
    out_data = xh * gamma.data + beta.data

    def bwd(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=0))
        if gamma.requires_grad:
            _accum(gamma, (g * xh).sum(axis=0))
        if x.requires_grad:
            dxh = g * gamma.data
            term = dxh - dxh.mean(axis=1, keepdims=True)
            term -= xh * (dxh * xh).mean(axis=1, keepdims=True)
            _accum(x, term * inv)

    return Tensor._from_op(out_data, (x, gamma, beta), bwd)


# -- convolution / pooling / resampling ---------------------------------


@lru_cache(maxsize=None)
def _conv_geometry(h, w, k, stride):
    pad = (k - 1) // 2
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    return pad, oh, ow


def _im2col(xp, k, stride, oh, ow):
    # xp: padded (hp, wp, c) -> (oh*ow, k*k*c) patch matrix
    hp_s, wp_s, c_s = xp.strides
    c = xp.shape[2]
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(oh, ow, k, k, c),
        strides=(stride * hp_s, stride * wp_s, hp_s, wp_s, c_s),
        writeable=False,
    )
    return view.reshape(oh * ow, k * k * c)


def conv2d(x: Tensor, w: Tensor, b=None, stride: int = 1) -> Tensor:
    """2-D convolution over an (h, w, c_in) map with an (k, k, c_in, c_out) kernel.

    Zero padding keeps "same" geometry: output is (ceil-free) h/stride for the
    odd kernel sizes used here. Implemented as im2col + one GEMM.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError("conv2d expects x:(h,w,ci), w:(k,k,ci,co)")
    h, wd, ci = x.data.shape
    k, k2, wci, co = w.data.shape
    if k != k2 or wci != ci:
        raise DimensionError(f"kernel {w.data.shape} incompatible with input {x.data.shape}")
    pad, oh, ow = _conv_geometry(h, wd, k, stride)
    if pad:
        xp = np.zeros((h + 2 * pad, wd + 2 * pad, ci), dtype=x.data.dtype)
        xp[pad : pad + h, pad : pad + wd] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, oh, ow)  # (oh*ow, k*k*ci)
    wmat = w.data.reshape(k * k * ci, co)
    out2 = cols @ wmat
    if b is not None:
        out2 = out2 + b.data
    out_data = out2.reshape(oh, ow, co)

    def bwd(g):
        gf = g.reshape(oh * ow, co)
        if b is not None and b.requires_grad:
            _accum(b, gf.sum(axis=0))
        if w.requires_grad:
            _accum(w, (cols.T @ gf).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (gf @ wmat.T).reshape(oh, ow, k, k, ci)
            dxp = np.zeros((h + 2 * pad, wd + 2 * pad, ci), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[i : i + oh * stride : stride, j : j + ow * stride : stride] += dcols[:, :, i, j]
            _accum(x, dxp[pad : pad + h, pad : pad + wd] if pad else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out_data, parents, bwd)


def pointwise_linear(x: Tensor, w: Tensor, b=None) -> Tensor:
    """1x1 convolution: per-position matmul over the channel axis.

    Accepts (h, w, ci) maps or (n, ci) token matrices.
    """
    xs = x.data.shape
    if w.data.ndim != 2 or xs[-1] != w.data.shape[0]:
        raise DimensionError(f"pointwise kernel {w.data.shape} vs input {xs}")
    ci, co = w.data.shape
    xf = x.data.reshape(-1, ci)
    out2 = xf @ w.data
    if b is not None:
        out2 = out2 + b.data
    out_data = out2.reshape(xs[:-1] + (co,))

    def bwd(g):
        gf = g.reshape(-1, co)
        if b is not None and b.requires_grad:
            _accum(b, gf.sum(axis=0))
        if w.requires_grad:
            _accum(w, xf.T @ gf)
        if x.requires_grad:
            _accum(x, (gf @ w.data.T).reshape(xs))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out_data, parents, bwd)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; k must divide both spatial dims."""
    if x.data.ndim != 3:
        raise DimensionError("avg_pool2d expects (h, w, c)")
    h, wd, c = x.data.shape
    if h % k or wd % k:
        raise DimensionError(f"pool size {k} does not divide {h}x{wd}")
    out_data = x.data.reshape(h // k, k, wd // k, k, c).mean(axis=(1, 3))

    def bwd(g):
        gx = np.repeat(np.repeat(g, k, axis=0), k, axis=1) / (k * k)
        _accum(x, gx)

    return Tensor._from_op(out_data, (x,), bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise DimensionError("upsample_nearest2x expects (h, w, c)")
    out_data = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

    def bwd(g):
        h, wd, c = x.data.shape
        _accum(x, g.reshape(h, 2, wd, 2, c).sum(axis=(1, 3)))

    return Tensor._from_op(out_data, (x,), bwd)


# -- verification -------------------------------------------------------


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Compare f's analytic gradient at x against central differences.

    f must map x to a scalar Tensor. Returns the max relative error with
    denominator max(|analytic|, |numeric|, 1e-8). x.data is perturbed in
    place during the sweep and restored afterwards.
    """
    if not (1e-7 <= h <= 1e-3):
        raise UsageError(f"step h={h} outside [1e-7, 1e-3]")
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise UsageError("grad_check needs a Tensor with requires_grad=True")
    x.grad = None
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise UsageError("objective must return a scalar Tensor")
    out.backward()
    if x.grad is None:
        raise UsageError("objective does not depend on x")
    analytic = np.array(x.grad, dtype=np.float64, copy=True).reshape(-1)
    flat = x.data.reshape(-1)
    fd = np.empty(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = float(f(x).data.reshape(()))
            flat[i] = keep - h
            fm = float(f(x).data.reshape(()))
            flat[i] = keep
            fd[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))
