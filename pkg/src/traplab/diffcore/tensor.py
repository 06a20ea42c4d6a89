"""Dense tensors with reverse-mode automatic differentiation.

Numpy-backed and CPU-only. Tensors store float32 by default; reductions
accumulate in float64 before casting back so batch losses stay stable.
float64 tensors are supported for oracle work (finite-difference checks).

Every operation validates its output for NaN/Inf and raises
``NonFiniteError`` so divergence surfaces at the op that produced it.
A computation graph is confined to one worker at a time; independent
graphs may run concurrently.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DiffError",
    "NonFiniteError",
    "Tensor",
    "set_finite_checks",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "log_sigmoid",
    "softmax_cross_entropy",
    "max_margin",
    "binary_cross_entropy_with_logits",
    "cosine_similarity",
    "matmul",
    "conv2d",
    "avg_pool2d",
    "max_pool2d",
    "gather_rows",
    "bilinear_sample",
    "concat",
]


class DiffError(Exception):
    """Invalid graph construction or use."""


class NonFiniteError(DiffError):
    """An operation produced NaN or Inf."""


_FINITE_CHECKS = True


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf validation. Returns the previous setting."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def _coerce(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """A dense float array plus an optional gradient buffer.

    ``requires_grad`` marks leaves (parameters, optimized latents).
    Calling :meth:`backward` on a scalar fills ``grad`` on every
    reachable tensor that requires it; repeated calls accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _coerce(data, dtype)
        if _FINITE_CHECKS and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''!r}")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

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

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if g.shape != self.data.shape:
            g = g.reshape(self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar into all reachable gradients."""
        if self.data.size != 1:
            raise DiffError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

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

    def flatten_batch(self):
        return reshape(self, (self.shape[0], -1))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), requires_grad=False)


def _result(data, parents, backward, name):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {name}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = name
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    def backward(g):
        a._accum(_unbroadcast(g / b.data, a.data.shape))
        b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a):
    def backward(g):
        a._accum(-g)

    return _result(-a.data, (a,), backward, "neg")


def power(a, exponent):
    exponent = float(exponent)

    def backward(g):
        a._accum(g * exponent * np.power(a.data, exponent - 1.0))

    return _result(np.power(a.data, exponent), (a,), backward, f"pow{exponent}")


# -- reductions (float64 accumulation) -------------------------------------


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.data.dtype)
    data = np.asarray(data)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _result(data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    data = a.data.mean(axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.data.dtype)
    data = np.asarray(data)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum((np.broadcast_to(g, a.data.shape) / count).astype(a.data.dtype))

    return _result(data, (a,), backward, "mean")


def reshape(a, shape):
    original = a.data.shape

    def backward(g):
        a._accum(g.reshape(original))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accum(g[tuple(index)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


# -- activations ------------------------------------------------------------


def relu(a):
    mask = a.data > 0  # subgradient at 0 is 0

    def backward(g):
        a._accum(g * mask)

    return _result(np.where(mask, a.data, 0), (a,), backward, "relu")


def leaky_relu(a, negative_slope=0.2):
    mask = a.data > 0

    def backward(g):
        a._accum(g * np.where(mask, 1.0, negative_slope).astype(a.data.dtype))

    return _result(np.where(mask, a.data, negative_slope * a.data), (a,), backward, "leaky_relu")


def tanh(a):
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), backward, "tanh")


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out_data = _sigmoid_np(a.data)

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), backward, "sigmoid")


def log_sigmoid(a):
    """log(sigmoid(x)), stable for large |x|."""
    x = a.data
    out_data = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid_np(x)

    def backward(g):
        a._accum(g * (1.0 - sig))

    return _result(out_data.astype(a.data.dtype), (a,), backward, "log_sigmoid")


# -- fused losses -----------------------------------------------------------


def _log_softmax_np(z):
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True, dtype=np.float64)).astype(z.dtype)
    return shifted - lse


def softmax_cross_entropy(logits, targets, reduction="mean"):
    """Cross-entropy between softmax(logits) and integer labels or a
    target distribution. Shift-invariant in the logits by construction."""
    z = logits.data
    if z.ndim != 2:
        raise DiffError("softmax_cross_entropy expects (batch, classes) logits")
    if z.shape[1] < 2:
        raise DiffError("softmax_cross_entropy needs at least 2 classes")
    logp = _log_softmax_np(z)
    p = np.exp(logp)
    targets_arr = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if targets_arr.ndim == 1:
        t = np.zeros_like(z)
        t[np.arange(z.shape[0]), targets_arr.astype(np.int64)] = 1.0
    else:
        t = targets_arr.astype(z.dtype)
    per = -(t * logp).sum(axis=1, dtype=np.float64).astype(z.dtype)
    batch = z.shape[0]

    if reduction == "none":
        def backward(g):
            logits._accum(g[:, None] * (p - t))

        return _result(per, (logits,), backward, "softmax_ce")
    if reduction != "mean":
        raise DiffError(f"unknown reduction {reduction!r}")
    value = np.asarray(per.mean(dtype=np.float64).astype(z.dtype))

    def backward(g):
        logits._accum(g * (p - t) / batch)

    return _result(value, (logits,), backward, "softmax_ce")


def max_margin(logits, labels, reduction="mean"):
    """Margin loss max_{j != y} z_j - z_y (ties resolved to the smallest
    competing index). Shift-invariant in the logits."""
    z = logits.data
    if z.ndim != 2 or z.shape[1] < 2:
        raise DiffError("max_margin expects (batch, classes) logits with >= 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, labels] = -np.inf
    best_other = masked.argmax(axis=1)
    per = z[rows, best_other] - z[rows, labels]
    batch = z.shape[0]

    def make_grad(scale):
        grad = np.zeros_like(z)
        np.add.at(grad, (rows, best_other), scale)
        np.add.at(grad, (rows, labels), -scale)
        return grad

    if reduction == "none":
        def backward(g):
            logits._accum(make_grad(g))

        return _result(per, (logits,), backward, "max_margin")
    if reduction != "mean":
        raise DiffError(f"unknown reduction {reduction!r}")
    value = np.asarray(per.mean(dtype=np.float64).astype(z.dtype))

    def backward(g):
        logits._accum(make_grad(np.full(batch, g / batch, dtype=z.dtype)))

    return _result(value, (logits,), backward, "max_margin")


def binary_cross_entropy_with_logits(logits, targets, reduction="mean"):
    """Stable BCE on raw logits; targets are probabilities in [0, 1]."""
    z = logits.data
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=z.dtype)
    t = np.broadcast_to(t, z.shape)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = _sigmoid_np(z)
    count = z.size

    if reduction == "none":
        def backward(g):
            logits._accum(g * (sig - t))

        return _result(per, (logits,), backward, "bce_logits")
    if reduction != "mean":
        raise DiffError(f"unknown reduction {reduction!r}")
    value = np.asarray(per.mean(dtype=np.float64).astype(z.dtype))

    def backward(g):
        logits._accum(g * (sig - t) / count)

    return _result(value, (logits,), backward, "bce_logits")


def cosine_similarity(a, b, eps=1e-12):
    """Row-wise cosine similarity of two (batch, dim) tensors."""
    xa, xb = a.data, b.data
    if xa.shape != xb.shape or xa.ndim != 2:
        raise DiffError("cosine_similarity expects matching (batch, dim) inputs")
    dot = (xa * xb).sum(axis=1)
    na = np.sqrt((xa * xa).sum(axis=1))
    nb = np.sqrt((xb * xb).sum(axis=1))
    na_safe = np.maximum(na, eps)
    nb_safe = np.maximum(nb, eps)
    cos = dot / (na_safe * nb_safe)

    def backward(g):
        g = g.reshape(-1, 1)
        ga = (xb / (na_safe * nb_safe)[:, None]) - (cos / (na_safe * na_safe))[:, None] * xa
        gb = (xa / (na_safe * nb_safe)[:, None]) - (cos / (nb_safe * nb_safe))[:, None] * xb
        a._accum((g * ga).astype(xa.dtype))
        b._accum((g * gb).astype(xb.dtype))

    return _result(cos.astype(xa.dtype), (a, b), backward, "cosine")


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DiffError("matmul supports 2-D operands only")

    def backward(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def gather_rows(a, indices):
    """Select rows a[indices]; gradients scatter-add back."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.min(initial=0) < 0 or (indices.size and indices.max() >= a.data.shape[0]):
        raise DiffError("gather_rows index out of range")

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, indices, g)
        a._accum(buf)

    return _result(a.data[indices], (a,), backward, "gather_rows")


# -- convolution and pooling ------------------------------------------------

_MAX_CONV_SPATIAL = 32
_MAX_CONV_CHANNELS = 64


def _im2col(xp, kh, kw, oh, ow, stride):
    b, _, _, cin = xp.shape
    cols = np.empty((b, oh, ow, kh, kw, cin), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :]
    return cols


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution on NHWC inputs with (kh, kw, cin, cout) weights.

    Desk-scale limits: spatial extent <= 32 and channel counts <= 64.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DiffError("conv2d expects NHWC input and (kh, kw, cin, cout) weights")
    bsz, h, wdt, cin = xd.shape
    kh, kw, wcin, cout = wd.shape
    if wcin != cin:
        raise DiffError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    if h > _MAX_CONV_SPATIAL or wdt > _MAX_CONV_SPATIAL:
        raise DiffError(f"conv2d spatial extent {h}x{wdt} exceeds supported {_MAX_CONV_SPATIAL}")
    if cin > _MAX_CONV_CHANNELS or cout > _MAX_CONV_CHANNELS:
        raise DiffError(f"conv2d channels exceed supported {_MAX_CONV_CHANNELS}")
    if padding:
        xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = xd
    ph, pw = xp.shape[1], xp.shape[2]
    oh = (ph - kh) // stride + 1
    ow = (pw - kw) // stride + 1
    cols = _im2col(xp, kh, kw, oh, ow, stride)
    cols2 = cols.reshape(bsz * oh * ow, kh * kw * cin)
    wmat = wd.reshape(kh * kw * cin, cout)
    out = cols2 @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(bsz, oh, ow, cout)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gflat = g.reshape(bsz * oh * ow, cout)
        w._accum((cols2.T @ gflat).reshape(wd.shape))
        if b is not None:
            b._accum(gflat.sum(axis=0, dtype=np.float64).astype(wd.dtype))
        dcols = (gflat @ wmat.T).reshape(bsz, oh, ow, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += dcols[:, :, :, i, j, :]
        if padding:
            dxp = dxp[:, padding:-padding, padding:-padding, :]
        x._accum(dxp)

    return _result(out, parents, backward, "conv2d")


def avg_pool2d(x, k=2):
    xd = x.data
    bsz, h, w, c = xd.shape
    if h % k or w % k:
        raise DiffError(f"avg_pool2d requires spatial dims divisible by {k}")
    blocks = xd.reshape(bsz, h // k, k, w // k, k, c)
    out = blocks.mean(axis=(2, 4), dtype=np.float64).astype(xd.dtype)

    def backward(g):
        g_exp = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        x._accum(g_exp.astype(xd.dtype))

    return _result(out, (x,), backward, "avg_pool2d")


def max_pool2d(x, k=2):
    xd = x.data
    bsz, h, w, c = xd.shape
    if h % k or w % k:
        raise DiffError(f"max_pool2d requires spatial dims divisible by {k}")
    blocks = xd.reshape(bsz, h // k, k, w // k, k, c).transpose(0, 1, 3, 5, 2, 4)
    flat = blocks.reshape(bsz, h // k, w // k, c, k * k)
    winners = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winners[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, winners[..., None], g[..., None], axis=-1)
        dblocks = dflat.reshape(bsz, h // k, w // k, c, k, k).transpose(0, 1, 4, 2, 5, 3)
        x._accum(dblocks.reshape(xd.shape))

    return _result(out, (x,), backward, "max_pool2d")


# -- bilinear grid sampling --------------------------------------------------


def bilinear_gather(xd, grid):
    """Sample NHWC array `xd` at fractional (row, col) coords in `grid`.

    Out-of-frame samples read as zero. Returns (out, corner_cache) where
    the cache holds (indices, weights) for the backward scatter.
    """
    bsz, h, w, c = xd.shape
    rows = grid[..., 0]
    cols = grid[..., 1]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    wr = (rows - r0).astype(xd.dtype)
    wc = (cols - c0).astype(xd.dtype)
    out = np.zeros((bsz,) + grid.shape[1:3] + (c,), dtype=xd.dtype)
    bidx = np.arange(bsz, dtype=np.int64)[:, None, None]
    bidx = np.broadcast_to(bidx, rows.shape)
    cache = []
    for dr, dc, weight in (
        (0, 0, (1 - wr) * (1 - wc)),
        (0, 1, (1 - wr) * wc),
        (1, 0, wr * (1 - wc)),
        (1, 1, wr * wc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        weight = np.where(inside, weight, 0).astype(xd.dtype)
        rr_safe = np.clip(rr, 0, h - 1)
        cc_safe = np.clip(cc, 0, w - 1)
        out += weight[..., None] * xd[bidx, rr_safe, cc_safe, :]
        cache.append((bidx, rr_safe, cc_safe, weight))
    return out, cache


def bilinear_sample(x, grid):
    """Differentiable bilinear sampling of an NHWC tensor at `grid` coords.

    `grid` is a constant (batch, out_h, out_w, 2) float array of source
    (row, col) pixel coordinates; gradients flow into `x` only.
    """
    grid = np.asarray(grid, dtype=np.float64)
    out, cache = bilinear_gather(x.data, grid)

    def backward(g):
        dx = np.zeros_like(x.data)
        for bidx, rr, cc, weight in cache:
            np.add.at(dx, (bidx, rr, cc), g * weight[..., None])
        x._accum(dx)

    return _result(out, (x,), backward, "bilinear_sample")
