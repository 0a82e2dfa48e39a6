"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like) inputs and returns a
Tensor whose backward closure produces exact analytic gradients. Feature maps
are channels-last: ``(N, H, W, C)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .tensor import Tensor, as_tensor, is_relaxed, make

LN_EPS = 1e-6
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    pass


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = as_tensor(b)
    return _lift(a, b), b


def unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _pair(a, b)
    return make(a.data + b.data, (a, b),
                lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return make(a.data - b.data, (a, b),
                lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return make(a.data * b.data, (a, b),
                lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return unbroadcast(gb, a.shape), unbroadcast(-gb * out, b.shape)

    return make(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data ** exponent
    return make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a):
    a = as_tensor(a)
    return make(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return make(np.log(a.data), (a,), lambda g: (g / a.data,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a):
    a = as_tensor(a)
    out = special.expit(a.data)
    return make(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0, a.data).astype(a.dtype, copy=False)
    return make(out, (a,), lambda g: (g * special.expit(a.data),))


def gelu(a):
    """Exact GELU, ``x * Phi(x)``."""
    a = as_tensor(a)
    x = a.data
    cdf = special.ndtr(x)
    out = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI)
        return (g * (cdf + x * pdf),)

    return make(out, (a,), bw)


def ndtr(a):
    """Standard normal CDF."""
    a = as_tensor(a)
    x = a.data
    out = special.ndtr(x)
    return make(out, (a,), lambda g: (g * np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI),))


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return make(out, (a,), lambda g: (g * inside,))


def lower_bound(a, bound):
    """``max(a, bound)`` whose gradient still passes below the bound when it points upward."""
    a = as_tensor(a)
    out = np.maximum(a.data, a.dtype.type(bound))

    if is_relaxed():
        return make(out, (a,), lambda g: (g * (a.data >= bound),))

    def bw(g):
        return (g * ((a.data >= bound) | (g < 0)),)

    return make(out, (a,), bw)


def round_ste(a):
    """Round half away from zero forward; identity gradient backward."""
    a = as_tensor(a)
    if is_relaxed():
        return a
    return make(round_half_away(a.data), (a,), lambda g: (g,))


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def straight_through(hard, soft):
    """Forward value ``hard`` (an array), gradient of ``soft``."""
    soft = as_tensor(soft)
    if is_relaxed():
        return soft
    hard = np.asarray(hard, dtype=soft.dtype)
    return make(hard, (soft,), lambda g: (g,))


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / a.dtype.type(count), a.shape),)

    return make(np.asarray(out, dtype=a.dtype), (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make(np.array(out, copy=True), (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(out, tuple(tensors), bw)


def take_rows(a, index):
    """Gather rows ``a[index]`` of a 2-d tensor."""
    a = as_tensor(a)
    index = np.asarray(index)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make(a.data[index], (a,), bw)


def scatter_rows(n, parts):
    """Inverse of :func:`take_rows` for a disjoint cover of ``range(n)``.

    ``parts`` is a list of ``(index, tensor)``; each row of the output comes
    from exactly one part.
    """
    tensors = [as_tensor(t) for _, t in parts]
    width = tensors[0].shape[1:]
    out = np.empty((n,) + width, dtype=tensors[0].dtype)
    for (idx, _), t in zip(parts, tensors):
        out[idx] = t.data

    def bw(g):
        return tuple(g[idx] for idx, _ in parts)

    return make(out, tuple(tensors), bw)


def upsample_nearest(a, factor):
    a = as_tensor(a)
    out = a.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def bw(g):
        n, h, w, c = a.shape
        return (g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return make(out, (a,), bw)


# ---------------------------------------------------------------- layers

def _rowwise_matmul(x2, w):
    # OpenBLAS takes a gemv path for single rows whose rounding differs from
    # gemm; padding to two rows keeps results independent of the row count.
    if x2.shape[0] == 1:
        return (np.concatenate([x2, x2]) @ w)[:1]
    return x2 @ w


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input has {x.shape[-1]} channels, weight expects {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = _rowwise_matmul(x2, w.data)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make(out, parents, bw)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Normalize over the channel axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(out, (x, gamma, beta), bw)


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")
    return x, False


def _im2col(xp, k, stride, ho, wo):
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : (ho - 1) * stride + 1 : stride,
                                                        : (wo - 1) * stride + 1 : stride]
    # (N, Ho, Wo, C, k, k) -> (N*Ho*Wo, k*k*C)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * xp.shape[-1])


def _col2im(cols, shape_padded, k, stride, ho, wo):
    n, hp, wp, c = shape_padded
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros(shape_padded, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, :, i, j]
    return out


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _check_stride(shape, stride):
    if shape[1] % stride or shape[2] % stride:
        raise DimensionError(f"spatial extents {shape[1:3]} not divisible by stride {stride}")


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation with a ``(k, k, C_in, C_out)`` kernel, zero padding."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, squeeze = _batched(x.data)
    k, _, cin, cout = kernel.shape
    if xd.shape[-1] != cin:
        raise DimensionError(f"conv2d: input has {xd.shape[-1]} channels, kernel expects {cin}")
    _check_stride(xd.shape, stride)
    n, h, w, _ = xd.shape
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    cols = _im2col(xp, k, stride, ho, wo)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    if squeeze:
        out = out[0]

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            gp = _col2im(g2 @ kmat.T, xp.shape, k, stride, ho, wo)
            if padding:
                gp = gp[:, padding : padding + h, padding : padding + w]
            gx = gp[0] if squeeze else gp
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make(out, parents, bw)


def conv_transpose2d(x, kernel, bias=None, stride=1, padding=0):
    """Adjoint of :func:`conv2d`: upsamples ``(H, W)`` to ``(stride*H, stride*W)``.

    ``kernel`` has shape ``(k, k, C_out, C_in)``, i.e. the layout of the
    forward convolution it transposes.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, squeeze = _batched(x.data)
    k, _, cout, cin = kernel.shape
    if xd.shape[-1] != cin:
        raise DimensionError(f"conv_transpose2d: input has {xd.shape[-1]} channels, kernel expects {cin}")
    n, ho, wo, _ = xd.shape
    h, w = stride * ho, stride * wo
    if _conv_out(h, k, stride, padding) != ho or (ho - 1) * stride + k > h + 2 * padding:
        raise DimensionError(f"conv_transpose2d: kernel {k}/stride {stride}/padding {padding} cannot invert to {h}x{w}")
    padded = (n, h + 2 * padding, w + 2 * padding, cout)
    kmat = kernel.data.reshape(k * k * cout, cin)
    x2 = xd.reshape(-1, cin)
    out = _col2im(x2 @ kmat.T, padded, k, stride, ho, wo)
    if padding:
        out = out[:, padding : padding + h, padding : padding + w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gp = np.pad(gd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else gd
        cols = _im2col(gp, k, stride, ho, wo)
        gx = None
        if x.requires_grad:
            gx = (cols @ kmat).reshape(xd.shape)
            gx = gx[0] if squeeze else gx
        gk = (cols.T @ x2).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, gd.reshape(-1, cout).sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make(out, parents, bw)


def depthwise_conv2d(x, kernel, bias=None):
    """Per-channel ``k x k`` cross-correlation, stride 1, 'same' zero padding (odd ``k``)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, squeeze = _batched(x.data)
    k = kernel.shape[0]
    p = k // 2
    n, h, w, c = xd.shape
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros_like(xd)
    for i in range(k):
        for j in range(k):
            out += xp[:, i : i + h, j : j + w] * kernel.data[i, j]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gk = np.empty_like(kernel.data)
        gp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gk[i, j] = (xp[:, i : i + h, j : j + w] * gd).sum(axis=(0, 1, 2))
                gp[:, i : i + h, j : j + w] += gd * kernel.data[i, j]
        gx = gp[:, p : p + h, p : p + w]
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gk
        return gx, gk, gd.sum(axis=(0, 1, 2))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make(out, parents, bw)


# ---------------------------------------------------------------- losses

def log_softmax(logits, axis=-1):
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return make(out, (logits,),
                lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    The class axis is last; ``labels`` has the leading shape of ``logits``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    return neg(sum(mul(lp, onehot)) * logits.dtype.type(1.0 / labels.size))
