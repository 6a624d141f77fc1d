"""Differentiable primitives.

Each function computes its forward value with numpy and registers a closure
returning the gradient for each parent.  Only the primitives the separation
network needs are provided; elementwise ops follow numpy broadcasting.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, record_macs


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor.make(a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor.make(a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return Tensor.make(a.data * b.data, (a, b),
                       lambda g: (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                                  unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor.make(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return Tensor.make(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor.make(out, (a,), lambda g: (g / (2 * out),))


def log(a: Tensor) -> Tensor:
    return Tensor.make(np.log(a.data), (a,), lambda g: (g / a.data,))


def log10(a: Tensor) -> Tensor:
    return Tensor.make(np.log10(a.data), (a,), lambda g: (g / (a.data * np.log(10.0)),))


def abs(a: Tensor) -> Tensor:
    return Tensor.make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def magnitude(re: Tensor, im: Tensor) -> Tensor:
    """Complex modulus sqrt(re^2 + im^2); the gradient at the origin is taken as zero."""
    out = np.hypot(re.data, im.data)
    safe = np.where(out > 0, out, 1)

    def backward(g):
        scale = np.where(out > 0, g / safe, 0)
        return scale * re.data, scale * im.data

    return Tensor.make(out, (re, im), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return Tensor.make(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.make(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                       lambda g: (g * mask,))


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """max(0, x) + slope * min(0, x); ``slope`` broadcasts against ``a``."""
    pos = a.data > 0
    neg_part = np.where(pos, 0, a.data).astype(a.dtype)
    out = np.where(pos, a.data, slope.data * a.data).astype(a.dtype)

    def backward(g):
        ga = g * np.where(pos, 1, slope.data) if a.requires_grad else None
        gs = unbroadcast(g * neg_part, slope.shape) if slope.requires_grad else None
        return ga, gs

    return Tensor.make(out, (a, slope), backward)


# -- reductions ------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor.make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axes, keepdims), np.asarray(1.0 / count, dtype=a.dtype))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.make(out, (a,), backward)


def standardize(a: Tensor, axes: Sequence[int], eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over ``axes`` (biased variance)."""
    axes = _norm_axes(tuple(axes), a.ndim)
    if any(a.shape[i] == 0 for i in axes) or not axes:
        raise ValueError("empty normalization region")
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return Tensor.make(xhat.astype(a.dtype), (a,), backward)


# -- shape manipulation ----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return Tensor.make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor.make(a.data[idx], (a,), backward)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    n = a.shape[axis]
    if indices.ndim == 1 and len(indices) == n and np.array_equal(np.sort(indices), np.arange(n)):
        inverse = np.argsort(indices)
        return Tensor.make(np.take(a.data, indices, axis=axis), (a,),
                           lambda g: (np.take(g, inverse, axis=axis),))

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor.make(np.take(a.data, indices, axis=axis), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor.make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    axis = axis % a.ndim
    if before == 0 and after == 0:
        return a
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + a.shape[axis])
    sl = tuple(sl)
    return Tensor.make(np.pad(a.data, widths), (a,), lambda g: (g[sl],))


def crop_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    return getitem(a, tuple(sl))


# -- linear ops (MAC-counted) ---------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading dimensions."""
    out = np.matmul(a.data, b.data)
    record_macs(out.size * a.shape[-1])

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.make(out, (a, b), backward)


def pointwise(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Kernel-1 convolution over channel axis 1 of ``x`` (any trailing dims).

    ``weight`` is (C_out, C_in); ``bias`` is (C_out,).
    """
    c_out, c_in = weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {c_in}")
    xm = np.moveaxis(x.data, 1, -1)
    lead = xm.shape[:-1]
    x2 = xm.reshape(-1, c_in)
    y2 = x2 @ weight.data.T
    if bias is not None:
        y2 = y2 + bias.data
    record_macs(y2.shape[0] * c_in * c_out)
    out = np.ascontiguousarray(np.moveaxis(y2.reshape(*lead, c_out), -1, 1))

    def backward(g):
        g2 = np.moveaxis(g, 1, -1).reshape(-1, c_out)
        gx = np.moveaxis((g2 @ weight.data).reshape(*lead, c_in), -1, 1) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.make(out, parents, backward)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, *,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 1-D convolution (cross-correlation) of ``x`` (M, C_in, L).

    ``weight`` is (C_out, C_in // groups, kernel).  Zero padding on both sides.
    """
    m, c_in, length = x.shape
    c_out, cpg, k = weight.shape
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if c_in % groups or c_out % groups or cpg != c_in // groups:
        raise ValueError(f"channel mismatch: input {c_in}, weight {weight.shape}, groups {groups}")
    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        return pointwise(x, reshape(weight, (c_out, c_in)), bias)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    lp = xp.shape[-1]
    l_out = (lp - k) // stride + 1
    if l_out < 1:
        raise ValueError("convolution output would be empty")
    span = stride * (l_out - 1) + 1
    record_macs(m * c_out * l_out * cpg * k)
    if cpg == 1 and c_out == c_in:
        out, backward = _depthwise(x, weight, bias, xp, k, stride, padding, l_out, span)
    else:
        out, backward = _grouped(x, weight, bias, xp, k, stride, padding, l_out, groups)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.make(out.astype(x.dtype, copy=False), parents, backward)


# -- resampling ---------------------------------------------------------------------

def _depthwise(x, weight, bias, xp, k, stride, padding, l_out, span):
    """One filter per channel: shift-and-add over the kernel taps."""
    w = weight.data[:, 0, :]
    taps = [xp[:, :, j:j + span:stride] for j in range(k)]
    out = taps[0] * w[:, 0, None]
    for j in range(1, k):
        out += taps[j] * w[:, j, None]
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.stack([np.einsum("mcl,mcl->c", g, t) for t in taps], axis=1)[:, None, :]
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j in range(k):
                gxp[:, :, j:j + span:stride] += g * w[:, j, None]
            gx = gxp[:, :, padding:padding + x.shape[-1]] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return out, backward


def _grouped(x, weight, bias, xp, k, stride, padding, l_out, groups):
    m, c_in, length = x.shape
    c_out, cpg, _ = weight.shape
    opg = c_out // groups
    lp = xp.shape[-1]
    win = sliding_window_view(xp, k, axis=-1)[:, :, ::stride][:, :, :l_out]
    win_g = win.reshape(m, groups, cpg, l_out, k)
    w_g = weight.data.reshape(groups, opg, cpg, k)
    out = np.einsum("mgilk,goik->mgol", win_g, w_g, optimize=True).reshape(m, c_out, l_out)
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        gg = g.reshape(m, groups, opg, l_out)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.einsum("mgol,mgilk->goik", gg, win_g, optimize=True).reshape(weight.shape)
        if x.requires_grad:
            gwin = np.einsum("mgol,goik->mgilk", gg, w_g, optimize=True).reshape(m, c_in, l_out, k)
            gxp = np.zeros((m, c_in, lp), dtype=g.dtype)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gxp[:, :, j:j + span:stride] += gwin[..., j]
            gx = gxp[:, :, padding:padding + length] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return out, backward


def avg_pool(a: Tensor, factor: int, axis: int = -1) -> Tensor:
    """Non-overlapping average pooling by ``factor`` along ``axis``."""
    axis = axis % a.ndim
    n = a.shape[axis]
    if factor == 1:
        return a
    if n % factor:
        raise ValueError(f"axis length {n} not divisible by pooling factor {factor}")
    shape = a.shape[:axis] + (n // factor, factor) + a.shape[axis + 1:]
    out = a.data.reshape(shape).mean(axis=axis + 1)

    def backward(g):
        return (np.repeat(g, factor, axis=axis) / factor,)

    return Tensor.make(out, (a,), backward)


def upsample_nearest(a: Tensor, factor: int, axis: int = -1) -> Tensor:
    """Nearest-neighbour upsampling by ``factor`` along ``axis``."""
    axis = axis % a.ndim
    if factor == 1:
        return a
    n = a.shape[axis]

    def backward(g):
        shape = g.shape[:axis] + (n, factor) + g.shape[axis + 1:]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return Tensor.make(np.repeat(a.data, factor, axis=axis), (a,), backward)
