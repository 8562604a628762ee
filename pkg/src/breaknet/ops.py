"""Differentiable primitives.

Every op takes and returns :class:`~breaknet.tensor.Tensor` and registers a
backward closure.  Image tensors use the N x C x H x W layout.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_result

LEAKY_SLOPE = 0.01


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype if not isinstance(b, Tensor) else None)
    return a, b


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), "sub", back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), "mul", back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return make_result(a.data / b.data, (a, b), "div", back)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.dtype.type(c)
    return make_result(x.data * c, (x,), "scale", lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return make_result(y, (x,), "exp", lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(y), (x,), "sum", back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), "transpose",
                       lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ValueError(f"concat: rank mismatch {t.shape} vs {ref}")
        for d in range(len(ref)):
            if d != ax and t.shape[d] != ref[d]:
                raise ValueError(f"concat: dimension {d} mismatch ({t.shape[d]} vs {ref[d]})")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", back)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimension mismatch {a.shape[-1]} vs {b.shape[-2]}")

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(np.matmul(a.data, b.data), (a, b), "matmul", back)


def contract_tokens(a, b) -> Tensor:
    """``a^T b`` over the token axis of ... x T x d operands (result ... x d_a x d_b).

    Each entry is a canonical (sorted) sum over tokens, which makes the
    result invariant to any reordering of the tokens, bit for bit.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"contract_tokens: token axes differ {a.shape} vs {b.shape}")
    y = canonical_sum(a.data[..., :, :, None] * b.data[..., :, None, :], axis=-3)

    def back(g):
        return np.matmul(b.data, np.swapaxes(g, -1, -2)), np.matmul(a.data, g)

    return make_result(y, (a, b), "contract_tokens", back)


# -- convolution and pooling -------------------------------------------------

def _out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _tap(arr, i, j, stride, ho, wo):
    return arr[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with optional channel groups.

    ``groups == Cin`` gives a depthwise convolution; 1x1 kernels with
    ``groups == 1`` a pointwise one.  Both get dedicated fast paths.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be N x C x H x W, got rank {x.ndim}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be Cout x Cin/groups x kh x kw, got rank {weight.ndim}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups:
        raise ValueError(f"conv2d: input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ValueError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(f"conv2d: weight in-channels {cin_g} != input channels/groups {cin // groups}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if ho < 1:
        raise ValueError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if wo < 1:
        raise ValueError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = weight.data
    cout_g = cout // groups

    if kh == 1 and kw == 1 and groups == 1:
        kind = "pointwise"
        xs = _tap(xp, 0, 0, stride, ho, wo)
        xs2 = np.ascontiguousarray(xs).reshape(n, cin, ho * wo)
        out = np.matmul(wd[:, :, 0, 0], xs2).reshape(n, cout, ho, wo)
    elif groups == cin and cin_g == 1:
        kind = "depthwise"
        src = xp if cout_g == 1 else np.repeat(xp, cout_g, axis=1)
        out = np.zeros((n, cout, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _tap(src, i, j, stride, ho, wo) * wd[None, :, 0, i, j, None, None]
    else:
        kind = "general"
        out = np.zeros((n, cout, ho, wo), dtype=xp.dtype)
        for gi in range(groups):
            xg = xp[:, gi * cin_g:(gi + 1) * cin_g]
            wg = wd[gi * cout_g:(gi + 1) * cout_g]
            acc = out[:, gi * cout_g:(gi + 1) * cout_g]
            for i in range(kh):
                for j in range(kw):
                    acc += np.einsum("oc,nchw->nohw", wg[:, :, i, j], _tap(xg, i, j, stride, ho, wo),
                                     optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if kind == "pointwise":
            g2 = g.reshape(n, cout, ho * wo)
            if need_w:
                gw = np.einsum("noq,ncq->oc", g2, xs2, optimize=True).reshape(wd.shape)
            if need_x:
                gxs = np.matmul(wd[:, :, 0, 0].T, g2).reshape(n, cin, ho, wo)
                if stride == 1 and p == 0:
                    gx = gxs
                else:
                    gxp = np.zeros_like(xp)
                    _tap(gxp, 0, 0, stride, ho, wo)[...] = gxs
                    gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        elif kind == "depthwise":
            src = xp if cout_g == 1 else np.repeat(xp, cout_g, axis=1)
            gsrc = np.zeros_like(src) if need_x else None
            gw = np.zeros_like(wd) if need_w else None
            for i in range(kh):
                for j in range(kw):
                    if need_w:
                        gw[:, 0, i, j] = (g * _tap(src, i, j, stride, ho, wo)).sum(axis=(0, 2, 3))
                    if need_x:
                        _tap(gsrc, i, j, stride, ho, wo)[...] += g * wd[None, :, 0, i, j, None, None]
            if need_x:
                if cout_g > 1:
                    gsrc = gsrc.reshape(n, cin, cout_g, *gsrc.shape[2:]).sum(axis=2)
                gx = gsrc[:, :, p:p + h, p:p + w] if p else gsrc
        else:
            gxp = np.zeros_like(xp) if need_x else None
            gw = np.zeros_like(wd) if need_w else None
            for gi in range(groups):
                xg = xp[:, gi * cin_g:(gi + 1) * cin_g]
                wg = wd[gi * cout_g:(gi + 1) * cout_g]
                gg = g[:, gi * cout_g:(gi + 1) * cout_g]
                for i in range(kh):
                    for j in range(kw):
                        if need_w:
                            gw[gi * cout_g:(gi + 1) * cout_g, :, i, j] = np.einsum(
                                "nohw,nchw->oc", gg, _tap(xg, i, j, stride, ho, wo), optimize=True)
                        if need_x:
                            _tap(gxp[:, gi * cin_g:(gi + 1) * cin_g], i, j, stride, ho, wo)[...] += (
                                np.einsum("oc,nohw->nchw", wg[:, :, i, j], gg, optimize=True))
            if need_x:
                gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, f"conv2d_{kind}", back)


def avg_pool2d(x, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Window means; zero padding counts toward the divisor (kernel**2)."""
    x = as_tensor(x)
    if kernel < 1:
        raise ValueError("avg_pool2d: kernel must be >= 1")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"avg_pool2d: kernel {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    inv = xp.dtype.type(1.0 / (kernel * kernel))
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out += _tap(xp, i, j, stride, ho, wo)
    out *= inv

    def back(g):
        gs = g * inv
        gxp = np.zeros_like(xp)
        for i in range(kernel):
            for j in range(kernel):
                _tap(gxp, i, j, stride, ho, wo)[...] += gs
        return (gxp[:, :, p:p + h, p:p + w] if p else gxp,)

    return make_result(out, (x,), "avg_pool2d", back)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(src).astype(int), 0, n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(x, target_h: int, target_w: int) -> Tensor:
    """Resize H x W to target_h x target_w with align-corners bilinear weights."""
    x = as_tensor(x)
    if target_h < 1 or target_w < 1:
        raise ValueError("bilinear_upsample: target dims must be >= 1")
    if x.ndim != 4:
        raise ValueError(f"bilinear_upsample: expected N x C x H x W, got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (target_h, target_w):
        return make_result(x.data.copy(), (x,), "bilinear_upsample", lambda g: (g,))
    ah = interp_matrix(h, target_h, x.dtype)
    aw = interp_matrix(w, target_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def back(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_result(out, (x,), "bilinear_upsample", back)


# -- normalisation and nonlinearities ---------------------------------------

def canonical_sum(a: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` in sorted order, so permuting that axis cannot change a bit of the result.

    Terms are added one slice at a time; numpy's own pairwise reduction can
    vary with memory alignment, which would defeat the fixed order.
    """
    terms = np.sort(np.moveaxis(a, axis, 0), axis=0)
    acc = terms[0].copy()
    for t in terms[1:]:
        acc += t
    return np.expand_dims(acc, axis) if keepdims else acc


def softmax(x, axis: int = 1, canonical: bool = False) -> Tensor:
    """Softmax along ``axis``; ``canonical`` sums the denominator in sorted order."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / (canonical_sum(e, axis, keepdims=True) if canonical else e.sum(axis=axis, keepdims=True))

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), "softmax", back)


def _channel_view(v: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return v.reshape(shape)


def layer_norm(x, gamma, beta, eps: float = 1e-5, axis: int = 1) -> Tensor:
    """Normalise over ``axis`` (channels) independently at every position."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: gamma/beta must have length {c}")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    gv = _channel_view(gamma.data, x.ndim, axis)
    out = xhat * gv + _channel_view(beta.data, x.ndim, axis)
    red = tuple(d for d in range(x.ndim) if d != axis)

    def back(g):
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gv
            gx = inv_std * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return gx, gg, gb

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), "layer_norm", back)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over N, H, W.

    In training mode the batch statistics are used and the running
    buffers are updated in place (unbiased variance); in eval mode the
    running buffers are used as fixed statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma/beta must have length {c}")
    red = (0, 2, 3)
    gv = gamma.data[None, :, None, None]
    if training:
        if x.shape[0] < 1:
            raise ValueError("batch_norm: empty batch")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=red, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)[None, :, None, None]
        xhat = (x.data - running_mean.astype(x.dtype)[None, :, None, None]) * inv_std
    out = xhat * gv + beta.data[None, :, None, None]

    def back(g):
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gv
            if training:
                gx = inv_std * (dxhat - dxhat.mean(axis=red, keepdims=True)
                                - xhat * (dxhat * xhat).mean(axis=red, keepdims=True))
            else:
                gx = dxhat * inv_std
        return gx, gg, gb

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), "batch_norm", back)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    s = x.dtype.type(slope)
    out = np.where(pos, x.data, x.data * s)
    return make_result(out, (x,), "leaky_relu", lambda g: (np.where(pos, g, g * s),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out.astype(x.dtype, copy=False), (x,), "gelu", back)


def activation(x, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or not training."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return make_result(x.data * mask, (x,), "dropout", lambda g: (g * mask,))
