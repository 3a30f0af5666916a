"""Differentiable operators over :class:`Tensor`.

Every op computes its forward value with numpy and hands a closure
computing input gradients to :func:`make_result`. Shapes follow the
channels-last convention, ``[..., H, W, C]``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .core import Tensor, as_tensor, make_result

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return make_result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)
    return make_result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g / (2.0 * out),))


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(a.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(a.dtype),)
    return make_result(out, (a,), backward)


def soft_clamp(a: Tensor, bound: float) -> Tensor:
    """bound * tanh(a / bound): smooth, odd, strictly inside (-bound, bound)."""
    t = np.tanh(a.data / bound)
    return make_result(bound * t, (a,), lambda g: (g * (1.0 - t * t),))


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_result(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return make_result(out, (a,), backward)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)
    return make_result(out, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return make_result(out, tensors, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return make_result(out, tensors, backward)


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    widths = tuple(tuple(w) for w in widths)
    out = np.pad(a.data, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_result(out, (a,), lambda g: (g[sl],))


def roll(a: Tensor, shift, axis) -> Tensor:
    out = np.roll(a.data, shift, axis=axis)
    back = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    return make_result(out, (a,), lambda g: (np.roll(g, back, axis=axis),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (broadcasting batch axes)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return make_result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias), weight stored as [in, out]."""
    y = matmul(x, weight) if x.ndim == 2 else _dense(x, weight)
    return y if bias is None else add(y, bias)


def _dense(x: Tensor, w: Tensor) -> Tensor:
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    return reshape(y, lead + (w.shape[-1],))


# ---------------------------------------------------------------- normalisation

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_result(out, (a,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg.reshape(gamma.shape), gb.reshape(beta.shape)
    return make_result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # xp: [B, Hp, Wp, C] -> [B, Ho, Wo, kh, kw, C]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. x: [H,W,Cin] or [B,H,W,Cin]; k: [kh,kw,Cin,Cout]."""
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise ValueError(f"conv2d shapes not understood: x {x.shape}, k {k.shape}")
    kh, kw, cin, cout = k.shape
    if xd.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {xd.shape[-1]}, kernel {cin}")
    b, h, w, _ = xd.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError("conv2d kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
    cols = _im2col(xp, kh, kw, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(b * ho * wo, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ kmat).reshape(b, ho, wo, cout)
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = g4.reshape(b * ho * wo, cout)
        gk = (cols2.T @ g2).reshape(k.shape)
        gcols = (g2 @ kmat.T).reshape(b, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, :, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        if squeeze:
            gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0).reshape(bias.shape))
        return grads
    inputs = (x, k) if bias is None else (x, k, bias)
    return make_result(out, inputs, backward)


# ---------------------------------------------------------------- sampling

def _bilinear_setup(h: int, w: int, coords: np.ndarray):
    y = np.clip(coords[..., 0], 0, h - 1)
    x = np.clip(coords[..., 1], 0, w - 1)
    y0 = np.clip(np.floor(y), 0, max(h - 2, 0)).astype(np.intp)
    x0 = np.clip(np.floor(x), 0, max(w - 2, 0)).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (y - y0).astype(coords.dtype)
    wx = (x - x0).astype(coords.dtype)
    inside_y = (coords[..., 0] >= 0) & (coords[..., 0] <= h - 1)
    inside_x = (coords[..., 1] >= 0) & (coords[..., 1] <= w - 1)
    return y0, y1, x0, x1, wy, wx, inside_y, inside_x


def bilinear_sample(f: Tensor, coords: Tensor) -> Tensor:
    """Sample f at real (y, x) coordinates, border-clamped.

    f: [H,W,C] with coords [P,2], or batched f: [B,H,W,C] with coords [B,P,2].
    Returns [P,C] or [B,P,C].
    """
    coords = as_tensor(coords, dtype=f.dtype)
    squeeze = f.ndim == 3
    fd = f.data[None] if squeeze else f.data
    cd = coords.data[None] if squeeze else coords.data
    if cd.shape[-1] != 2 or cd.shape[0] != fd.shape[0]:
        raise ValueError(f"bilinear_sample shapes not understood: f {f.shape}, coords {coords.shape}")
    b, h, w, c = fd.shape
    p = cd.shape[1]
    y0, y1, x0, x1, wy, wx, in_y, in_x = _bilinear_setup(h, w, cd)
    base = (np.arange(b, dtype=np.intp) * (h * w))[:, None]
    i00 = base + y0 * w + x0
    i01 = base + y0 * w + x1
    i10 = base + y1 * w + x0
    i11 = base + y1 * w + x1
    flat = fd.reshape(b * h * w, c)
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    wy_, wx_ = wy[..., None], wx[..., None]
    out = (1 - wy_) * ((1 - wx_) * v00 + wx_ * v01) + wy_ * ((1 - wx_) * v10 + wx_ * v11)
    if squeeze:
        out = out[0]

    def backward(g):
        g3 = g[None] if squeeze else g
        gflat = np.zeros_like(flat)
        idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
        wts = np.concatenate([((1 - wy) * (1 - wx)).ravel(), ((1 - wy) * wx).ravel(),
                              (wy * (1 - wx)).ravel(), (wy * wx).ravel()])
        g2 = g3.reshape(b * p, c)
        np.add.at(gflat, idx, np.tile(g2, (4, 1)) * wts[:, None])
        dy = (1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)
        dx = (1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)
        gc = np.stack([(g3 * dy).sum(-1) * in_y, (g3 * dx).sum(-1) * in_x], axis=-1).astype(cd.dtype)
        gf = gflat.reshape(fd.shape)
        if squeeze:
            gf, gc = gf[0], gc[0]
        return gf, gc
    return make_result(out, (f, coords), backward)


def pixel_grid(h: int, w: int, dtype=None) -> np.ndarray:
    """[H,W,2] array of (y, x) integer coordinates."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([yy, xx], axis=-1).astype(dtype or np.float64)


def flow_warp(f: Tensor, flow: Tensor) -> Tensor:
    """Backward warp: out[y,x] = f sampled at (y + flow[y,x,0], x + flow[y,x,1]).

    f: [H,W,C] with flow [H,W,2], or batched [B,H,W,C] with [B,H,W,2].
    """
    flow = as_tensor(flow, dtype=f.dtype)
    if f.shape[:-1] != flow.shape[:-1] or flow.shape[-1] != 2:
        raise ValueError(f"flow_warp shape mismatch: f {f.shape}, flow {flow.shape}")
    h, w = f.shape[-3], f.shape[-2]
    coords = add(flow, pixel_grid(h, w, f.dtype))
    if f.ndim == 3:
        out = bilinear_sample(f, reshape(coords, (h * w, 2)))
        return reshape(out, (h, w, f.shape[-1]))
    b = f.shape[0]
    out = bilinear_sample(f, reshape(coords, (b, h * w, 2)))
    return reshape(out, (b, h, w, f.shape[-1]))


def pixel_shuffle(f: Tensor, s: int) -> Tensor:
    """[..., H, W, s*s*C] -> [..., s*H, s*W, C]; channel index = c*s*s + i*s + j."""
    *lead, h, w, cs = f.shape
    if cs % (s * s):
        raise ValueError(f"pixel_shuffle: {cs} channels not divisible by {s * s}")
    c = cs // (s * s)
    n = len(lead)
    x = reshape(f, (*lead, h, w, c, s, s))
    axes = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2)
    x = transpose(x, axes)
    return reshape(x, (*lead, h * s, w * s, c))


def pixel_unshuffle(f: Tensor, s: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    *lead, hs, ws, c = f.shape
    if hs % s or ws % s:
        raise ValueError(f"pixel_unshuffle: spatial extents {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    n = len(lead)
    x = reshape(f, (*lead, h, s, w, s, c))
    axes = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3)
    x = transpose(x, axes)
    return reshape(x, (*lead, h, w, c * s * s))


# ---------------------------------------------------------------- losses

def charbonnier(pred: Tensor, target, eps: float = 1e-3, mode: str = "mean") -> Tensor:
    """Charbonnier loss.

    ``global``: sqrt(||pred - target||^2 + eps^2) over the whole tensor.
    ``mean``: mean over elements of sqrt(r^2 + eps^2).
    """
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"charbonnier shape mismatch: {pred.shape} vs {target.shape}")
    r = pred.data - target.data
    if mode == "global":
        val = np.sqrt((r * r).sum() + eps * eps)

        def backward(g):
            gr = g * r / val
            return gr, -gr
    elif mode == "mean":
        per = np.sqrt(r * r + eps * eps)
        val = per.mean()
        n = r.size

        def backward(g):
            gr = g * r / (per * n)
            return gr, -gr
    else:
        raise ValueError(f"unknown charbonnier mode {mode!r}")
    return make_result(np.asarray(val, dtype=pred.dtype), (pred, target), backward)

