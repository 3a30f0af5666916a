"""Recurrent feature refinement: clips, 3D window attention, MRSTBs, propagation."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .gda import GDA
from .nn import LayerNorm, Linear, Mlp, Module, param
from .tensor import Tensor, ops


# ---------------------------------------------------------------- clips

def temporal_pad_indices(t: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame indices after reflection-padding T up to a multiple of N, plus the real-frame mask."""
    total = -(-t // n) * n
    idx = np.arange(total)
    tail = idx >= t
    idx[tail] = np.clip(2 * (t - 1) - idx[tail], 0, t - 1)
    return idx, ~tail


def partition_clips(f: Tensor, n: int) -> tuple[list[Tensor], np.ndarray]:
    """Split [T,H,W,C] into clips of N frames; pad the tail by temporal reflection."""
    if n < 1:
        raise ValueError("clip size must be >= 1")
    idx, mask = temporal_pad_indices(f.shape[0], n)
    if len(idx) != f.shape[0]:
        f = ops.take(f, idx, axis=0)
    return [f[k:k + n] for k in range(0, len(idx), n)], mask


def concatenate_clips(clips: list[Tensor]) -> Tensor:
    return ops.concat(clips, axis=0)


# ---------------------------------------------------------------- 3D window attention

@lru_cache(maxsize=64)
def relative_position_index(wt: int, wh: int, ww: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(wt), np.arange(wh), np.arange(ww), indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + np.array([wt - 1, wh - 1, ww - 1])[:, None, None]
    return rel[0] * (2 * wh - 1) * (2 * ww - 1) + rel[1] * (2 * ww - 1) + rel[2]


@lru_cache(maxsize=64)
def shift_mask(n: int, h: int, w: int, window: tuple[int, int, int], shift: tuple[int, int]) -> np.ndarray:
    """[num_windows, L, L] additive mask separating regions that the roll glued together."""
    wt, wh, ww = window
    sh, sw = shift
    img = np.zeros((n, h, w))
    label = 0
    for hs in (slice(0, -wh), slice(-wh, -sh), slice(-sh, None)):
        for ws in (slice(0, -ww), slice(-ww, -sw), slice(-sw, None)):
            img[:, hs, ws] = label
            label += 1
    win = _partition_np(img[..., None], window)[..., 0]
    diff = win[:, None, :] != win[:, :, None]
    return np.where(diff, -100.0, 0.0)


def _partition_np(x: np.ndarray, window) -> np.ndarray:
    n, h, w, c = x.shape
    wt, wh, ww = window
    x = x.reshape(n // wt, wt, h // wh, wh, w // ww, ww, c).transpose(0, 2, 4, 1, 3, 5, 6)
    return x.reshape(-1, wt * wh * ww, c)


def _partition(x: Tensor, window) -> Tensor:
    n, h, w, c = x.shape
    wt, wh, ww = window
    x = ops.reshape(x, (n // wt, wt, h // wh, wh, w // ww, ww, c))
    x = ops.transpose(x, (0, 2, 4, 1, 3, 5, 6))
    return ops.reshape(x, (-1, wt * wh * ww, c))


def _merge(x: Tensor, window, shape) -> Tensor:
    n, h, w, c = shape
    wt, wh, ww = window
    x = ops.reshape(x, (n // wt, h // wh, w // ww, wt, wh, ww, c))
    x = ops.transpose(x, (0, 3, 1, 4, 2, 5, 6))
    return ops.reshape(x, (n, h, w, c))


class WindowAttention3D(Module):
    """Multi-head self-attention inside non-overlapping (wt, wh, ww) windows."""

    def __init__(self, channels: int, heads: int, window: tuple[int, int, int], rng: np.random.Generator):
        if channels % heads:
            raise ValueError(f"heads {heads} do not divide channels {channels}")
        self.heads = heads
        self.window = tuple(window)
        wt, wh, ww = window
        # no key bias: it only shifts each softmax row by a constant, so its gradient is identically zero
        self.qkv = Linear(channels, 3 * channels, rng, bias=False)
        self.q_bias = param(np.zeros(channels))
        self.v_bias = param(np.zeros(channels))
        self.proj = Linear(channels, channels, rng)
        self.position_bias = param(np.zeros(((2 * wt - 1) * (2 * wh - 1) * (2 * ww - 1), heads)))

    def effective(self, shape, shifted: bool):
        """Window clipped to the feature size, and the spatial shift actually used."""
        n, h, w, _ = shape
        wt, wh, ww = self.window
        win = (min(wt, n), min(wh, h), min(ww, w))
        if n % win[0] or h % win[1] or w % win[2]:
            raise ValueError(f"window {win} does not divide feature extents {(n, h, w)}")
        shift = (win[1] // 2 if shifted and win[1] < h else 0,
                 win[2] // 2 if shifted and win[2] < w else 0)
        return win, shift

    def __call__(self, x: Tensor, shifted: bool = False, return_attention: bool = False):
        n, h, w, c = x.shape
        win, (sh, sw) = self.effective(x.shape, shifted)
        nh, d = self.heads, c // self.heads
        if sh or sw:
            x = ops.roll(x, (-sh, -sw), axis=(1, 2))
        c_zero = Tensor(np.zeros(c, dtype=x.dtype))
        qkv = ops.add(self.qkv(x), ops.concat([self.q_bias, c_zero, self.v_bias], axis=0))
        qkv = _partition(qkv, win)                          # [nW, L, 3C]
        nw, length = qkv.shape[0], qkv.shape[1]
        qkv = ops.transpose(ops.reshape(qkv, (nw, length, 3, nh, d)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]                            # [nW, nh, L, d]
        logits = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), d ** -0.5)
        index = relative_position_index(*win).reshape(-1)
        if win != self.window:
            bias_table = self._clipped_table(win)
        else:
            bias_table = self.position_bias
        bias = ops.transpose(ops.reshape(ops.take(bias_table, index, axis=0), (length, length, nh)), (2, 0, 1))
        logits = ops.add(logits, bias)
        if sh or sw:
            mask = shift_mask(n, h, w, win, (sh, sw)).astype(x.dtype)
            logits = ops.add(logits, mask[:, None])
        attn = ops.softmax(logits, axis=-1)
        out = ops.matmul(attn, v)                                   # [nW, nh, L, d]
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (nw, length, c))
        out = _merge(out, win, (n, h, w, c))
        if sh or sw:
            out = ops.roll(out, (sh, sw), axis=(1, 2))
        out = self.proj(out)
        return (out, attn.data) if return_attention else out

    def _clipped_table(self, win) -> Tensor:
        # sub-table of relative offsets reachable inside a smaller window
        wt, wh, ww = self.window
        ct, ch, cw = win
        dt = np.arange(-(ct - 1), ct) + wt - 1
        dh = np.arange(-(ch - 1), ch) + wh - 1
        dw = np.arange(-(cw - 1), cw) + ww - 1
        rows = (dt[:, None, None] * (2 * wh - 1) * (2 * ww - 1) + dh[None, :, None] * (2 * ww - 1)
                + dw[None, None, :]).reshape(-1)
        return ops.take(self.position_bias, rows, axis=0)


def window_attention_3d(x: Tensor, attn: WindowAttention3D, shifted: bool = False, return_attention=False):
    return attn(x, shifted=shifted, return_attention=return_attention)


class SwinLayer(Module):
    def __init__(self, channels: int, heads: int, window, rng, mlp_ratio: float = 2.0):
        self.norm1 = LayerNorm(channels)
        self.attn = WindowAttention3D(channels, heads, window, rng)
        self.norm2 = LayerNorm(channels)
        self.mlp = Mlp(channels, int(round(mlp_ratio * channels)), rng)

    def __call__(self, x: Tensor, shifted: bool) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x), shifted=shifted))
        return ops.add(x, self.mlp(self.norm2(x)))


class ResidualSwinBlock(Module):
    """Stack of window-attention layers (alternately shifted) plus a residual linear.

    With a temporal window spanning the clip this is the MRSTB; with a
    temporal window of 1 it is a plain per-frame RSTB.
    """

    def __init__(self, channels: int, heads: int, window, depth: int, rng, mlp_ratio: float = 2.0):
        self.layers = [SwinLayer(channels, heads, window, rng, mlp_ratio) for _ in range(depth)]
        self.out = Linear(channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = x
        for j, layer in enumerate(self.layers):
            y = layer(y, shifted=bool(j % 2))
        return ops.add(x, self.out(y))


# ---------------------------------------------------------------- refinement module

class RefinementModule(Module):
    """One recurrent feature refinement module (index ``i`` >= 1).

    Fuses F^0_t .. F^{i-1}_t and the aligned previous clip with a 1x1
    convolution, then refines with MRSTBs whose windows span the clip.
    Odd ``i`` run forward in time, even ``i`` run reversed.
    """

    def __init__(self, index: int, channels: int, clip_size: int, window, heads: int,
                 num_blocks: int, depth: int, rng, mlp_ratio: float = 2.0, gda: GDA | None = None,
                 alignment: str = "gda"):
        if alignment not in ("gda", "none"):
            raise ValueError(f"unknown alignment {alignment!r}")
        self.index = index
        self.clip_size = clip_size
        self.alignment = alignment
        wh, ww = window
        self.fusion = Linear((index + 1) * channels, channels, rng)
        self.blocks = [ResidualSwinBlock(channels, heads, (clip_size, wh, ww), depth, rng, mlp_ratio)
                       for _ in range(num_blocks)]
        self.gda = gda

    @property
    def forward_in_time(self) -> bool:
        return self.index % 2 == 1

    def step(self, history: list[Tensor], aligned: Tensor) -> Tensor:
        return rfr_step(history, aligned, self)


def rfr_step(history: list[Tensor], aligned: Tensor, module: RefinementModule) -> Tensor:
    """F^i_t from [F^0_t .. F^{i-1}_t] and the aligned neighbouring clip."""
    for h in history:
        if h.shape != aligned.shape:
            raise ValueError(f"rfr_step shape mismatch: {h.shape} vs {aligned.shape}")
    x = ops.concat(list(history) + [aligned], axis=-1)
    if x.shape[-1] != module.fusion.weight.shape[0]:
        raise ValueError(f"fusion expects {module.fusion.weight.shape[0]} channels, got {x.shape[-1]}")
    x = module.fusion(x)
    for block in module.blocks:
        x = block(x)
    return x


def clip_order(num_clips: int, forward: bool) -> list[int]:
    order = list(range(num_clips))
    return order if forward else order[::-1]


def propagate(history: list[Tensor], module: RefinementModule, pair_flows: dict, record=None):
    """Run module ``i`` over every clip of the (already clip-padded) video.

    ``history`` holds F^0 .. F^{i-1} as [T,H,W,C] tensors. ``pair_flows``
    maps clip index t -> [N,N,H,W,2] flows from the neighbouring clip in the
    module's direction; updated flows are written back in place so the next
    module running in the same direction picks them up.
    ``record(t, diagnostics)`` receives GDA diagnostics if given.
    Returns F^i as [T,H,W,C].
    """
    n = module.clip_size
    t_total = history[0].shape[0]
    if t_total % n:
        raise ValueError(f"{t_total} frames are not a multiple of clip size {n}")
    num_clips = t_total // n
    clips = [[h[k * n:(k + 1) * n] for k in range(num_clips)] for h in history]
    forward = module.forward_in_time
    out: dict[int, Tensor] = {}
    prev = None
    for t in clip_order(num_clips, forward):
        cur_hist = [c[t] for c in clips]
        if prev is None:
            aligned = Tensor(np.zeros(cur_hist[0].shape, dtype=cur_hist[0].dtype))
        elif module.alignment == "none":
            aligned = out[prev]
        else:
            aligned, new_flows, diag = module.gda(out[prev], pair_flows[t], clips[-1][prev], clips[-1][t])
            pair_flows[t] = new_flows
            if record is not None:
                record(t, diag)
        out[t] = rfr_step(cur_hist, aligned, module)
        prev = t
    return concatenate_clips([out[t] for t in range(num_clips)])
