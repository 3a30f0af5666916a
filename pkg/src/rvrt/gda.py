"""Guided deformable attention (GDA) for clip-to-clip alignment.

Shapes, with N frames per clip and channels-last features:

* clip feature       [N, H, W, C]
* pairwise flow      [N, N, H, W, 2]   (target frame n, source frame n')
* offsets            [N, N, G, M, H, W, 2]

For every target frame n and pixel p, each deformable group g samples its
keys and values at ``p + flow[n, n'] + offset[n, n', g, m]`` for all source
frames n' and candidates m, then attends over those N*M locations with
its own heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Linear, Module, param, trunc_normal
from .tensor import Tensor, as_tensor, ops


def prealign(src: Tensor, flows: Tensor) -> Tensor:
    """Warp every source frame n' towards every target frame n: [N, N, H, W, C]."""
    flows = as_tensor(flows, dtype=src.dtype)
    n, h, w, c = src.shape
    if flows.shape != (n, n, h, w, 2):
        raise ValueError(f"prealign: flows {flows.shape} do not match clip {src.shape}")
    rep = ops.take(src, np.tile(np.arange(n), n), axis=0)
    out = ops.flow_warp(rep, ops.reshape(flows, (n * n, h, w, 2)))
    return ops.reshape(out, (n, n, h, w, c))


def update_flow(flows: Tensor, offsets: Tensor) -> Tensor:
    """Add the mean of all G*M offsets of each frame pair to its flow."""
    flows = as_tensor(flows, dtype=offsets.dtype)
    n, _, g, m, h, w, _ = offsets.shape
    if flows.shape != (n, n, h, w, 2):
        raise ValueError(f"update_flow: flows {flows.shape} vs offsets {offsets.shape}")
    return ops.add(flows, ops.mean(offsets, axis=(2, 3)))


def gda_param_count(channels: int, mlp_ratio: float, candidates: int, expansion: float = 1.0) -> tuple[int, int]:
    """(GDA projection+MLP parameters, deformable-conv parameters), bias-free.

    With unit expansion this is ((3 + 2R) C^2, M C^2).
    """
    c = channels
    gda = (2 * expansion + 1 + 2 * mlp_ratio) * c * c
    return int(round(gda)), int(candidates * c * c)


@dataclass
class GDADiagnostics:
    offsets: np.ndarray        # [N, N, G, M, H, W, 2]
    attention: np.ndarray      # [N, H, W, G, heads_per_group, N, M]
    locations: np.ndarray      # [N, N, G, M, H, W, 2], absolute (y, x)

    def group_attention(self) -> np.ndarray:
        """Head-averaged weights as [N, N', G, M, H, W]."""
        a = self.attention.mean(axis=4)                       # [N, H, W, G, N', M]
        return a.transpose(0, 4, 3, 5, 1, 2)

    def rows(self, clip_index: int):
        """Yield (t, n, n', g, m, y, x, dy, dx, weight) records."""
        att = self.group_attention()
        n_, _, g_, m_, h, w, _ = self.offsets.shape
        for idx in np.ndindex(n_, n_, g_, m_, h, w):
            dy, dx = self.offsets[idx]
            yield (clip_index, *idx, float(dy), float(dx), float(att[idx]))


class GDA(Module):
    """Weights and forward pass of one guided deformable attention block.

    Args:
        channels: feature width C.
        clip_size: frames per clip N (fixes the offset net's input width).
        groups: deformable groups G; must divide C.
        heads: total attention heads; a multiple of ``groups``.
        candidates: sampling candidates M per group and frame pair.
        mlp_ratio: hidden width of the channel MLP is ``mlp_ratio * C``.
        expansion: query/key width is ``expansion * C``.
        max_offset: offsets are soft-clamped into (-max_offset, max_offset).
    """

    def __init__(self, channels: int, clip_size: int, groups: int, heads: int, candidates: int,
                 rng: np.random.Generator, mlp_ratio: float = 2, expansion: float = 1,
                 max_offset: float = 10.0, use_mlp: bool = True, update_flows: bool = True):
        c, n = channels, clip_size
        qk = int(round(expansion * c))
        if candidates < 1:
            raise ValueError("candidates must be >= 1")
        if c % groups:
            raise ValueError(f"groups {groups} do not divide channels {c}")
        if heads % groups:
            raise ValueError(f"heads {heads} are not a multiple of groups {groups}")
        if qk % heads or c % heads:
            raise ValueError(f"heads {heads} do not divide query width {qk} and value width {c}")
        self.channels, self.clip_size, self.groups, self.heads = c, n, groups, heads
        self.candidates, self.qk_dim, self.max_offset = candidates, qk, float(max_offset)
        self.use_mlp, self.update_flows = use_mlp, update_flows

        self.proj_q = param(trunc_normal(rng, (c, qk)))
        self.proj_k = param(trunc_normal(rng, (c, qk)))
        self.proj_v = param(trunc_normal(rng, (c, c)))
        hidden = int(round(mlp_ratio * c))
        self.mlp_fc1 = param(trunc_normal(rng, (c, hidden)))
        self.mlp_fc2 = param(trunc_normal(rng, (hidden, c)))
        cin = n * c + n * n * c + n * n * 2
        self.offset_net = [
            Conv2d(cin, c, 3, rng),
            Conv2d(c, c, 3, rng),
            Conv2d(c, n * n * groups * candidates * 2, 3, rng, zero=True),
        ]

    def attention_parameter_count(self) -> int:
        """Projection + MLP parameters (the part covered by the (3+2R)C^2 formula)."""
        return int(sum(p.size for p in (self.proj_q, self.proj_k, self.proj_v, self.mlp_fc1, self.mlp_fc2)))

    def predict_offsets(self, cur: Tensor, prealigned: Tensor, flows: Tensor) -> Tensor:
        n, h, w, c = cur.shape
        flows = as_tensor(flows, dtype=cur.dtype)
        if prealigned.shape != (n, n, h, w, c) or flows.shape != (n, n, h, w, 2):
            raise ValueError("predict_offsets: inputs disagree in shape")
        x = ops.concat([
            ops.reshape(ops.transpose(cur, (1, 2, 0, 3)), (h, w, n * c)),
            ops.reshape(ops.transpose(prealigned, (2, 3, 0, 1, 4)), (h, w, n * n * c)),
            ops.reshape(ops.transpose(flows, (2, 3, 0, 1, 4)), (h, w, n * n * 2)),
        ], axis=-1)
        if x.shape[-1] != self.offset_net[0].weight.shape[2]:
            raise ValueError(f"offset net expects {self.offset_net[0].weight.shape[2]} channels, got {x.shape[-1]}")
        x = ops.relu(self.offset_net[0](x))
        x = ops.relu(self.offset_net[1](x))
        x = self.offset_net[2](x)
        g, m = self.groups, self.candidates
        x = ops.reshape(x, (h, w, n, n, g, m, 2))
        x = ops.transpose(x, (2, 3, 4, 5, 0, 1, 6))
        return ops.soft_clamp(x, self.max_offset)

    def attend(self, q_src: Tensor, k_src: Tensor, v_src: Tensor, flows: Tensor, offsets: Tensor):
        """Deformable attention given explicit offsets; returns (out [N,H,W,C], attn, locations)."""
        n, h, w, c = v_src.shape
        g, m, nh = self.groups, self.candidates, self.heads
        hpg = nh // g
        qk = self.qk_dim
        dk, dv = qk // nh, c // nh
        hw = h * w

        q = ops.linear(q_src, self.proj_q)                          # [N,H,W,qk]
        kf = ops.linear(k_src, self.proj_k)                         # [N',H,W,qk]
        vf = ops.linear(v_src, self.proj_v)                         # [N',H,W,C]

        grid = ops.pixel_grid(h, w, v_src.dtype)
        base = ops.add(ops.reshape(as_tensor(flows, dtype=v_src.dtype), (n, n, 1, 1, h, w, 2)), grid)
        locs = ops.add(offsets, base)                               # [N,N',G,M,H,W,2]
        coords = ops.reshape(ops.transpose(locs, (1, 2, 0, 3, 4, 5, 6)), (n * g, n * m * hw, 2))

        def sample(feat: Tensor, width: int, d: int) -> Tensor:
            grouped = ops.reshape(ops.transpose(ops.reshape(feat, (n, h, w, g, width // g)), (0, 3, 1, 2, 4)),
                                  (n * g, h, w, width // g))
            s = ops.bilinear_sample(grouped, coords)                # [N'G, N*M*HW, width/g]
            s = ops.reshape(s, (n, g, n, m, hw, hpg, d))            # n', g, n, m, p, head, d
            s = ops.transpose(s, (2, 4, 1, 5, 0, 3, 6))             # n, p, g, head, n', m, d
            return ops.reshape(s, (n, hw, g, hpg, n * m, d))

        keys = sample(kf, qk, dk)
        vals = sample(vf, c, dv)
        qh = ops.reshape(q, (n, hw, g, hpg, 1, dk))
        logits = ops.mul(ops.matmul(qh, ops.transpose(keys, (0, 1, 2, 3, 5, 4))), 1.0 / np.sqrt(dk))
        attn = ops.softmax(logits, axis=-1)                          # [N,HW,G,hpg,1,N'M]
        out = ops.matmul(attn, vals)                                 # [N,HW,G,hpg,1,dv]
        out = ops.reshape(out, (n, h, w, c))
        return out, attn, locs

    def __call__(self, src_i: Tensor, flows, src_prev_layer: Tensor, cur_prev_layer: Tensor):
        """Align clip ``src_i`` towards the current clip.

        Returns (aligned [N,H,W,C], updated flows [N,N,H,W,2], diagnostics).
        """
        n, h, w, c = src_i.shape
        if c != self.channels or n != self.clip_size:
            raise ValueError(f"GDA built for N={self.clip_size}, C={self.channels}; got {src_i.shape}")
        for t in (src_prev_layer, cur_prev_layer):
            if t.shape != src_i.shape:
                raise ValueError(f"GDA inputs disagree: {t.shape} vs {src_i.shape}")
        flows = as_tensor(flows, dtype=src_i.dtype)
        warped = prealign(src_i, flows)
        offsets = self.predict_offsets(cur_prev_layer, warped, flows)
        out, attn, locs = self.attend(cur_prev_layer, src_prev_layer, src_i, flows, offsets)
        if self.use_mlp:
            out = ops.add(out, ops.linear(ops.gelu(ops.linear(out, self.mlp_fc1)), self.mlp_fc2))
        new_flows = update_flow(flows, offsets) if self.update_flows else flows
        g, hpg = self.groups, self.heads // self.groups
        diag = GDADiagnostics(
            offsets=offsets.data,
            attention=attn.data.reshape(n, h, w, g, hpg, n, self.candidates),
            locations=locs.data,
        )
        return out, new_flows, diag


def gda_align(src_i: Tensor, flows, src_prev_layer: Tensor, cur_prev_layer: Tensor, weights: GDA):
    return weights(src_i, flows, src_prev_layer, cur_prev_layer)
