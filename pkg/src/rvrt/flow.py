"""Optical-flow providers and flow composition.

Flows use the backward-warping convention: a flow field lives on the
*target* frame grid and points at the location to read in the *source*
frame, stored as (dy, dx).

Consecutive flows come in two directions, each a [T-1, H, W, 2] array:

* ``from_prev[k]`` lives on frame k+1 and points into frame k
  (used by forward-in-time propagation),
* ``from_next[k]`` lives on frame k and points into frame k+1
  (used by the reversed, even-numbered modules).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, as_tensor, load_raw, ops, save_raw


@dataclass
class ConsecutiveFlows:
    from_prev: np.ndarray
    from_next: np.ndarray

    def __post_init__(self):
        if self.from_prev.shape != self.from_next.shape or self.from_prev.shape[-1:] != (2,):
            raise ValueError(f"flow shapes disagree: {self.from_prev.shape} vs {self.from_next.shape}")

    @property
    def num_frames(self) -> int:
        return self.from_prev.shape[0] + 1

    def direction(self, forward: bool) -> np.ndarray:
        return self.from_prev if forward else self.from_next

    def downscaled(self, factor: int) -> "ConsecutiveFlows":
        """Average-pool by ``factor`` and divide magnitudes by it (feature-resolution flows)."""
        return ConsecutiveFlows(_pool_flow(self.from_prev, factor), _pool_flow(self.from_next, factor))

    def zeros_like(self) -> "ConsecutiveFlows":
        return ConsecutiveFlows(np.zeros_like(self.from_prev), np.zeros_like(self.from_next))


def _pool_flow(flow: np.ndarray, factor: int) -> np.ndarray:
    n, h, w, _ = flow.shape
    if h % factor or w % factor:
        raise ValueError(f"flow extents {h}x{w} not divisible by {factor}")
    pooled = flow.reshape(n, h // factor, factor, w // factor, factor, 2).mean(axis=(2, 4))
    return pooled / factor


@dataclass
class FlowProvider:
    """Source of consecutive flows.

    ``kind`` is one of ``zero``, ``synthetic_gt`` or ``file``. ``synthetic_gt``
    takes ``motion``: a [T-1, 2] array of per-step content translations (in
    pixels of the grid the flows are requested at). ``file`` takes two raw
    tensor paths, ``from_prev`` and ``from_next``.
    """

    kind: str = "zero"
    motion: np.ndarray | None = None
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("zero", "synthetic_gt", "file"):
            raise ValueError(f"unknown flow provider kind {self.kind!r}")

    def consecutive_flows(self, num_frames: int, h: int, w: int) -> ConsecutiveFlows:
        shape = (num_frames - 1, h, w, 2)
        if self.kind == "zero":
            return ConsecutiveFlows(np.zeros(shape), np.zeros(shape))
        if self.kind == "synthetic_gt":
            motion = np.asarray(self.motion, dtype=np.float64)
            if motion.shape != (num_frames - 1, 2):
                raise ValueError(f"motion spec shape {motion.shape} does not match {num_frames} frames")
            # content moves by +d, so target pixel p reads source at p - d
            from_prev = np.broadcast_to(-motion[:, None, None, :], shape).copy()
            return ConsecutiveFlows(from_prev, -from_prev)
        fp = load_raw(self.paths["from_prev"]).astype(np.float64)
        fn = load_raw(self.paths["from_next"]).astype(np.float64)
        for arr in (fp, fn):
            if arr.shape != shape:
                raise ValueError(f"flow file shape {arr.shape} does not match expected {shape}")
        return ConsecutiveFlows(fp, fn)


def save_flows(flows: ConsecutiveFlows, directory: str | os.PathLike) -> dict:
    os.makedirs(directory, exist_ok=True)
    paths = {"from_prev": os.path.join(directory, "from_prev.rvt"),
             "from_next": os.path.join(directory, "from_next.rvt")}
    save_raw(paths["from_prev"], flows.from_prev)
    save_raw(paths["from_next"], flows.from_next)
    return paths


def compose_flows(f_ab, f_bc) -> Tensor:
    """Chain two backward flows.

    ``f_bc`` lives on grid c and points into b; ``f_ab`` lives on grid b and
    points into a. The result lives on c and points into a:
    f_ac(x) = f_bc(x) + f_ab(x + f_bc(x)).
    """
    f_ab, f_bc = as_tensor(f_ab), as_tensor(f_bc, dtype=as_tensor(f_ab).dtype)
    if f_ab.shape != f_bc.shape:
        raise ValueError(f"compose_flows shape mismatch: {f_ab.shape} vs {f_bc.shape}")
    return ops.add(f_bc, ops.flow_warp(f_ab, f_bc))


def chain_flow(steps: np.ndarray, target: int, source: int, dtype=np.float64) -> np.ndarray:
    """Flow on frame ``target`` pointing into frame ``source`` by composing hops.

    ``steps`` is the consecutive-flow array of the matching direction:
    from_prev when source < target, from_next when source > target.
    """
    gap = target - source
    if gap == 0:
        raise ValueError("target and source frames coincide")
    if gap > 0:
        hops = [steps[k] for k in range(target - 1, source - 1, -1)]  # target->target-1, ...
    else:
        hops = [steps[k] for k in range(target, source)]
    acc = Tensor(hops[0], dtype=dtype)
    for hop in hops[1:]:
        acc = compose_flows(Tensor(hop, dtype=dtype), acc)
    return acc.data


def clip_pairwise_flows(flows: ConsecutiveFlows, n: int, t: int, forward: bool = True,
                        dtype=np.float64) -> np.ndarray:
    """[N, N, H, W, 2] flows from the neighbouring clip into clip ``t``.

    Entry [a, b] lives on frame a of clip t and points into frame b of clip
    t-1 (``forward``) or clip t+1 (reverse direction).
    """
    num_clips = flows.num_frames // n
    src_clip = t - 1 if forward else t + 1
    if not (0 <= t < num_clips and 0 <= src_clip < num_clips):
        raise ValueError(f"clip {t} has no {'previous' if forward else 'next'} clip among {num_clips}")
    steps = flows.direction(forward)
    h, w = steps.shape[1:3]
    out = np.empty((n, n, h, w, 2), dtype=dtype)
    for a in range(n):
        for b in range(n):
            out[a, b] = chain_flow(steps, t * n + a, src_clip * n + b, dtype)
    return out
