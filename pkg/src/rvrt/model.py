"""End-to-end restoration model: config, assembly, forward pass, training and weight files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import bicubic_resize
from .flow import ConsecutiveFlows, FlowProvider, clip_pairwise_flows
from .gda import GDA
from .nn import Conv2d, Module
from .rfr import RefinementModule, ResidualSwinBlock, propagate, temporal_pad_indices
from .tensor import Tape, Tensor, ops, precision


# ---------------------------------------------------------------- config

@dataclass
class ModelConfig:
    scale: int = 4
    num_frames: int = 4
    clip_size: int = 2
    channels: int = 16
    num_modules: int = 2
    blocks_per_module: int = 1
    layers_per_block: int = 2
    window: tuple[int, int] = (4, 4)
    heads: int = 2
    gda_groups: int = 2
    gda_heads: int = 2
    candidates: int = 4
    mlp_ratio: float = 2.0
    expansion: float = 1.0
    max_offset: float = 10.0
    alignment: str = "gda"
    flow_guidance: bool = True
    flow_update: bool = True
    gda_mlp: bool = True
    precision: int = 32
    seed: int = 0

    def __post_init__(self):
        self.window = tuple(int(v) for v in self.window)
        self.validate()

    def validate(self) -> None:
        if self.scale not in (1, 4):
            raise ValueError(f"scale must be 1 or 4, got {self.scale}")
        for name in ("num_frames", "clip_size", "channels", "num_modules", "blocks_per_module",
                     "layers_per_block", "heads", "gda_groups", "gda_heads", "candidates"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if len(self.window) != 2 or min(self.window) < 1:
            raise ValueError(f"window must be two positive extents, got {self.window}")
        if self.mlp_ratio <= 0 or self.expansion <= 0 or self.max_offset <= 0:
            raise ValueError("mlp_ratio, expansion and max_offset must be positive")
        c = self.channels
        if c % self.heads:
            raise ValueError(f"heads {self.heads} do not divide channels {c}")
        if c % self.gda_groups:
            raise ValueError(f"gda_groups {self.gda_groups} do not divide channels {c}")
        if self.gda_heads % self.gda_groups:
            raise ValueError(f"gda_heads {self.gda_heads} not a multiple of gda_groups {self.gda_groups}")
        qk = self.expansion * c
        if qk != int(qk) or int(qk) % self.gda_heads or c % self.gda_heads:
            raise ValueError(f"gda_heads {self.gda_heads} do not divide query width {qk} and channels {c}")
        if self.alignment not in ("gda", "none"):
            raise ValueError(f"alignment must be 'gda' or 'none', got {self.alignment!r}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["window"] = list(self.window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), **kw})

    def hash(self) -> bytes:
        """sha256 over the architecture fields (seed and precision excluded)."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("precision")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


def load_config(path: str | os.PathLike) -> ModelConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed config ({exc})") from exc
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return ModelConfig.from_dict(d)


def save_config(cfg: ModelConfig, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------- model

def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named sub-module, all derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class RVRT(Module):
    """Shallow extraction, L recurrent refinement modules, reconstruction."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        c, s = cfg.channels, cfg.seed
        wh, ww = cfg.window
        self.conv_first = Conv2d(3, c, 3, substream(s, "conv_first"))
        self.downsample = ([Conv2d(c, c, 3, substream(s, "downsample.0"), stride=2),
                            Conv2d(c, c, 3, substream(s, "downsample.1"), stride=2)]
                           if cfg.scale == 1 else [])
        self.shallow = ResidualSwinBlock(c, cfg.heads, (1, wh, ww), cfg.layers_per_block,
                                         substream(s, "shallow"), cfg.mlp_ratio)
        self.refine = []
        for i in range(1, cfg.num_modules + 1):
            gda = None
            if cfg.alignment == "gda":
                gda = GDA(c, cfg.clip_size, cfg.gda_groups, cfg.gda_heads, cfg.candidates,
                          substream(s, f"refine.{i}.gda"), mlp_ratio=cfg.mlp_ratio,
                          expansion=cfg.expansion, max_offset=cfg.max_offset,
                          use_mlp=cfg.gda_mlp, update_flows=cfg.flow_update)
            self.refine.append(RefinementModule(
                i, c, cfg.clip_size, (wh, ww), cfg.heads, cfg.blocks_per_module, cfg.layers_per_block,
                substream(s, f"refine.{i}"), cfg.mlp_ratio, gda=gda, alignment=cfg.alignment))
        self.reconstruct = ResidualSwinBlock(c, cfg.heads, (1, wh, ww), cfg.layers_per_block,
                                             substream(s, "reconstruct"), cfg.mlp_ratio)
        self.conv_last = Conv2d(c, 3 * 16, 3, substream(s, "conv_last"))

    @property
    def dtype(self):
        return self.conv_first.weight.dtype


def build(cfg: ModelConfig) -> RVRT:
    """Deterministic initialisation from ``cfg.seed`` at ``cfg.precision``."""
    cfg.validate()
    with precision(cfg.precision):
        return RVRT(cfg)


def _spatial_multiple(cfg: ModelConfig) -> tuple[int, int]:
    f = 4 if cfg.scale == 1 else 1
    return cfg.window[0] * f, cfg.window[1] * f


def _pad_amount(n: int, mult: int) -> int:
    return -(-n // mult) * mult - n


def _reflect_pad(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    widths = [(0, 0)] * (a.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
    mode = "reflect" if ph < a.shape[-3] and pw < a.shape[-2] else "symmetric"
    return np.pad(a, widths, mode=mode)


def pad_consecutive_flows(flows: ConsecutiveFlows, idx: np.ndarray) -> ConsecutiveFlows:
    """Consecutive flows over a temporally re-indexed (reflection padded) frame sequence."""
    h, w = flows.from_prev.shape[1:3]
    n = len(idx) - 1
    fp = np.zeros((n, h, w, 2), dtype=flows.from_prev.dtype)
    fn = np.zeros_like(fp)
    for k in range(n):
        a, b = int(idx[k]), int(idx[k + 1])
        if b == a + 1:
            fp[k], fn[k] = flows.from_prev[a], flows.from_next[a]
        elif b == a - 1:
            fp[k], fn[k] = flows.from_next[b], flows.from_prev[b]
    return ConsecutiveFlows(fp, fn)


@dataclass
class PreparedInput:
    """LQ video and clip flows after padding; reusable across forward calls."""
    lq: np.ndarray                  # [T', H', W', 3] padded
    frames: int
    height: int
    width: int
    mask: np.ndarray                # real-frame mask over T'
    skip: np.ndarray                # global skip at output resolution, padded
    forward_flows: dict = field(default_factory=dict)
    backward_flows: dict = field(default_factory=dict)


def prepare_input(model: RVRT, lq: np.ndarray, flows: ConsecutiveFlows | None = None) -> PreparedInput:
    cfg = model.cfg
    lq = np.asarray(lq, dtype=np.float64)
    if lq.ndim != 4 or lq.shape[-1] != 3:
        raise ValueError(f"expected a [T, H, W, 3] video, got shape {lq.shape}")
    t, h, w, _ = lq.shape
    if t == 0 or h == 0 or w == 0:
        raise ValueError("empty video")
    if flows is None or not cfg.flow_guidance:
        flows = FlowProvider("zero").consecutive_flows(t, h, w)
    if flows.from_prev.shape != (t - 1, h, w, 2):
        raise ValueError(f"flows have shape {flows.from_prev.shape}, expected {(t - 1, h, w, 2)}")
    mh, mw = _spatial_multiple(cfg)
    ph, pw = _pad_amount(h, mh), _pad_amount(w, mw)
    idx, mask = temporal_pad_indices(t, cfg.clip_size)
    padded = _reflect_pad(lq[idx], ph, pw)
    flows = pad_consecutive_flows(flows, idx)
    fp = np.pad(flows.from_prev, [(0, 0), (0, ph), (0, pw), (0, 0)], mode="edge")
    fn = np.pad(flows.from_next, [(0, 0), (0, ph), (0, pw), (0, 0)], mode="edge")
    flows = ConsecutiveFlows(fp, fn)
    if cfg.scale == 1:
        flows = flows.downscaled(4)
    n = cfg.clip_size
    num_clips = len(idx) // n
    dt = model.dtype
    fwd = {k: clip_pairwise_flows(flows, n, k, forward=True, dtype=dt) for k in range(1, num_clips)}
    bwd = {k: clip_pairwise_flows(flows, n, k, forward=False, dtype=dt) for k in range(num_clips - 1)}
    if cfg.scale == 4:
        skip = bicubic_resize(padded, 4 * padded.shape[1], 4 * padded.shape[2])
    else:
        skip = padded
    return PreparedInput(padded, t, h, w, mask, skip.astype(dt), fwd, bwd)


def forward(model: RVRT, lq, flows: ConsecutiveFlows | None = None, record=None) -> Tensor:
    """Restore a [T, H, W, 3] video to [T, sH, sW, 3].

    ``lq`` may be an array or a :class:`PreparedInput`. ``record(i, t, diag)``
    receives GDA diagnostics of module ``i`` at clip ``t``.
    """
    cfg = model.cfg
    prep = lq if isinstance(lq, PreparedInput) else prepare_input(model, lq, flows)
    dt = model.dtype
    x = Tensor(prep.lq, dtype=dt)
    feat = model.conv_first(x)
    if model.downsample:
        feat = model.downsample[1](ops.gelu(model.downsample[0](feat)))
    history = [model.shallow(feat)]
    pair = {True: dict(prep.forward_flows), False: dict(prep.backward_flows)}
    for module in model.refine:
        rec = None if record is None else (lambda t, d, i=module.index: record(i, t, d))
        history.append(propagate(history, module, pair[module.forward_in_time], record=rec))
    y = model.reconstruct(history[-1])
    y = ops.pixel_shuffle(model.conv_last(y), 4)
    y = ops.add(y, prep.skip)
    s = cfg.scale
    return y[:prep.frames, :s * prep.height, :s * prep.width]


# ---------------------------------------------------------------- accounting

def param_count(model: Module | None) -> dict[str, int]:
    """Parameter totals per named sub-module plus ``total``.

    Refinement modules are split into fusion / blocks / gda entries.
    """
    out: dict[str, int] = {}
    if model is not None:
        for name, p in model.named_parameters():
            parts = name.split(".")
            key = ".".join(parts[:3]) if parts[0] == "refine" else parts[0]
            out[key] = out.get(key, 0) + int(p.size)
    out["total"] = int(sum(out.values()))
    return out


def gda_audit(model: RVRT) -> list[tuple[str, int, int]]:
    """(module name, measured projection+MLP params, (3+2R)C^2 scaled by E) per GDA."""
    from .gda import gda_param_count
    cfg = model.cfg
    rows = []
    for k, m in enumerate(model.refine):
        if m.gda is not None:
            expect, _ = gda_param_count(cfg.channels, cfg.mlp_ratio, cfg.candidates, cfg.expansion)
            rows.append((f"refine.{k}.gda", m.gda.attention_parameter_count(), expect))
    return rows


# ---------------------------------------------------------------- weight files

WEIGHTS_MAGIC = b"RVRTW1"
WEIGHTS_VERSION = 1


class WeightFileError(ValueError):
    pass


def weight_store(model: Module) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def encode_weights(store: dict[str, np.ndarray], config_hash: bytes, seed: int = 0) -> bytes:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    table = []
    for name, arr in store.items():
        nb = name.encode("utf-8")
        table.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape))
    header_len = len(WEIGHTS_MAGIC) + 2 + 32 + 8 + 4 + sum(len(e) + 8 for e in table)
    head = [WEIGHTS_MAGIC, struct.pack("<H", WEIGHTS_VERSION), config_hash,
            struct.pack("<QI", seed & (2 ** 64 - 1), len(store))]
    payload, offset = [], header_len
    for entry, arr in zip(table, store.values()):
        head.append(entry + struct.pack("<Q", offset))
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        payload.append(blob)
        offset += len(blob)
    return b"".join(head + payload)


@dataclass
class WeightFile:
    config_hash: bytes
    seed: int
    version: int
    store: dict[str, np.ndarray]


def decode_weights(buf: bytes) -> WeightFile:
    pos = 0

    def need(n: int, what: str):
        if pos + n > len(buf):
            raise WeightFileError(f"truncated {what} at byte {pos}")

    need(len(WEIGHTS_MAGIC), "magic")
    if buf[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise WeightFileError("bad magic at byte 0")
    pos = len(WEIGHTS_MAGIC)
    need(2 + 32 + 12, "header")
    (version,) = struct.unpack_from("<H", buf, pos)
    if version != WEIGHTS_VERSION:
        raise WeightFileError(f"unsupported format version {version} at byte {pos}")
    pos += 2
    config_hash = buf[pos:pos + 32]
    pos += 32
    seed, count = struct.unpack_from("<QI", buf, pos)
    pos += 12
    entries = []
    for _ in range(count):
        need(2, "entry name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1, "entry name")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"entry name is not UTF-8 at byte {pos}") from exc
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank + 8, "entry extents")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        entries.append((name, shape, offset))
    store: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        if name in store:
            raise WeightFileError(f"duplicate entry {name!r}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset < pos or offset + nbytes > len(buf):
            raise WeightFileError(f"payload of {name!r} out of range at byte {offset}")
        store[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
    return WeightFile(config_hash, seed, version, store)


def save(model: RVRT, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_weights(weight_store(model), model.cfg.hash(), model.cfg.seed))


def load_into(model: RVRT, path: str | os.PathLike) -> RVRT:
    """Copy weights from ``path`` into ``model``; the config hash must match."""
    with open(path, "rb") as fh:
        wf = decode_weights(fh.read())
    if wf.config_hash != model.cfg.hash():
        raise WeightFileError("config hash mismatch: weights were saved for a different architecture")
    params = dict(model.named_parameters())
    if set(params) != set(wf.store):
        missing = sorted(set(params) - set(wf.store))
        extra = sorted(set(wf.store) - set(params))
        raise WeightFileError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        arr = wf.store[name]
        if arr.shape != p.shape:
            raise WeightFileError(f"{name}: shape {arr.shape} does not match {p.shape}")
        p.data = arr.astype(p.dtype)
    return model


def load(path: str | os.PathLike, cfg: ModelConfig) -> RVRT:
    return load_into(build(cfg), path)


def weights_digest(path: str | os.PathLike) -> str:
    """Git-style blob hash of a weights file."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------- training

# Parameters whose gradient is exactly zero at initialisation: the hidden
# offset-net convolutions feed only the zero-initialised output conv. They
# receive gradient from the second step on.
ZERO_GRAD_AT_INIT = ("gda.offset_net.0.", "gda.offset_net.1.")

class TrainingError(FloatingPointError):
    pass


def cosine_lr(step: int, total: int, lr_init: float, lr_min: float = 1e-7) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_min`` at step ``total - 1``."""
    if total <= 1:
        return lr_init
    frac = min(max(step, 0), total - 1) / (total - 1)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr != 0.0:
                p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def compute_gradients(model: RVRT, loss_fn) -> tuple[float, list[np.ndarray]]:
    params = model.parameters()
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    out = []
    names = [n for n, _ in model.named_parameters()]
    for name, p in zip(names, params):
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else g
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
        out.append(g)
    return value, out


def train_step(model: RVRT, batch, opt: Adam, lr: float | None = None) -> float:
    """One Adam step on the mean Charbonnier loss.

    ``batch`` is (lq, hq, flows) or (PreparedInput, hq).
    """
    if isinstance(batch[0], PreparedInput):
        prep, hq = batch[0], batch[1]
    else:
        lq, hq, flows = (tuple(batch) + (None,))[:3]
        prep = prepare_input(model, lq, flows)
    target = np.asarray(hq, dtype=model.dtype)
    loss, grads = compute_gradients(model, lambda: ops.charbonnier(forward(model, prep), target, mode="mean"))
    opt.step(grads, lr)
    return loss


def train(model: RVRT, batches, steps: int, lr: float = 1e-3, lr_min: float = 1e-7, log=None) -> list[float]:
    """Run ``steps`` Adam steps cycling over ``batches``; returns the loss curve."""
    opt = Adam(model.parameters(), lr=lr)
    batches = list(batches)
    losses = []
    for k in range(steps):
        rate = cosine_lr(k, steps, lr, lr_min)
        loss = train_step(model, batches[k % len(batches)], opt, rate)
        losses.append(loss)
        if log is not None:
            log(k, loss, rate)
    return losses


def evaluate_loss(model: RVRT, prep: PreparedInput, hq) -> float:
    out = forward(model, prep)
    return float(ops.charbonnier(out, np.asarray(hq, dtype=model.dtype), mode="mean").data)
