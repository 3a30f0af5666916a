"""Frame-hacking experiment, ablation harness, offset export and SVG plots."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import degrade, gen_synthetic_video
from .flow import ConsecutiveFlows, FlowProvider
from .metrics import psnr
from .model import ModelConfig, build, evaluate_loss, forward, prepare_input, train


# ---------------------------------------------------------------- hacked frame

@dataclass
class HackFrameResult:
    frame: int | None
    psnr_clean: list[float]
    psnr_hacked: list[float]
    diff_norm: list[float]

    @property
    def psnr_drop(self) -> list[float]:
        return [a - b for a, b in zip(self.psnr_clean, self.psnr_hacked)]

    def affected(self, threshold: float = 1e-8) -> set[int]:
        return {t for t, d in enumerate(self.diff_norm) if d > threshold}

    def rows(self):
        for t, (a, b, d) in enumerate(zip(self.psnr_clean, self.psnr_hacked, self.diff_norm)):
            yield t, a, b, a - b, d

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr_clean", "psnr_hacked", "psnr_drop", "diff_norm"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def svg(self) -> str:
        x = list(range(len(self.diff_norm)))
        return svg_line_plot({"PSNR drop (dB)": (x, self.psnr_drop)},
                             title=f"per-frame PSNR drop, frame {self.frame} zeroed",
                             xlabel="frame", ylabel="dB")


def model_restorer(model, flows: ConsecutiveFlows | None = None) -> Callable[[np.ndarray], np.ndarray]:
    def restore(lq: np.ndarray) -> np.ndarray:
        return forward(model, lq, flows).data.astype(np.float64)
    return restore


def hack_frame_experiment(restore, lq: np.ndarray, hq: np.ndarray, frame: int | None) -> HackFrameResult:
    """Zero every pixel of LQ frame ``frame`` and compare per-frame outputs.

    ``restore`` is a model (run with zero flows) or any callable mapping a
    [T,H,W,3] LQ video to its restoration. ``frame=None`` hacks nothing.
    """
    if hasattr(restore, "cfg"):
        restore = model_restorer(restore)
    lq = np.asarray(lq, dtype=np.float64)
    if frame is not None and not 0 <= frame < len(lq):
        raise ValueError(f"frame {frame} out of range for {len(lq)} frames")
    clean = restore(lq)
    hacked_in = lq.copy()
    if frame is not None:
        hacked_in[frame] = 0.0
    hacked = restore(hacked_in)
    pc = [psnr(clean[t], hq[t]) for t in range(len(lq))]
    ph = [psnr(hacked[t], hq[t]) for t in range(len(lq))]
    diff = [float(np.linalg.norm(clean[t] - hacked[t])) for t in range(len(lq))]
    return HackFrameResult(frame, pc, ph, diff)


def reachable_frames(num_frames: int, clip_size: int, num_modules: int, frame: int) -> set[int]:
    """Frames whose output can depend on ``frame`` through clip propagation."""
    n = clip_size
    num_clips = -(-num_frames // n)
    lo = hi = frame // n
    for i in range(1, num_modules + 1):
        if i % 2:
            hi = num_clips - 1
        else:
            lo = 0
    return {t for t in range(num_frames) if lo <= t // n <= hi}


# ---------------------------------------------------------------- overfit task

OVERFIT_BAND = 0.06
OVERFIT_MOTION = (0.125, 0.375)


def overfit_clip(cfg: ModelConfig, size: int = 32, seed: int = 0, band: float = OVERFIT_BAND,
                 degradation: str = "BD", motion=OVERFIT_MOTION, noise_sigma: float = 25.0):
    """(lq, hq, flows) of the single-clip overfit task.

    Band-limited texture moving by ``motion`` LQ pixels per frame. x4 configs
    see ``degradation`` (BD: blur then subsample); x1 configs see additive
    noise of ``noise_sigma`` on the 8-bit scale.
    """
    steps = np.tile(np.asarray(motion, dtype=np.float64) * cfg.scale, (cfg.num_frames - 1, 1))
    hq_size = size * cfg.scale
    video = gen_synthetic_video(seed, cfg.num_frames, hq_size, hq_size, steps, band=band)
    if cfg.scale == 1:
        lq = degrade(video.hq, "noise", sigma=noise_sigma, rng=np.random.default_rng([seed, 12]))
    else:
        lq = degrade(video.hq, degradation)
    flows = FlowProvider("synthetic_gt", motion=steps / cfg.scale).consecutive_flows(cfg.num_frames, size, size)
    return lq, video.hq, flows


# ---------------------------------------------------------------- ablations

def _variant_table(base: ModelConfig) -> dict[str, list[tuple[str, dict]]]:
    full = ("full", {})
    return {
        "clip_length": [("N=1", {"clip_size": 1}), ("N=2", {"clip_size": 2})],
        "alignment_off": [full, ("no_alignment", {"alignment": "none"})],
        "flow_guidance_off": [full, ("zero_flow", {"flow_guidance": False})],
        "flow_update_off": [full, ("no_flow_update", {"flow_update": False})],
        "mlp_off": [full, ("no_mlp", {"gda_mlp": False})],
        "groups_heads": [("G=1,heads=1", {"gda_groups": 1, "gda_heads": 1}),
                         ("G=1,heads=2", {"gda_groups": 1, "gda_heads": 2}),
                         ("G=2,heads=2", {"gda_groups": 2, "gda_heads": 2})],
    }


VARIANTS = tuple(_variant_table(ModelConfig()))


@dataclass
class AblationData:
    train: list                      # (lq, hq, flows) triples
    heldout: tuple


def ablation_data(seed: int, num_frames: int = 4, lq_size: int = 16, num_clips: int = 4,
                  max_motion: float = 1.5, band: float = 0.1) -> AblationData:
    """Translating clips with random per-clip motion (LQ pixels per frame), BI degraded."""
    rng = np.random.default_rng([seed, 7])
    hq_size = 4 * lq_size

    def clip(k: int):
        step = rng.uniform(-max_motion, max_motion, size=2)
        motion = np.tile(step * 4.0, (num_frames - 1, 1))
        video = gen_synthetic_video(int(rng.integers(1 << 31)), num_frames, hq_size, hq_size, motion, band=band)
        flows = FlowProvider("synthetic_gt", motion=motion / 4.0).consecutive_flows(num_frames, lq_size, lq_size)
        return degrade(video.hq, "BI"), video.hq, flows

    train_clips = [clip(k) for k in range(num_clips)]
    return AblationData(train_clips, clip(num_clips))


@dataclass
class AblationRow:
    variant: str
    setting: str
    seed: int
    steps: int
    final_train_loss: float
    heldout_loss: float
    heldout_psnr: float


ABLATION_COLUMNS = ["variant", "setting", "seed", "steps", "final_train_loss", "heldout_loss", "heldout_psnr"]


def run_ablation(variant: str, seeds=(0,), steps: int = 1000, base: ModelConfig | None = None,
                 lr: float = 1e-3, data_kwargs: dict | None = None, log=None) -> list[AblationRow]:
    """Train every setting of ``variant`` identically; only the variant flag differs."""
    base = base or ModelConfig()
    table = _variant_table(base)
    if variant not in table:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {', '.join(table)}")
    rows = []
    for seed in seeds:
        data = ablation_data(seed, num_frames=base.num_frames, **(data_kwargs or {}))
        for setting, overrides in table[variant]:
            cfg = base.replace(seed=seed, **overrides)
            model = build(cfg)
            batches = [(prepare_input(model, lq, fl), hq.astype(model.dtype)) for lq, hq, fl in data.train]
            losses = train(model, batches, steps, lr=lr)
            lq, hq, fl = data.heldout
            prep = prepare_input(model, lq, fl)
            out = forward(model, prep).data
            row = AblationRow(variant, setting, seed, steps, float(np.mean(losses[-len(batches):])),
                              evaluate_loss(model, prep, hq), psnr(out, hq))
            rows.append(row)
            if log is not None:
                log(row)
    return rows


def write_ablation_csv(rows: list[AblationRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r.variant, r.setting, r.seed, r.steps, repr(r.final_train_loss),
                        repr(r.heldout_loss), repr(r.heldout_psnr)])


# ---------------------------------------------------------------- offsets

OFFSET_COLUMNS = ["t", "n", "n_src", "g", "m", "y", "x", "dy", "dx", "attention_weight"]


def collect_offsets(model, lq: np.ndarray, flows: ConsecutiveFlows | None = None, module: int = 1) -> list[tuple]:
    """Per-pixel offsets and head-averaged attention weights of refinement module ``module``."""
    if not 1 <= module <= len(model.refine):
        raise ValueError(f"module {module} out of range 1..{len(model.refine)}")
    rows = []

    def record(i, t, diag):
        if i == module:
            rows.extend(diag.rows(t))

    forward(model, lq, flows, record=record)
    return rows


def write_offsets_csv(rows, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OFFSET_COLUMNS)
        for r in rows:
            w.writerow([int(v) for v in r[:7]] + [repr(float(v)) for v in r[7:]])


# ---------------------------------------------------------------- plots

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def svg_line_plot(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
                  width: int = 480, height: int = 300) -> str:
    """Self-contained SVG line chart; ``series`` maps label -> (xs, ys)."""
    pad = 50
    xs = np.concatenate([np.asarray(v[0], dtype=float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], dtype=float) for v in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(min(ys.min(), 0.0)), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{pad / 2}" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">{_esc(xlabel)}</text>',
           f'<text x="14" y="{height / 2}" text-anchor="middle" transform="rotate(-90 14 {height / 2})">'
           f'{_esc(ylabel)}</text>',
           f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end">{y1:.3g}</text>',
           f'<text x="{pad}" y="{height - pad + 14}" text-anchor="middle">{x0:.3g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="middle">{x1:.3g}</text>']
    for k, (label, (sx, sy)) in enumerate(series.items()):
        colour = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(float(a)):.2f},{py(float(b)):.2f}" for a, b in zip(sx, sy))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * (k + 1)}" text-anchor="end" fill="{colour}">'
                   f'{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
