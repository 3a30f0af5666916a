"""Command-line front end: forward, train-toy, gradcheck, params, hack-frame, ablate, export-offsets.

Errors end the process with a nonzero status and one stderr line of the
form ``rvrt-error code=E_XXX message=...``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .data import degrade, gen_synthetic_video, read_video, write_video
from .flow import FlowProvider
from .model import (
    ModelConfig, TrainingError, WeightFileError, build, forward, gda_audit, load_config, load_into,
    param_count, prepare_input, save, train, weights_digest,
)
from .tensor import TensorFileError

EXIT_CODES = {
    "E_USAGE": 2, "E_CONFIG": 3, "E_MISSING_FILE": 4, "E_INPUT": 5, "E_WEIGHTS": 6,
    "E_TRAINING": 7, "E_GRADCHECK": 8,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config handling

def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON model config; flags below override its values")
    g = p.add_argument_group("model config overrides")
    for f in dataclasses.fields(ModelConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "window":
            g.add_argument(flag, type=int, nargs=2, metavar=("H", "W"))
        elif f.type == "bool":
            g.add_argument(flag, type=_bool, metavar="BOOL")
        else:
            g.add_argument(flag, type={"int": int, "float": float}.get(f.type, str))


def resolve_config(args) -> ModelConfig:
    base: dict = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise CliError("E_MISSING_FILE", f"config not found: {args.config}")
        try:
            base = load_config(args.config).to_dict()
        except ValueError as exc:
            raise CliError("E_CONFIG", str(exc)) from exc
    for f in dataclasses.fields(ModelConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            base[f.name] = val
    try:
        return ModelConfig.from_dict(base)
    except (ValueError, TypeError) as exc:
        raise CliError("E_CONFIG", str(exc)) from exc


def _model(args, cfg: ModelConfig):
    model = build(cfg)
    if getattr(args, "weights", None):
        if not os.path.exists(args.weights):
            raise CliError("E_MISSING_FILE", f"weights not found: {args.weights}")
        load_into(model, args.weights)
    return model


def _flows(args, t: int, h: int, w: int):
    if not getattr(args, "flows", None):
        return None
    paths = {"from_prev": os.path.join(args.flows, "from_prev.rvt"),
             "from_next": os.path.join(args.flows, "from_next.rvt")}
    for p in paths.values():
        if not os.path.exists(p):
            raise CliError("E_MISSING_FILE", f"flow file not found: {p}")
    return FlowProvider("file", paths=paths).consecutive_flows(t, h, w)


def _read_input(path: str) -> np.ndarray:
    if not os.path.isdir(path):
        raise CliError("E_MISSING_FILE", f"input directory not found: {path}")
    return read_video(path)


def write_manifest(path: str, args, cfg: ModelConfig | None, inputs=(), outputs=()) -> None:
    weights = getattr(args, "weights", None) or getattr(args, "out_weights", None)
    manifest = {
        "command": args.command,
        "version": __version__,
        "config_path": getattr(args, "config", None),
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": args.seed,
        "inputs": list(inputs),
        "outputs": list(outputs),
        "weights_hash": weights_digest(weights) if weights and os.path.exists(weights) else None,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest_path(out: str) -> str:
    return os.path.join(out, "manifest.json") if os.path.isdir(out) else out + ".manifest.json"


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _synthetic_clip(cfg: ModelConfig, seed: int, frames: int, size: int, motion: float, band: float = 0.1,
                    degradation: str = "BI"):
    """Translating clip with random motion; x4 configs use ``degradation``, x1 configs add sigma=25 noise."""
    rng = np.random.default_rng([seed, 11])
    step = rng.uniform(-motion, motion, size=2)
    m = np.tile(step * cfg.scale, (frames - 1, 1))
    video = gen_synthetic_video(seed, frames, size * cfg.scale, size * cfg.scale, m, band=band)
    if cfg.scale == 4:
        lq = degrade(video.hq, degradation)
    else:
        lq = degrade(video.hq, "noise", sigma=25, rng=np.random.default_rng([seed, 12]))
    flows = FlowProvider("synthetic_gt", motion=m / cfg.scale).consecutive_flows(frames, size, size)
    return lq, video.hq, flows


# ---------------------------------------------------------------- commands

def cmd_forward(args) -> int:
    cfg = resolve_config(args).replace(seed=args.seed)
    model = _model(args, cfg)
    lq = _read_input(args.input)
    flows = _flows(args, *lq.shape[:3])
    out = forward(model, lq, flows).data
    paths = write_video(args.output, np.clip(out, 0.0, 1.0))
    write_manifest(_manifest_path(args.output), args, cfg, [args.input], paths)
    return 0


def cmd_train_toy(args) -> int:
    cfg = resolve_config(args)
    cfg = cfg.replace(seed=args.seed)
    model = build(cfg)
    from .experiments import overfit_clip
    lq, hq, flows = overfit_clip(cfg, args.size, args.seed, args.band, args.degradation, args.motion)
    prep = prepare_input(model, lq, flows)
    losses = train(model, [(prep, hq.astype(model.dtype))], args.steps, lr=args.lr, lr_min=args.lr_min)
    _ensure_parent(args.out)
    save(model, args.out)
    curve = args.loss_csv or os.path.splitext(args.out)[0] + "_loss.csv"
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for k, v in enumerate(losses):
            w.writerow([k, repr(v)])
    args.out_weights = args.out
    write_manifest(_manifest_path(args.out), args, cfg, [], [args.out, curve])
    print(f"initial_loss={losses[0]:.6g} final_loss={losses[-1]:.6g} "
          f"reduction={1 - losses[-1] / losses[0]:.4f}", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuites import run_suite
    reports = run_suite(args.suite, seed=args.seed, max_elements=args.max_elements)
    out = args.out or f"gradcheck_{args.suite}.csv"
    _ensure_parent(out)
    ok = True
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "tensor", "checked", "max_rel_err", "passed"])
        for case, rep in reports.items():
            for name, n, err, passed in rep.rows():
                w.writerow([case, name, n, repr(float(err)), int(passed)])
                ok &= passed
    write_manifest(_manifest_path(out), args, None, [], [out])
    if not ok:
        raise CliError("E_GRADCHECK", f"suite {args.suite} has relative errors >= 1e-4; see {out}")
    return 0


def cmd_params(args) -> int:
    cfg = resolve_config(args)
    model = build(cfg)
    counts = param_count(model)
    lines = [f"{name:24s} {n:10d}" for name, n in counts.items()]
    from .gda import gda_param_count
    _, dcn = gda_param_count(cfg.channels, cfg.mlp_ratio, cfg.candidates, cfg.expansion)
    for name, measured, formula in gda_audit(model):
        status = "ok" if measured == formula else "MISMATCH"
        lines.append(f"audit {name}: projections+mlp={measured} (3+2R)C^2={formula} {status}; "
                     f"deformable conv MC^2={dcn}")
    print("\n".join(lines))
    if args.out:
        _ensure_parent(args.out)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["module", "parameters"])
            for name, n in counts.items():
                w.writerow([name, n])
        write_manifest(_manifest_path(args.out), args, cfg, [], [args.out])
    return 0


def cmd_hack_frame(args) -> int:
    from .experiments import hack_frame_experiment, model_restorer
    cfg = resolve_config(args)
    cfg = cfg.replace(seed=args.seed)
    model = _model(args, cfg)
    if args.input:
        lq = _read_input(args.input)
        hq = _read_input(args.target) if args.target else None
        flows = _flows(args, *lq.shape[:3])
    else:
        lq, hq, flows = _synthetic_clip(cfg, args.seed, args.frames, args.size, args.motion)
    restore = model_restorer(model, flows)
    if hq is None:
        hq = restore(lq)
    if not 0 <= args.frame < len(lq):
        raise CliError("E_INPUT", f"frame {args.frame} out of range for {len(lq)} frames")
    res = hack_frame_experiment(restore, lq, hq, args.frame)
    _ensure_parent(args.out)
    res.write_csv(args.out)
    outputs = [args.out]
    if args.svg:
        with open(args.svg, "w") as fh:
            fh.write(res.svg())
        outputs.append(args.svg)
    write_manifest(_manifest_path(args.out), args, cfg, [args.input] if args.input else [], outputs)
    return 0


def cmd_ablate(args) -> int:
    from .experiments import run_ablation, write_ablation_csv
    cfg = resolve_config(args)
    seeds = [args.seed + k for k in range(args.seeds)]
    rows = run_ablation(args.variant, seeds=seeds, steps=args.steps, base=cfg, lr=args.lr,
                        log=lambda r: print(f"{r.variant} {r.setting} seed={r.seed} heldout_loss={r.heldout_loss:.6g}",
                                            file=sys.stderr))
    out = args.out or f"ablation_{args.variant}.csv"
    _ensure_parent(out)
    write_ablation_csv(rows, out)
    write_manifest(_manifest_path(out), args, cfg, [], [out])
    return 0


def cmd_export_offsets(args) -> int:
    from .experiments import collect_offsets, write_offsets_csv
    cfg = resolve_config(args)
    model = _model(args, cfg)
    if cfg.alignment != "gda":
        raise CliError("E_CONFIG", "export-offsets needs alignment=gda")
    lq = _read_input(args.input)
    flows = _flows(args, *lq.shape[:3])
    if not 1 <= args.module <= cfg.num_modules:
        raise CliError("E_INPUT", f"module {args.module} out of range 1..{cfg.num_modules}")
    rows = collect_offsets(model, lq, flows, module=args.module)
    _ensure_parent(args.out)
    write_offsets_csv(rows, args.out)
    write_manifest(_manifest_path(args.out), args, cfg, [args.input], [args.out])
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    from .experiments import VARIANTS
    from .gradsuites import SUITES
    parser = argparse.ArgumentParser(prog="rvrt", description="Recurrent video restoration transformer toolkit.")
    parser.add_argument("--version", action="version", version=f"rvrt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="restore a directory of PPM frames")
    _add_config_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="directory of LQ .ppm frames")
    p.add_argument("--output", required=True, help="directory for restored frames")
    p.add_argument("--flows", help="directory with from_prev.rvt / from_next.rvt (zero flows if omitted)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("train-toy", help="overfit one synthetic clip")
    _add_config_flags(p)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--loss-csv", help="loss curve path (default: next to the weights)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-min", type=float, default=1e-7)
    p.add_argument("--size", type=int, default=32, help="LQ frame size")
    p.add_argument("--motion", type=float, nargs=2, default=[0.125, 0.375], metavar=("DY", "DX"),
                   help="LQ pixels per frame")
    p.add_argument("--band", type=float, default=0.06, help="texture frequency cutoff, cycles per HQ pixel")
    p.add_argument("--degradation", choices=("BI", "BD"), default="BD", help="x4 degradation of the clip")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--out", help="report CSV (default gradcheck_<suite>.csv)")
    p.add_argument("--max-elements", type=int, help="entries probed per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter breakdown and GDA formula audit")
    _add_config_flags(p)
    p.add_argument("--out", help="optional CSV copy of the breakdown")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("hack-frame", help="zero one LQ frame and report per-frame PSNR drop")
    _add_config_flags(p)
    p.add_argument("--weights")
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--input", help="LQ frame directory (synthetic clip if omitted)")
    p.add_argument("--target", help="HQ frame directory for PSNR (clean output if omitted)")
    p.add_argument("--flows")
    p.add_argument("--frames", type=int, default=8, help="synthetic clip length")
    p.add_argument("--size", type=int, default=16, help="synthetic LQ frame size")
    p.add_argument("--motion", type=float, default=1.0)
    p.add_argument("--out", default="hack_frame.csv")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_hack_frame)

    p = sub.add_parser("ablate", help="train variants of one ablation and tabulate held-out metrics")
    _add_config_flags(p)
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-offsets", help="dump GDA offsets and attention weights")
    _add_config_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--flows")
    p.add_argument("--module", type=int, default=1)
    p.add_argument("--out", default="offsets.csv")
    p.set_defaults(func=cmd_export_offsets)

    for action in sub.choices.values():
        action.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print("rvrt-error code=E_USAGE message=invalid arguments", file=sys.stderr)
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except (FileNotFoundError, IsADirectoryError) as exc:
        code, msg = "E_MISSING_FILE", str(exc)
    except (WeightFileError, TensorFileError) as exc:
        code, msg = "E_WEIGHTS" if isinstance(exc, WeightFileError) else "E_INPUT", str(exc)
    except TrainingError as exc:
        code, msg = "E_TRAINING", str(exc)
    except ValueError as exc:
        code, msg = "E_INPUT", str(exc)
    print(f"rvrt-error code={code} message={json.dumps(msg)}", file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
