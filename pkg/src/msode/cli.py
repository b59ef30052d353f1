"""Command-line entry point: simulate, train-i2i, train-reg, register, evaluate.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
MSODE_NUM_THREADS caps torch's intra-op thread pool. Every command takes
--seed and validates its inputs before heavy work; reports and figures are
written as files (no interactive UI).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import evalm, plots
from .i2i import I2IModels, I2ITrainConfig, train_i2i
from .odecore import parse_schedule
from .synth import MOTION_PRESETS, MotionSpec, PhantomSpec, generate_dataset, read_dataset
from .train_reg import RegModel, RegTrainConfig, train_registration
from .transforms import HybridParams, save_params
from .volume import NumericsError, read_mv01, write_mv01, warp


class UsageError(ValueError):
    pass


def _load_json(path, what: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"{what} {path} is not valid JSON: {e}") from None


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


def cmd_simulate(args) -> int:
    _require(args.pairs >= 0, "--pairs must be >= 0")
    _require(args.dims >= 16, "--dims must be >= 16")
    if args.preset:
        motion = MotionSpec.preset(args.preset, seed=args.seed)
    else:
        _require(args.kind is not None, "give --preset or --kind")
        motion = MotionSpec(kind=args.kind, rot_range_deg=args.rot_deg,
                            trans_range_mm=args.trans_mm,
                            bspline_sigma_mm=args.sigma_mm, seed=args.seed)
    phantom = PhantomSpec(dims=(args.dims,) * 3, n_modalities=args.modalities,
                          noise_std=args.noise_std, bias_strength=args.bias,
                          seed=args.seed)
    ds = generate_dataset(phantom, motion, args.pairs, args.out,
                          cross_modal=args.cross_modal)
    print(f"wrote {ds.n_pairs} pairs to {args.out}")
    return 0


def _dataset_volumes(dataset):
    vols = []
    for i in range(dataset.n_pairs):
        pair = dataset.load_pair(i)
        vols.append(pair.moving)
        vols.append(pair.fixed)
    return vols


def cmd_train_i2i(args) -> int:
    doc = _load_json(args.config, "config") if args.config else {}
    if args.iters is not None:
        doc["iters"] = args.iters
    doc.setdefault("seed", args.seed)
    doc["out_dir"] = args.out
    config = I2ITrainConfig.from_dict(doc)

    dataset = read_dataset(args.dataset)
    _require(dataset.n_pairs > 0, "dataset is empty")
    volumes = _dataset_volumes(dataset)
    os.makedirs(args.out, exist_ok=True)
    resolved = {**doc, "lambda_weights": vars(config.weights)}
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(resolved, f, indent=1)
    models, history = train_i2i(volumes, config)
    plots.plot_loss_curves(history, os.path.join(args.out, "i2i_losses.png"),
                           title="translation training")
    print(f"trained i2i for {config.iters} iterations; checkpoints in {args.out}")
    return 0


def cmd_train_reg(args) -> int:
    doc = _load_json(args.config, "config") if args.config else {}
    for key in ("kind", "schedule", "metric", "iters", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if args.encoder:
        doc["encoder_ckpt"] = args.encoder
    doc.setdefault("seed", args.seed)
    doc["out_dir"] = args.out
    config = RegTrainConfig.from_dict(doc)
    if config.schedule is not None:
        parse_schedule(config.schedule, config.T)   # validate before training
    dataset = read_dataset(args.dataset)
    _require(dataset.n_pairs > config.val_pairs, "dataset too small for val_pairs")
    model, history = train_registration(dataset, config)
    flat = history if "loss" in history else history["rigid"]
    curves = {k: v for k, v in flat.items() if k in ("loss", "sim", "self", "reg")}
    plots.plot_loss_curves(curves, os.path.join(args.out, "reg_losses.png"),
                           title=f"{config.kind} registration training")
    print(f"trained {config.kind} model; saved under {args.out}/model")
    return 0


def cmd_register(args) -> int:
    model = RegModel.load(args.model)
    if args.schedule:
        parse_schedule(args.schedule, model.T)
    moving = read_mv01(args.moving)
    fixed = read_mv01(args.fixed)
    if moving.dims != fixed.dims:
        raise ValueError(f"moving dims {moving.dims} != fixed dims {fixed.dims}")
    torch.manual_seed(args.seed)
    params, field_total, traces, moved = model.register(moving, fixed, args.schedule)

    os.makedirs(args.out, exist_ok=True)
    out_params = params[0] if len(params) == 1 else HybridParams(params[0], params[1])
    save_params(out_params, os.path.join(args.out, "params.json"))
    write_mv01(moved, os.path.join(args.out, "warped.mv01"))
    trace_doc = {"nfe_per_scale": [n for t in traces for n in t.nfe_per_scale],
                 "wall_time_s": sum(t.wall_time_s for t in traces),
                 "per_stage": [t.to_json() for t in traces]}
    with open(os.path.join(args.out, "trace.json"), "w") as f:
        json.dump(trace_doc, f, indent=1)
    print(f"registered; outputs in {args.out} (NFE {trace_doc['nfe_per_scale']})")
    return 0


def cmd_evaluate(args) -> int:
    dataset = read_dataset(args.dataset)
    _require(args.model is not None or args.identity,
             "give --model and/or --identity for something to evaluate")
    motion = dataset.meta.get("motion", {}).get("kind", "unknown")
    torch.manual_seed(args.seed)
    reports = []
    if args.model:
        model = RegModel.load(args.model)
        if args.schedule:
            parse_schedule(args.schedule, model.T)
        reports.append(evalm.benchmark(dataset, model.registrar(args.schedule),
                                       method=f"msodenet-{model.kind}", motion=motion))
    if args.identity:
        reports.append(evalm.benchmark(dataset, evalm.identity_registrar,
                                       method="identity", motion=motion))
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "report.csv")
    out_json = os.path.join(args.out, "report.json")
    evalm.write_report(reports, out_csv, out_json)
    if args.plot:
        plots.plot_metric_distributions(reports, os.path.join(args.out, "metrics.png"))
        history_path = args.model and os.path.join(os.path.dirname(args.model.rstrip("/")),
                                                   "history.json")
        if history_path and os.path.exists(history_path):
            with open(history_path) as f:
                history = json.load(f)
            flat = history if "loss" in history else history.get("rigid", {})
            curves = {k: v for k, v in flat.items() if k in ("loss", "sim", "self", "reg")}
            plots.plot_loss_curves(curves, os.path.join(args.out, "training_curves.png"))
    for rep in reports:
        agg = rep["aggregate"]
        print(f"{rep['method']:>20s} {rep['motion']:>10s}  dice {agg['dice_mean']:.3f} "
              f"({agg['dice_std']:.3f})  rmse_phi {agg['rmse_phi_mm_mean']:.3f} mm  "
              f"n={agg['n_pairs']} failed={rep['n_failed']}")
    print(f"report written to {out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msode",
                                description="Multi-scale neural-ODE 3D registration toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic registration dataset")
    sim.add_argument("--kind", choices=["rigid", "deformable", "hybrid"])
    sim.add_argument("--preset", choices=sorted(MOTION_PRESETS))
    sim.add_argument("--dims", type=int, default=48)
    sim.add_argument("--pairs", type=int, required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.add_argument("--modalities", type=int, default=2)
    sim.add_argument("--cross-modal", action="store_true")
    sim.add_argument("--rot-deg", type=float, default=0.0)
    sim.add_argument("--trans-mm", type=float, default=0.0)
    sim.add_argument("--sigma-mm", type=float, default=0.0)
    sim.add_argument("--noise-std", type=float, default=0.01)
    sim.add_argument("--bias", type=float, default=0.15)
    sim.set_defaults(func=cmd_simulate)

    ti = sub.add_parser("train-i2i", help="train the translation GAN / content encoder")
    ti.add_argument("--dataset", required=True)
    ti.add_argument("--out", required=True)
    ti.add_argument("--config")
    ti.add_argument("--iters", type=int)
    ti.add_argument("--seed", type=int, default=0)
    ti.set_defaults(func=cmd_train_i2i)

    tr = sub.add_parser("train-reg", help="train a registration model")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config")
    tr.add_argument("--kind", choices=["rigid", "bspline", "dense", "hybrid"])
    tr.add_argument("--schedule")
    tr.add_argument("--metric", choices=["l2", "mi", "content"])
    tr.add_argument("--encoder", help="i2i checkpoint dir for the content metric")
    tr.add_argument("--iters", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_train_reg)

    reg = sub.add_parser("register", help="register one moving volume to a fixed volume")
    reg.add_argument("--model", required=True)
    reg.add_argument("--moving", required=True)
    reg.add_argument("--fixed", required=True)
    reg.add_argument("--out", required=True)
    reg.add_argument("--schedule", help="solver schedule override")
    reg.add_argument("--seed", type=int, default=0)
    reg.set_defaults(func=cmd_register)

    ev = sub.add_parser("evaluate", help="benchmark a model over a dataset")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--model")
    ev.add_argument("--identity", action="store_true",
                    help="also evaluate the identity baseline")
    ev.add_argument("--schedule")
    ev.add_argument("--plot", action="store_true")
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("MSODE_NUM_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except (ValueError, RuntimeError):
            print(f"warning: bad MSODE_NUM_THREADS={threads!r}", file=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericsError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
