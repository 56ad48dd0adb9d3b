"""Command-line pipeline: generate, fit, inspect, forecast and synthesize.

Subcommands operate on plain files (.flo flow, PNG frames and labels, JSON
manifests) so each stage can be rerun or swapped independently:

    lamoco gen --out clip/
    lamoco fit clip/flows clip/segs --out fit/scene.json --layers 2
    lamoco flow fit/scene.json --t1 0 --t2 3 --out pair.flo
    lamoco forecast fit/scene.json --k 2 --out fit/future.json
    lamoco synth fit/future.json clip/frames --out pred/
    lamoco eval --pred pred/ --truth clip/frames --out metrics.json
    lamoco render-flow pair.flo --out pair.png

``LAMOCO_THREADS`` caps the torch thread pool used by the fit.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io, metrics, scenegen, synthesis
from .decompose import LossWeights, fit_decomposition
from .errors import LamocoError
from .forecast import jitter_samples, predict
from .warpfield import flow_to_color


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _sorted_files(directory, pattern):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"directory not found: {d}")
    return sorted(d.glob(pattern))


def _parse_grid(text):
    try:
        rows, cols = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected ROWSxCOLS, e.g. 4x4, got {text!r}")
    if rows < 2 or cols < 2:
        raise argparse.ArgumentTypeError("grids need at least 2x2 points")
    return rows, cols


# -------------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    if args.config is not None:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            return _fail(f"config file not found: {cfg_path}")
        with open(cfg_path) as fp:
            spec_dict = json.load(fp)
        spec = scenegen.SceneSpec.from_dict(spec_dict)
    else:
        spec = scenegen.two_object_benchmark_spec()
    if args.seed is not None:
        d = spec.to_dict()
        d["seed"] = args.seed
        spec = scenegen.SceneSpec.from_dict(d)

    truth = scenegen.generate(spec)
    out = Path(args.out)
    frames_dir = out / "frames"
    flows_dir = out / "flows"
    segs_dir = out / "segs"
    for d in (frames_dir, flows_dir, segs_dir):
        d.mkdir(parents=True, exist_ok=True)

    with open(out / "spec.json", "w") as fp:
        json.dump(spec.to_dict(), fp, indent=2)
        fp.write("\n")
    t_count = truth.frames.shape[0]
    for t in range(t_count):
        io.write_frame_png(frames_dir / f"frame_{t:04d}.png", truth.frames[t])
        labels = np.argmax(truth.segs[t].probs, axis=0)
        io.write_seg_png(segs_dir / f"seg_{t:04d}.png", labels)
    for k, flow in enumerate(truth.flows):
        io.write_flo(flows_dir / f"flow_{k:04d}.flo", flow)
    io.write_class_table(segs_dir / "classes.json",
                         truth.segs[0].names, truth.segs[0].stuff)
    print(f"wrote {t_count} frames to {out}")
    return 0


# -------------------------------------------------------------------- fit

def _load_fit_config(path):
    with open(path) as fp:
        cfg = json.load(fp)
    unknown = set(cfg) - {"weights", "settings"}
    if unknown:
        raise LamocoError(
            f"unknown config sections {sorted(unknown)}; "
            "expected 'weights' and/or 'settings'")
    return cfg.get("weights", {}), cfg.get("settings", {})


def cmd_fit(args) -> int:
    from .fitting import FitSettings

    try:
        flow_files = _sorted_files(args.flows, "*.flo")
        seg_files = _sorted_files(args.segs, "*.png")
    except FileNotFoundError as exc:
        return _fail(str(exc))
    if not flow_files:
        return _fail(f"no .flo files in {args.flows}")
    if not seg_files:
        return _fail(f"no segmentation .png files in {args.segs}")
    table = Path(args.segs) / "classes.json"
    if not table.is_file():
        return _fail(f"missing class table: {table}")
    if len(seg_files) != len(flow_files) + 1:
        return _fail(
            f"{len(seg_files)} segmentations need {len(seg_files) - 1} "
            f"flow files, found {len(flow_files)} in {args.flows}")

    weight_cfg, setting_cfg = {}, {}
    if args.config is not None:
        if not Path(args.config).is_file():
            return _fail(f"config file not found: {args.config}")
        weight_cfg, setting_cfg = _load_fit_config(args.config)
    overrides = {"lambda_o": args.lambda_o, "lambda_f": args.lambda_f,
                 "lambda_r": args.lambda_r, "tau_m": args.tau_m}
    weight_cfg.update({k: v for k, v in overrides.items() if v is not None})
    setting_cfg["num_layers"] = args.layers
    setting_cfg["grid_obj"] = tuple(args.grid_obj)
    setting_cfg["grid_bg"] = tuple(args.grid_bg)
    setting_cfg["seed"] = args.seed
    if args.iterations is not None:
        setting_cfg["iterations"] = args.iterations
    try:
        weights = LossWeights(**weight_cfg)
        settings = FitSettings(**setting_cfg)
    except TypeError as exc:
        return _fail(f"bad fit configuration: {exc}")

    flows = [io.read_flo(p) for p in flow_files]
    segs = [io.seg_from_files(p, table) for p in seg_files]
    decomp = fit_decomposition(flows, segs, weights=weights, settings=settings)

    hyper = {"weights": asdict(weights), "settings": asdict(settings)}
    hyper["settings"]["grid_obj"] = list(settings.grid_obj)
    hyper["settings"]["grid_bg"] = list(settings.grid_bg)
    manifest = io.Manifest.from_decomposition(decomp, hyper)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.save_manifest(manifest, out)
    loss_log = out.with_suffix(".loss.txt")
    with open(loss_log, "w") as fp:
        for entry in decomp.loss_history:
            fp.write(f"{entry['total']!r}\n")
    state = "aborted on non-finite loss" if decomp.aborted_non_finite else "ok"
    print(f"fit {state}: {len(decomp.loss_history)} accepted steps, "
          f"manifest {out}")
    return 0


# ------------------------------------------------------------------- flow

def cmd_flow(args) -> int:
    if not Path(args.manifest).is_file():
        return _fail(f"manifest not found: {args.manifest}")
    manifest = io.load_manifest(args.manifest)
    height = width = None
    if args.resolution is not None:
        height, width = args.resolution
    flow = io.manifest_flow(manifest, args.t1, args.t2,
                            height=height, width=width)
    io.write_flo(args.out, flow)
    print(f"wrote flow {args.t2} -> {args.t1} to {args.out}")
    return 0


# --------------------------------------------------------------- forecast

def cmd_forecast(args) -> int:
    if not Path(args.manifest).is_file():
        return _fail(f"manifest not found: {args.manifest}")
    manifest = io.load_manifest(args.manifest)
    observed = manifest.trajectory_set()
    future = predict(observed, args.model, args.k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.samples > 1:
        if args.sigma <= 0:
            return _fail("--samples > 1 needs --sigma > 0")
        drawn = jitter_samples(observed, args.model, args.k, args.sigma,
                               args.samples, args.seed)
        for i, sample in enumerate(drawn):
            io.save_manifest(manifest.with_forecast(sample),
                             out.with_suffix(f".s{i:02d}.json"))
    io.save_manifest(manifest.with_forecast(future), out)
    print(f"forecast {args.k} steps ({args.model}) into {out}")
    return 0


# ------------------------------------------------------------------ synth

def cmd_synth(args) -> int:
    if not Path(args.manifest).is_file():
        return _fail(f"manifest not found: {args.manifest}")
    manifest = io.load_manifest(args.manifest)
    if manifest.predicted_count < 1:
        return _fail("manifest has no forecast steps; run forecast first")
    try:
        frame_files = _sorted_files(args.frames, "*.png")
    except FileNotFoundError as exc:
        return _fail(str(exc))
    if len(frame_files) < manifest.observed_count:
        return _fail(
            f"need {manifest.observed_count} past frames, "
            f"found {len(frame_files)} in {args.frames}")
    frames = [io.read_frame_png(p)
              for p in frame_files[:manifest.observed_count]]
    segs = None
    if args.segs is not None:
        table = Path(args.segs) / "classes.json"
        if not table.is_file():
            return _fail(f"missing class table: {table}")
        seg_files = _sorted_files(args.segs, "*.png")
        if len(seg_files) < manifest.observed_count:
            return _fail(f"need {manifest.observed_count} segmentations "
                         f"in {args.segs}")
        segs = [io.seg_from_files(p, table)
                for p in seg_files[:manifest.observed_count]]
    decomp = manifest.decomposition(segs)
    future = manifest.trajectory_set()
    outs = synthesis.synthesize_future(frames, decomp, future,
                                       propagate=not args.no_propagate,
                                       fill=not args.no_fill)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, (img, _) in enumerate(outs):
        step = manifest.observed_count + k
        io.write_frame_png(out / f"pred_{step:04d}.png", np.clip(img, 0.0, 1.0))
    print(f"wrote {len(outs)} predicted frames to {out}")
    return 0


# ------------------------------------------------------------------- eval

def _pair_files(pred_dir, truth_dir, pattern):
    pred = _sorted_files(pred_dir, pattern)
    truth = _sorted_files(truth_dir, pattern)
    if len(pred) != len(truth):
        raise LamocoError(
            f"{pred_dir} has {len(pred)} files but {truth_dir} has "
            f"{len(truth)} ({pattern})")
    if not pred:
        raise LamocoError(f"no {pattern} files in {pred_dir}")
    return list(zip(pred, truth))


def _label_iou(pred_labels, truth_labels) -> float:
    scores = []
    for c in np.unique(truth_labels):
        p = pred_labels == c
        t = truth_labels == c
        if not (p.any() or t.any()):
            continue
        scores.append(metrics.mask_iou(p.astype(float), t.astype(float)))
    return float(np.mean(scores))


def cmd_eval(args) -> int:
    report = {"frames": [], "flows": [], "segs": []}
    try:
        for pred_p, truth_p in _pair_files(args.pred, args.truth, "*.png"):
            pred = io.read_frame_png(pred_p)
            truth = io.read_frame_png(truth_p)
            report["frames"].append({
                "pred": pred_p.name, "truth": truth_p.name,
                "psnr": metrics.psnr(pred, truth),
                "ssim": metrics.ssim(pred, truth),
                "l1": synthesis.pixel_l1(pred, truth),
            })
        if args.pred_flows is not None:
            for pred_p, truth_p in _pair_files(args.pred_flows,
                                               args.truth_flows, "*.flo"):
                pf = io.read_flo(pred_p)
                tf = io.read_flo(truth_p)
                report["flows"].append({
                    "pred": pred_p.name, "truth": truth_p.name,
                    "epe": metrics.epe(pf, tf),
                })
        if args.pred_segs is not None:
            for pred_p, truth_p in _pair_files(args.pred_segs,
                                               args.truth_segs, "*.png"):
                report["segs"].append({
                    "pred": pred_p.name, "truth": truth_p.name,
                    "iou": _label_iou(io.read_seg_png(pred_p),
                                      io.read_seg_png(truth_p)),
                })
    except (FileNotFoundError, LamocoError) as exc:
        return _fail(str(exc))

    summary = {}
    for key, metric_names in (("frames", ("psnr", "ssim", "l1")),
                              ("flows", ("epe",)), ("segs", ("iou",))):
        for m in metric_names:
            values = [row[m] for row in report[key]]
            if values:
                summary[f"{m}_mean"] = float(np.mean(values))
    report["summary"] = summary
    with open(args.out, "w") as fp:
        json.dump(report, fp, indent=2)
        fp.write("\n")
    shown = ", ".join(f"{k} {v:.4f}" for k, v in summary.items())
    print(f"eval: {shown} -> {args.out}")
    return 0


# ------------------------------------------------------------ render-flow

def cmd_render_flow(args) -> int:
    src = Path(args.input)
    out = Path(args.out)
    if src.is_dir():
        files = sorted(src.glob("*.flo"))
        if not files:
            return _fail(f"no .flo files in {src}")
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / (p.stem + ".png") for p in files]
    elif src.is_file():
        files = [src]
        targets = [out]
    else:
        return _fail(f"flow input not found: {src}")
    for p, t in zip(files, targets):
        color = flow_to_color(io.read_flo(p), args.max_magnitude)
        io.write_frame_png(t, color)
    print(f"rendered {len(files)} flow image(s)")
    return 0


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lamoco",
        description="Layered motion decomposition, forecasting and synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="materialize a synthetic scene")
    p.add_argument("--out", required=True, help="output clip directory")
    p.add_argument("--config", help="scene spec JSON (default: benchmark)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the spec seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", help="fit a layered decomposition to a clip")
    p.add_argument("flows", help="directory of t->t+1 .flo files")
    p.add_argument("segs", help="directory of label PNGs plus classes.json")
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--config", help="JSON with 'weights'/'settings' sections")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=16,
                   help="object layer slots (default 16)")
    p.add_argument("--grid-obj", type=_parse_grid, default=(4, 4),
                   metavar="RxC", help="object control grid (default 4x4)")
    p.add_argument("--grid-bg", type=_parse_grid, default=(8, 16),
                   metavar="RxC", help="background control grid (default 8x16)")
    p.add_argument("--tau-m", type=float, default=None,
                   help="moving-foreground flow threshold (default 0.005)")
    p.add_argument("--lambda-o", type=float, default=None)
    p.add_argument("--lambda-f", type=float, default=None)
    p.add_argument("--lambda-r", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("flow", help="composited flow between two steps")
    p.add_argument("manifest")
    p.add_argument("--t1", type=int, required=True, help="source step")
    p.add_argument("--t2", type=int, required=True, help="target step")
    p.add_argument("--out", required=True, help="output .flo path")
    p.add_argument("--resolution", type=_parse_grid, default=None,
                   metavar="HxW", help="sample at this resolution")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("forecast", help="extend a manifest into the future")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output manifest path")
    p.add_argument("--k", type=int, required=True, help="steps to predict")
    p.add_argument("--model", default="linear",
                   choices=("constant", "linear", "quadratic"))
    p.add_argument("--sigma", type=float, default=0.0,
                   help="jitter noise scale for sampled futures")
    p.add_argument("--samples", type=int, default=1,
                   help="write this many jittered futures")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("synth", help="render predicted future frames")
    p.add_argument("manifest", help="manifest with forecast steps")
    p.add_argument("frames", help="directory with the observed frames")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--segs", default=None,
                   help="segmentation directory for mask refinement")
    p.add_argument("--no-propagate", action="store_true",
                   help="do not carry filled content across steps")
    p.add_argument("--no-fill", action="store_true",
                   help="leave holes black instead of diffusing")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predicted frame directory")
    p.add_argument("--truth", required=True, help="reference frame directory")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--pred-flows", default=None)
    p.add_argument("--truth-flows", default=None)
    p.add_argument("--pred-segs", default=None)
    p.add_argument("--truth-segs", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render-flow", help="flow files to color PNGs")
    p.add_argument("input", help=".flo file or directory")
    p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("--max-magnitude", type=float, default=None,
                   help="fix the color saturation scale")
    p.set_defaults(func=cmd_render_flow)
    return parser


def _apply_thread_cap() -> None:
    cap = os.environ.get("LAMOCO_THREADS")
    if not cap:
        return
    count = max(1, int(cap))
    os.environ.setdefault("OMP_NUM_THREADS", str(count))
    import torch

    torch.set_num_threads(count)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
    except ValueError:
        return _fail("LAMOCO_THREADS must be an integer")
    try:
        return args.func(args)
    except LamocoError as exc:
        return _fail(str(exc))
    except FileNotFoundError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
