"""Command-line entry point: ``sacvit <command> ...``.

Exit codes: 0 success, 1 gradcheck tolerance failure, 2 input/config errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
import tempfile
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import cost
from .data import DataFormatError, load_dataset, read_raw_tensor, save_dataset, synth_blobs
from .encoder import as_tensors
from .model import (PRESETS, TINY, TOY, CheckpointError, ConfigError, ModelConfig, init_params,
                    load_checkpoint, save_checkpoint)
from .numerics import ShapeError, precision
from .pipeline import infer, infer_chunked
from .early_exit import run_ee_stage
from .clustering import build_partitions
from .sac import run_sac_stage
from .trainer import TrainConfig, gradcheck, train_toy

SWEEP_HEADER = ["eta", "exit_fraction", "ee_acc", "overall_acc", "expected_macs", "throughput"]
USER_ERRORS = (OSError, DataFormatError, CheckpointError, ConfigError, ShapeError, ValueError, KeyError, TypeError)


def _load_json_or_preset(spec: str) -> dict:
    if spec in PRESETS:
        return {"model": PRESETS[spec].to_dict()}
    try:
        data = json.loads(Path(spec).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{spec}: expected a JSON object")
    return data if "model" in data or "train" in data else {"model": data}


def model_config(spec: str) -> ModelConfig:
    return ModelConfig.from_dict(_load_json_or_preset(spec).get("model", {}))


def _write_atomic(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out_path = Path(out)
    fd, tmp = tempfile.mkstemp(dir=out_path.parent or ".", prefix=out_path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, out_path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True) + "\n"


def _load_dataset_for(cfg: ModelConfig, directory: str):
    ds = load_dataset(directory)
    want = (cfg.in_chans, *cfg.image_hw)
    if ds.images.shape[1:] != want:
        raise ShapeError(f"dataset images have shape {ds.images.shape[1:]}, model expects {want}")
    if ds.labels.min() < 0 or ds.labels.max() >= cfg.num_classes:
        raise DataFormatError(f"labels must lie in 0..{cfg.num_classes - 1}")
    return ds


def cmd_infer(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    img = read_raw_tensor(args.input)
    eta = cfg.eta if args.eta is None else args.eta
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    (outcome,) = infer(img, as_tensors(params), cfg, eta)
    report = cost.macs_sac_vit(cfg)
    macs = report.total_per_sample_exit if outcome.stage == "EE" else report.total_per_sample_full
    sys.stdout.write(_dump({
        "stage": outcome.stage,
        "class": outcome.predicted,
        "confidence": outcome.confidence,
        "macs": macs,
    }))
    return 0


def _parse_etas(text: str) -> list[float]:
    try:
        etas = sorted(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValueError(f"--etas must be a comma-separated list of numbers, got {text!r}") from None
    if not etas or any(not 0.0 <= e <= 1.0 for e in etas):
        raise ValueError("--etas needs values in [0, 1]")
    return etas


def sweep_rows(params, cfg: ModelConfig, ds, etas: list[float], time_it: bool = True) -> list[dict]:
    """One row per threshold: exits, accuracies, expected MACs and measured throughput."""
    w = as_tensors(params)
    ee = run_ee_stage(ds.images, w, cfg, eta=1.0)
    _, logits_sac = run_sac_stage(ds.images, w, cfg, ee.sequence, build_partitions(ee.trace, cfg))
    ee_pred = np.array([o.predicted for o in ee.outcomes])
    ee_conf = np.array([o.confidence for o in ee.outcomes])
    sac_pred = np.argmax(logits_sac.data, axis=1)
    report = cost.macs_sac_vit(cfg)
    n = len(ds)
    rows = []
    for eta in etas:
        exited = ee_conf > eta
        n_exit = int(exited.sum())
        final = np.where(exited, ee_pred, sac_pred)
        expected = Fraction(n * report.ee_total + (n - n_exit) * report.sac_total, n)
        throughput = float("nan")
        if time_it:
            t0 = time.perf_counter()
            infer_chunked(ds.images, w, cfg, eta)
            throughput = n / (time.perf_counter() - t0)
        rows.append({
            "eta": eta,
            "exit_fraction": n_exit / n,
            "ee_acc": float(np.mean(ee_pred[exited] == ds.labels[exited])) if n_exit else float("nan"),
            "overall_acc": float(np.mean(final == ds.labels)),
            "expected_macs": float(expected),
            "throughput": throughput,
        })
    return rows


def format_sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in rows:
        writer.writerow([
            repr(r["eta"]), repr(r["exit_fraction"]), f"{r['ee_acc']:.6f}", f"{r['overall_acc']:.6f}",
            f"{r['expected_macs']:.1f}", f"{r['throughput']:.2f}",
        ])
    return buf.getvalue()


def cmd_sweep(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    etas = _parse_etas(args.etas)
    ds = _load_dataset_for(cfg, args.dataset)
    rows = sweep_rows(params, cfg, ds, etas, time_it=not args.no_timing)
    _write_atomic(format_sweep_csv(rows), args.out)
    return 0


def cmd_bench(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    ds = _load_dataset_for(cfg, args.dataset)
    if args.batch <= 0 or args.repeat <= 0:
        raise ValueError("--batch and --repeat must be positive")
    w = as_tensors(params)
    eta = cfg.eta if args.eta is None else args.eta
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        infer_chunked(ds.images, w, cfg, eta, chunk=args.batch)
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    sys.stdout.write(_dump({
        "samples": len(ds), "batch": args.batch, "repeat": args.repeat, "eta": eta,
        "median_seconds": med, "throughput": len(ds) / med,
    }))
    return 0


def cmd_cost(args) -> int:
    cfg = model_config(args.config)
    report = cost.macs_sac_vit(cfg, clustered=not args.no_clustering)
    out = report.to_dict(args.exit_fraction)
    out["vanilla_full_res_macs"] = cost.vanilla_for_image(cfg, cfg.image_hw)
    out["vanilla_low_res_macs"] = cost.vanilla_for_image(cfg, (cfg.image_hw[0] // 2, cfg.image_hw[1] // 2))
    if args.budget is not None:
        out["budget"] = args.budget
        out["exit_fraction_for_budget"] = report.exit_fraction_for(args.budget)
    if args.crosscheck:
        res = cost.crosscheck(cfg, clustered=not args.no_clustering)
        out["analytic_vs_instrumented_delta"] = res.delta
    sys.stdout.write(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = model_config(args.tiny_config) if args.tiny_config else TINY
    results = {}
    with precision("f64"):
        params = init_params(cfg)
        rng = np.random.default_rng(cfg.seed)
        images = rng.standard_normal((2, cfg.in_chans, *cfg.image_hw))
        labels = np.arange(2) % cfg.num_classes
        for mode in ("CE+KL", "CE+CE"):
            for clustered in (False, True):
                rep = gradcheck(params, images, labels, mode, clustered)
                results[f"{mode}/{'phase2' if clustered else 'phase1'}"] = rep.max_rel_err
    worst = max(results.values())
    passed = worst < 1e-4
    sys.stdout.write(_dump({"passed": passed, "max_rel_err": worst, "per_run": results, "tolerance": 1e-4}))
    return 0 if passed else 1


def cmd_train(args) -> int:
    spec = _load_json_or_preset(args.config)
    cfg = ModelConfig.from_dict(spec.get("model", TOY.to_dict()))
    tcfg = TrainConfig(**spec.get("train", {}))
    ds = _load_dataset_for(cfg, args.dataset)
    params, log = train_toy(init_params(cfg), ds, tcfg, log_path=args.log)
    save_checkpoint(params, cfg, args.out)
    last = log[-1] if log else {}
    sys.stdout.write(_dump({"checkpoint": args.out, "epochs": len(log), "final": last}))
    return 0


def cmd_synth(args) -> int:
    ds = synth_blobs(args.n, (args.size, args.size), args.classes, seed=args.seed)
    save_dataset(ds, args.out)
    sys.stdout.write(_dump({"out": args.out, "samples": len(ds)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sacvit", description="Two-stage adaptive ViT inference toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="classify one raw tensor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--eta", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sweep", help="exit threshold sweep, CSV output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--etas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    p.add_argument("--out", help="CSV path (written atomically); stdout if omitted")
    p.add_argument("--no-timing", action="store_true", help="skip throughput measurement (column is nan)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="throughput of adaptive inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--eta", type=float)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("cost", help="analytic MAC report")
    p.add_argument("--config", default="deit-s", help=f"JSON file or preset ({', '.join(PRESETS)})")
    p.add_argument("--exit-fraction", type=float)
    p.add_argument("--budget", type=float, help="MACs per sample; reports the exit fraction that meets it")
    p.add_argument("--no-clustering", action="store_true")
    p.add_argument("--crosscheck", action="store_true", help="also run an instrumented forward")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--tiny-config", help="JSON file or preset; defaults to the built-in tiny model")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="two-phase toy training")
    p.add_argument("--config", default="toy", help="JSON with 'model' and 'train' sections, or a preset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="write a synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"sacvit {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
