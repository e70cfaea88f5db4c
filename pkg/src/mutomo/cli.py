"""Command-line entry point: ``mutomo <command> [--config FILE] [--seed N] [--out PATH]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("mutomo")


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="YAML run config (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="override the config's master seed")
    p.add_argument("--out", required=True, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mutomo", description="Muon scattering tomography toolkit")
    ap.add_argument("--threads", type=int, help="worker threads for compiled kernels")
    ap.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate one phantom")
    _common(p, "dataset file holding the phantom (no events)")
    p.add_argument("--index", type=int, default=0, help="sample index within the seeded sequence")

    p = sub.add_parser("simulate", help="generate a dataset split")
    _common(p, "dataset file")
    p.add_argument("--split", choices=["train", "val", "test"], default="train")
    p.add_argument("--dosage", type=int, help="override dataset.dosage")

    p = sub.add_parser("reconstruct", help="reconstruct every sample of a dataset")
    _common(p, "dataset file of reconstructions (no events)")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["poca", "mlem", "munet"], default="poca")
    p.add_argument("--checkpoint", help="trained model, required for munet")
    p.add_argument("--iters", type=int, help="MLEM: override mlem.max_iterations")
    p.add_argument("--res", type=int, help="MLEM: reconstruct at this resolution, no upsampling")

    p = sub.add_parser("train", help="train or fine-tune the learned reconstructor")
    _common(p, "checkpoint file; a training-curve CSV and PNG are written next to it")
    p.add_argument("--data", help="training dataset (default: generate from config)")
    p.add_argument("--val", help="validation dataset (default: generate from config)")
    p.add_argument("--init", help="checkpoint to fine-tune from")
    p.add_argument("--epochs", type=int, help="override train.epochs")

    p = sub.add_parser("eval", help="score methods on a dataset")
    _common(p, "metrics CSV")
    p.add_argument("--data", help="test dataset (default: generate from config)")
    p.add_argument("--methods", default="poca", help="comma-separated: poca,mlem,munet")
    p.add_argument("--checkpoint")

    p = sub.add_parser("sweep", help="score methods across a condition axis")
    _common(p, "report CSV; a PSNR plot is written next to it")
    p.add_argument("--axis", required=True, choices=["dosage", "momentum_error", "detector_resolution"])
    p.add_argument("--values", required=True, help="comma-separated; 'inf' for infinite resolution")
    p.add_argument("--methods", default="poca")
    p.add_argument("--checkpoint")
    p.add_argument("--finetune-epochs", type=int, default=0,
                   help="also fine-tune a copy on each condition for this many epochs")

    p = sub.add_parser("render", help="write one slice of a dataset grid as a PGM image")
    _common(p, "PGM image")
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--index", type=int)
    return ap


def _parse_values(text: str, axis: str):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if axis == "detector_resolution" and tok.lower() in ("inf", "infinite", "none"):
            out.append("inf")
        elif axis == "momentum_error":
            out.append(float(tok))
        else:
            out.append(int(tok))
    return out


def _sibling(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def _run(args) -> None:
    import dataclasses

    import numpy as np

    from . import harness as H
    from . import io
    from .config import config_digest, load_config
    from .mlem import mlem_reconstruct
    from .phantom import VoxelGrid
    from .simulator import EventBatch

    no_events = EventBatch.from_array(np.zeros((0, 15)))

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    log.info("resolved config %s:\n%s", config_digest(cfg), cfg.dump())
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise FileNotFoundError(f"output directory {out.parent} does not exist")
    cmd = args.command

    if cmd == "phantom":
        grid = H.phantom_for(cfg, args.index)
        io.write_dataset(out, [io.Sample(grid, no_events)])
        log.info("phantom %d: occupancy %.3f", args.index, float((grid.values > 0).mean()))

    elif cmd == "simulate":
        samples = H.make_split(cfg, args.split, dosage=args.dosage)
        io.write_dataset(out, samples)
        log.info("wrote %d %s samples to %s", len(samples), args.split, out)

    elif cmd == "reconstruct":
        samples = io.read_dataset(args.data, cfg.geometry.object_side)
        model = H.load_model(args.checkpoint) if args.checkpoint else None
        if args.iters is not None:
            cfg = dataclasses.replace(cfg, mlem=dataclasses.replace(cfg.mlem, max_iterations=args.iters))
        if args.method == "mlem" and args.res is not None:
            mc = dataclasses.replace(cfg.mlem, resolution=args.res)
            preds = [mlem_reconstruct(s.events, mc, cfg.geometry).values for s in samples]
        else:
            preds = H.reconstruct(args.method, samples, cfg, model)
        io.write_dataset(out, [io.Sample(VoxelGrid(p, cfg.geometry.object_side), no_events) for p in preds])

    elif cmd == "train":
        tr = io.read_dataset(args.data, cfg.geometry.object_side) if args.data else H.make_split(cfg, "train")
        va = io.read_dataset(args.val, cfg.geometry.object_side) if args.val else H.make_split(cfg, "val")
        init = H.load_model(args.init) if args.init else None
        model, opt, hist = H.fit(cfg, tr, va, init=init, epochs=args.epochs)
        H.save_model(out, model, opt, hist)
        _write_history(_sibling(out, "_history.csv"), hist)
        H.plot_history(hist, _sibling(out, "_history.png"))

    elif cmd == "eval":
        test = io.read_dataset(args.data, cfg.geometry.object_side) if args.data else H.make_split(cfg, "test")
        model = H.load_model(args.checkpoint) if args.checkpoint else None
        rows = []
        for m in [s.strip() for s in args.methods.split(",") if s.strip()]:
            rep = H.evaluate_method(m, test, cfg, model)
            rows.append({"method": m, "axis": "none", "axis_value": "", "dosage": len(test[0].events) if test else 0,
                         "mse": rep.mse, "mae": rep.mae, "psnr": rep.psnr_mean, "seconds": rep.seconds})
        H.write_csv(out, rows)

    elif cmd == "sweep":
        model = H.load_model(args.checkpoint) if args.checkpoint else None
        methods = [s.strip() for s in args.methods.split(",") if s.strip()]
        rows = H.run_sweep(cfg, args.axis, _parse_values(args.values, args.axis), methods, model,
                           args.finetune_epochs)
        H.write_csv(out, rows)
        H.plot_sweep(rows, _sibling(out, ".png"), title=f"{args.axis} sweep")

    elif cmd == "render":
        samples = io.read_dataset(args.data, cfg.geometry.object_side)
        if not 0 <= args.sample < len(samples):
            raise IndexError(f"sample {args.sample} out of range ({len(samples)} samples)")
        grid = samples[args.sample].grid
        index = grid.resolution // 2 if args.index is None else args.index
        io.render_slice(grid, args.axis, index, out, cfg.metrics.peak)


def _write_history(path, hist) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for h in hist:
            w.writerow([h["epoch"], repr(h["train_mse"]), "" if h["val_mse"] is None else repr(h["val_mse"])])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        # must precede the first numba import
        os.environ["NUMBA_NUM_THREADS"] = str(args.threads)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _run(args)
    except KeyboardInterrupt:
        print("mutomo: error: Interrupted: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # one-line, machine-parseable failure report
        msg = " ".join(str(e).split())
        print(f"mutomo: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
