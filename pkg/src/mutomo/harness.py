"""Dataset generation, method evaluation and parameter sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig, sample_seeds
from .metrics import EvalReport, evaluate
from .mlem import mlem_reconstruct
from .neural import train as nt
from .phantom import VoxelGrid, phantom_from_config
from .poca import poca_reconstruct
from .simulator import DetectorConfig, EventBatch, detect, simulate_true

log = logging.getLogger(__name__)

METHODS = ("poca", "mlem", "munet")
AXES = ("dosage", "momentum_error", "detector_resolution")
CSV_HEADER = ["method", "axis", "axis_value", "dosage", "mse", "mae", "psnr", "seconds"]


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

def phantom_for(cfg: RunConfig, index: int) -> VoxelGrid:
    return phantom_from_config(sample_seeds(cfg.seed, index)[0], cfg.phantom)


def true_events_for(cfg: RunConfig, index: int, grid: VoxelGrid, dosage: int | None = None) -> EventBatch:
    return simulate_true(grid, dosage or cfg.dataset.dosage, sample_seeds(cfg.seed, index)[1],
                         cfg.beam, cfg.geometry)


def make_samples(cfg: RunConfig, indices, dosage: int | None = None,
                 detector: DetectorConfig | None = None) -> list[io.Sample]:
    """Samples as they read back from a dataset file (float32 payload)."""
    det = detector or cfg.detector
    out = []
    for i in indices:
        grid = phantom_for(cfg, i)
        true = true_events_for(cfg, i, grid, dosage)
        ev = detect(true, det, sample_seeds(cfg.seed, i)[1], cfg.geometry)
        out.append(io.quantize(io.Sample(grid, ev)))
    return out


def make_split(cfg: RunConfig, split: str, **kw) -> list[io.Sample]:
    return make_samples(cfg, cfg.dataset.split(split), **kw)


# ---------------------------------------------------------------------------
# methods
# ---------------------------------------------------------------------------

@dataclass
class Model:
    params: dict
    config: nt.ModelConfig


def upsample(values: np.ndarray, factor: int) -> np.ndarray:
    return values.repeat(factor, 0).repeat(factor, 1).repeat(factor, 2) if factor > 1 else values


def reconstruct(method: str, samples, cfg: RunConfig, model: Model | None = None) -> list[np.ndarray]:
    if method == "poca":
        return [poca_reconstruct(s.events, cfg.resolution, cfg.geometry, threshold=cfg.poca.threshold).values
                for s in samples]
    if method == "mlem":
        # coarse grid, upsampled by voxel replication for comparison with the truth
        f = cfg.resolution // cfg.mlem.resolution
        return [upsample(mlem_reconstruct(s.events, cfg.mlem, cfg.geometry).values, f) for s in samples]
    if method == "munet":
        if model is None:
            raise ValueError("the munet method needs a trained checkpoint (train one with `mutomo train`)")
        plans = nt.make_plans([s.events for s in samples], model.config, cfg.geometry)
        return list(nt.predict(plans, model.params, model.config, cfg.train.batch_size).astype(np.float64))
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def evaluate_method(method: str, samples, cfg: RunConfig, model: Model | None = None) -> EvalReport:
    t0 = time.perf_counter()
    preds = reconstruct(method, samples, cfg, model)
    secs = time.perf_counter() - t0
    return evaluate(preds, [s.grid for s in samples], cfg.metrics.peak, secs)


def fit(cfg: RunConfig, train_samples, val_samples=(), init: Model | None = None,
        epochs: int | None = None):
    """Train (or fine-tune from ``init``); returns ``(Model, optimizer state, history)``."""
    mcfg = cfg.model_config() if init is None else init.config
    tcfg = cfg.train if epochs is None else dataclasses.replace(cfg.train, epochs=epochs)
    plans = nt.make_plans([s.events for s in train_samples], mcfg, cfg.geometry)
    vplans = nt.make_plans([s.events for s in val_samples], mcfg, cfg.geometry)
    params, opt, hist = nt.train(
        plans, [s.grid for s in train_samples], mcfg, tcfg,
        vplans, [s.grid for s in val_samples],
        params=None if init is None else init.params,
    )
    return Model(params, mcfg), opt, hist


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _condition(cfg: RunConfig, axis: str, value):
    """``(dosage, detector)`` for one sweep point."""
    if axis == "dosage":
        return int(value), cfg.detector
    if axis == "momentum_error":
        return cfg.dataset.dosage, dataclasses.replace(cfg.detector, momentum_error=float(value))
    if axis == "detector_resolution":
        px = None if value in (None, 0, "inf", float("inf")) else int(value)
        return cfg.dataset.dosage, dataclasses.replace(cfg.detector, pixels_per_side=px)
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")


def run_sweep(cfg: RunConfig, axis: str, values, methods=("poca",), model: Model | None = None,
              finetune_epochs: int = 0) -> list[dict]:
    """One row per (value, method); with ``finetune_epochs`` > 0 an extra
    ``munet_ft`` row is produced from a copy fine-tuned on training data
    generated under that condition."""
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    if ("munet" in methods or finetune_epochs) and model is None:
        raise ValueError("the munet method needs a trained checkpoint (pass --checkpoint)")
    rows = []
    for value in values:
        dosage, det = _condition(cfg, axis, value)
        test = make_split(cfg, "test", dosage=dosage, detector=det)
        log.info("sweep %s=%s: %d test samples", axis, value, len(test))
        runs = [(m, model) for m in methods]
        if finetune_epochs > 0:
            tr = make_split(cfg, "train", dosage=dosage, detector=det)
            ft, _, _ = fit(cfg, tr, (), init=model, epochs=finetune_epochs)
            runs.append(("munet_ft", ft))
        for name, mdl in runs:
            rep = evaluate_method("munet" if name == "munet_ft" else name, test, cfg, mdl)
            rows.append({"method": name, "axis": axis, "axis_value": value, "dosage": dosage,
                         "mse": rep.mse, "mae": rep.mae, "psnr": rep.psnr_mean, "seconds": rep.seconds})
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in CSV_HEADER])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_sweep(rows, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for m in dict.fromkeys(r["method"] for r in rows):
        pts = [(str(r["axis_value"]), float(r["psnr"])) for r in rows if r["method"] == m]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=m)
    if rows:
        ax.set_xlabel(rows[0]["axis"])
    ax.set_ylabel("PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_history(history, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ep = [h["epoch"] for h in history]
    ax.plot(ep, [h["train_mse"] for h in history], marker="o", label="train")
    if history and history[0].get("val_mse") is not None:
        ax.plot(ep, [h["val_mse"] for h in history], marker="s", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def save_model(path, model: Model, opt=None, history=None) -> None:
    nt.save_checkpoint(path, model.params, model.config, opt, history)


def load_model(path) -> Model:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found; run `mutomo train` first")
    params, mcfg, _, _ = nt.load_checkpoint(path)
    return Model(params, mcfg)
