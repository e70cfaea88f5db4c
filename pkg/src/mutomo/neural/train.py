"""End-to-end model (scatter operation + U-Net), training loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import scatter_op as so
from ..phantom import VoxelGrid
from ..simulator import EventBatch, Geometry
from . import layers as L
from .optim import NonFiniteGradientError, OptimState, adamw_step
from .unet import UNetConfig, init_params as unet_init, unet_backward, unet_forward, variant

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MUCK"
CHECKPOINT_VERSION = 1


class TrainingAborted(RuntimeError):
    """Loss or gradient went non-finite; ``params`` holds the last good state."""

    def __init__(self, message, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    scatter: so.ScatterConfig = so.ScatterConfig()
    unet: UNetConfig = field(default_factory=lambda: variant("nano"))

    def __post_init__(self):
        if self.unet.in_channels != self.scatter.channels:
            raise so.ConfigurationError(
                f"U-Net input channels {self.unet.in_channels} != scatter channels {self.scatter.channels}")
        if self.scatter.resolution % (2 ** (self.unet.stages - 1)):
            raise so.ConfigurationError(
                f"resolution {self.scatter.resolution} not divisible by 2^{self.unet.stages - 1}")

    def to_dict(self) -> dict:
        return {"scatter": self.scatter.to_dict(), "unet": self.unet.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(so.ScatterConfig(**d["scatter"]), UNetConfig(**d["unet"]))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 4e-3
    seed: int = 0
    head_bias: float | None = None  # None: mean training target

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def init_model(cfg: ModelConfig, seed: int = 0, head_bias: float = 0.0, dtype=np.float32) -> dict:
    params = so.init_params(cfg.scatter, seed, dtype)
    unet = unet_init(cfg.unet, seed, dtype, head_bias)
    overlap = set(params) & set(unet)
    if overlap:  # pragma: no cover
        raise RuntimeError(f"parameter name clash: {sorted(overlap)}")
    params.update(unet)
    return params


# ---------------------------------------------------------------------------
# passes
# ---------------------------------------------------------------------------

def model_forward(plans, params, cfg: ModelConfig):
    """``plans``: list of :class:`ScatterPlan`; returns ``((B, r, r, r, 1), cache)``."""
    vols, caches = [], []
    for plan in plans:
        v, c = so.encode_forward(plan, params, cfg.scatter.channels)
        vols.append(v)
        caches.append(c)
    x = np.stack(vols)
    y, tape = unet_forward(x, params, cfg.unet)
    return y, (caches, tape)


def model_backward(dy, cache, cfg: ModelConfig) -> dict:
    caches, tape = cache
    dx, grads = unet_backward(dy, tape, cfg.unet)
    per = []
    for i, c in enumerate(caches):
        g: dict = {}
        so.encode_backward(dx[i], c, g)
        per.append(g)
    for name in per[0]:
        acc = per[0][name].copy()
        for g in per[1:]:
            acc += g[name]
        grads[name] = acc
    return grads


def predict(plans, params, cfg: ModelConfig, batch_size: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(plans), batch_size):
        y, _ = model_forward(plans[i:i + batch_size], params, cfg)
        out.append(y[..., 0])
    r = cfg.scatter.resolution
    return np.concatenate(out) if out else np.zeros((0, r, r, r))


def reconstruct(events: EventBatch, params, cfg: ModelConfig, geom: Geometry = Geometry()) -> VoxelGrid:
    plan = so.build_plan(events, cfg.scatter, geom)
    y = predict([plan], params, cfg)[0]
    return VoxelGrid(y.astype(np.float64), geom.object_side)


def make_plans(event_sets, cfg: ModelConfig, geom: Geometry = Geometry()):
    return [so.build_plan(ev, cfg.scatter, geom) for ev in event_sets]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _stack_targets(grids, dtype):
    return np.stack([np.asarray(g.values if isinstance(g, VoxelGrid) else g, dtype) for g in grids])[..., None]


def _copy(params):
    return {k: v.copy() for k, v in params.items()}


def evaluate_mse(plans, targets, params, cfg: ModelConfig, batch_size: int = 8) -> float:
    if not plans:
        return float("nan")
    pred = predict(plans, params, cfg, batch_size)
    t = _stack_targets(targets, pred.dtype)[..., 0]
    return float(np.mean((pred.astype(np.float64) - t) ** 2))


def train(train_plans, train_targets, cfg: ModelConfig, tcfg: TrainConfig = TrainConfig(),
          val_plans=(), val_targets=(), params: dict | None = None,
          opt: OptimState | None = None):
    """Minibatch MSE training of every parameter.

    Returns ``(params, opt_state, history)`` where ``history`` lists one dict
    per epoch with ``train_mse`` and ``val_mse``.  Shuffles come from fixed
    per-epoch streams, so runs are reproducible from ``tcfg.seed``.
    """
    n = len(train_plans)
    if n == 0:
        raise ValueError("training set is empty")
    if len(train_targets) != n:
        raise ValueError("plans and targets differ in length")
    targets = _stack_targets(train_targets, np.float32)
    if params is None:
        bias = float(targets.mean()) if tcfg.head_bias is None else tcfg.head_bias
        params = init_model(cfg, tcfg.seed, bias)
    else:
        params = _copy(params)
    if opt is None:
        opt = OptimState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    history = []
    last_good = _copy(params)
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([tcfg.seed, 101, epoch]).permutation(n)
        losses = []
        for s in range(0, n, tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            y, cache = model_forward([train_plans[i] for i in idx], params, cfg)
            loss, diff = L.mse_forward(y, targets[idx])
            if not np.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch + 1}", last_good, history)
            grads = model_backward(L.mse_backward(diff), cache, cfg)
            try:
                adamw_step(params, grads, opt)
            except NonFiniteGradientError as e:
                raise TrainingAborted(f"epoch {epoch + 1}: {e}", last_good, history) from e
            losses.append(loss * len(idx))
        train_mse = float(np.sum(losses) / n)
        val_mse = evaluate_mse(list(val_plans), list(val_targets), params, cfg) if len(val_plans) else None
        last_good = _copy(params)
        rec = {"epoch": epoch + 1, "train_mse": train_mse, "val_mse": val_mse,
               "seconds": time.perf_counter() - t0}
        history.append(rec)
        log.info("epoch %d train_mse %.5f val_mse %s (%.1fs)", epoch + 1, train_mse,
                 "n/a" if val_mse is None else f"{val_mse:.5f}", rec["seconds"])
    return params, opt, history


# ---------------------------------------------------------------------------
# checkpoints: magic, u16 version, u32 header length, JSON header, raw arrays
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict, cfg: ModelConfig, opt: OptimState | None = None,
                    history=None) -> None:
    tensors = [("param/" + k, params[k]) for k in sorted(params)]
    if opt is not None:
        tensors += [("adam_m/" + k, opt.m[k]) for k in sorted(opt.m)]
        tensors += [("adam_v/" + k, opt.v[k]) for k in sorted(opt.v)]
    entries, blobs, offset = [], [], 0
    for name, a in tensors:
        a = np.ascontiguousarray(a)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": cfg.to_dict(),
        "fingerprint": cfg.fingerprint(),
        "optimizer": None if opt is None else {**opt.hyperparameters(), "step": opt.step},
        "history": [] if history is None else [
            {k: v for k, v in h.items() if k != "seconds"} for h in history],
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns ``(params, ModelConfig, OptimState | None, history)``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 10 + hlen
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[10:start])
    cfg = ModelConfig.from_dict(header["config"])
    if cfg.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: config fingerprint mismatch")
    params, m, v = {}, {}, {}
    for e in header["tensors"]:
        a0 = start + e["offset"]
        if a0 + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        a = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=a0).reshape(e["shape"])
        a = a.astype(a.dtype.newbyteorder("="))
        kind, name = e["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[kind][name] = a
    opt = None
    if header["optimizer"] is not None:
        o = dict(header["optimizer"])
        step = o.pop("step")
        opt = OptimState(**o, step=step, m=m, v=v)
    return params, cfg, opt, header["history"]
