"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimState:
    lr: float = 2e-3
    weight_decay: float = 4e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return dict(lr=self.lr, weight_decay=self.weight_decay, beta1=self.beta1,
                    beta2=self.beta2, eps=self.eps)


def check_finite(grads: dict) -> None:
    bad = []
    for name in sorted(grads):
        g = grads[name]
        n_bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        if n_bad:
            bad.append(f"{name}: {n_bad}/{np.size(g)} non-finite")
    if bad:
        raise NonFiniteGradientError("non-finite gradient; " + "; ".join(bad))


def adamw_step(params: dict, grads: dict, state: OptimState) -> None:
    """Update ``params`` and ``state`` in place.

    ``p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`` with bias-corrected
    moments; decay applies to every parameter.
    """
    check_finite(grads)
    missing = set(params) ^ set(grads)
    if missing:
        raise KeyError(f"parameter/gradient name mismatch: {sorted(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(params):
        p, g = params[name], grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p *= 1.0 - state.lr * state.weight_decay
        p -= (state.lr * update).astype(p.dtype, copy=False)
