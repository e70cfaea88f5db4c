"""Tensor primitives with hand-written backward passes.

Activations are channels-last arrays of shape ``(N, X, Y, Z, C)``.  Every
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward`` takes
``(dout, cache)`` and returns the input gradient followed by parameter
gradients.  Works in whatever float dtype the inputs carry.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6


# -- depthwise convolution (same padding, stride 1) --------------------------

def dwconv_forward(x, w, b):
    k = w.shape[0]
    p = k // 2
    N, X, Y, Z, C = x.shape
    if w.shape != (k, k, k, C):
        raise ValueError(f"depthwise kernel {w.shape} does not match {C} channels")
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    out = np.empty_like(x)
    out[...] = b
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out += xp[:, i:i + X, j:j + Y, l:l + Z, :] * w[i, j, l]
    return out, (xp, w, x.shape)


def dwconv_backward(dout, cache):
    xp, w, shape = cache
    k = w.shape[0]
    p = k // 2
    N, X, Y, Z, C = shape
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    d2 = dout.reshape(-1, C)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                win = xp[:, i:i + X, j:j + Y, l:l + Z, :]
                dw[i, j, l] = np.einsum("mc,mc->c", win.reshape(-1, C), d2)
                dxp[:, i:i + X, j:j + Y, l:l + Z, :] += dout * w[i, j, l]
    db = d2.sum(axis=0)
    dx = dxp[:, p:p + X, p:p + Y, p:p + Z, :]
    return np.ascontiguousarray(dx), dw, db


# -- pointwise (dense over channels) ----------------------------------------

def dense_forward(x, w, b):
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense layer expects {w.shape[0]} input channels, got {x.shape[-1]}")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    cin, cout = w.shape
    dw = x.reshape(-1, cin).T @ dout.reshape(-1, cout)
    db = dout.reshape(-1, cout).sum(axis=0)
    dx = dout @ w.T
    return dx, dw, db


# -- layer norm over channels -------------------------------------------------

def layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dout, cache):
    xhat, inv, g = cache
    C = xhat.shape[-1]
    lead = tuple(range(xhat.ndim - 1))
    dg = (dout * xhat).sum(axis=lead)
    db = dout.sum(axis=lead)
    dxhat = dout * g
    dx = inv / C * (
        C * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dg, db


# -- GELU (exact erf form) ----------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return (x * cdf).astype(x.dtype, copy=False), (x, cdf)


def gelu_backward(dout, cache):
    x, cdf = cache
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (dout * (cdf + x * pdf)).astype(dout.dtype, copy=False)


# -- layer scale --------------------------------------------------------------

def scale_forward(x, gamma):
    return x * gamma, (x, gamma)


def scale_backward(dout, cache):
    x, gamma = cache
    dgamma = (dout * x).reshape(-1, x.shape[-1]).sum(axis=0)
    return dout * gamma, dgamma


# -- 2x2x2 stride-2 convolution ------------------------------------------------

def _blocks(x):
    N, X, Y, Z, C = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"stride-2 convolution needs even spatial dims, got {x.shape[1:4]}")
    v = x.reshape(N, X // 2, 2, Y // 2, 2, Z // 2, 2, C)
    return v.transpose(0, 1, 3, 5, 2, 4, 6, 7).reshape(N, X // 2, Y // 2, Z // 2, 8 * C)


def _unblocks(v, shape):
    N, X, Y, Z, C = shape
    v = v.reshape(N, X // 2, Y // 2, Z // 2, 2, 2, 2, C)
    return v.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(shape)


def downconv_forward(x, w, b):
    """``w`` has shape ``(2, 2, 2, Cin, Cout)``."""
    cin, cout = w.shape[3], w.shape[4]
    if x.shape[-1] != cin:
        raise ValueError(f"downsampling conv expects {cin} channels, got {x.shape[-1]}")
    xb = _blocks(x)
    w2 = w.reshape(8 * cin, cout)
    return xb @ w2 + b, (xb, w2, w.shape, x.shape)


def downconv_backward(dout, cache):
    xb, w2, wshape, xshape = cache
    cout = w2.shape[1]
    dw = (xb.reshape(-1, w2.shape[0]).T @ dout.reshape(-1, cout)).reshape(wshape)
    db = dout.reshape(-1, cout).sum(axis=0)
    dx = _unblocks(dout @ w2.T, xshape)
    return dx, dw, db


# -- nearest-neighbour 2x upsampling ---------------------------------------------

def upsample_forward(x):
    out = x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    return out, x.shape


def upsample_backward(dout, shape):
    N, X, Y, Z, C = shape
    return dout.reshape(N, X, 2, Y, 2, Z, 2, C).sum(axis=(2, 4, 6))


# -- channel concat ----------------------------------------------------------

def concat_forward(a, b):
    return np.concatenate([a, b], axis=-1), a.shape[-1]


def concat_backward(dout, split):
    return dout[..., :split], dout[..., split:]


# -- non-negativity clamp ----------------------------------------------------------

def clamp_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def clamp_backward(dout, mask):
    return dout * mask


# -- loss ----------------------------------------------------------------------

def mse_forward(pred, target):
    diff = pred - target
    return float(np.mean(diff * diff)), diff


def mse_backward(diff):
    return (2.0 / diff.size) * diff
