"""3D ConvNeXt U-Net with explicit forward and backward passes.

Encoder stage ``i`` runs ``B[i]`` ConvNeXt blocks at width ``C[i]``; stages
are joined by layer norm + 2x2x2 stride-2 convolution.  Each decoder stage
applies a pointwise conv and layer norm, upsamples 2x by nearest neighbour,
concatenates the encoder features of the same scale, fuses back to ``C[i]``
with a pointwise conv and runs ``B[i]`` blocks.  A pointwise head maps to one
channel, clamped at zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class UNetConfig:
    blocks: tuple[int, ...] = (1, 1, 1)
    channels: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 8
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.blocks) != len(self.channels) or not self.blocks:
            raise ValueError("blocks and channels must be non-empty and of equal length")
        if min(self.blocks) < 1 or min(self.channels) < 1 or self.in_channels < 1:
            raise ValueError("all block counts and widths must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("depthwise kernel size must be odd")

    @property
    def stages(self) -> int:
        return len(self.blocks)

    def to_dict(self) -> dict:
        return asdict(self)


VARIANTS = {
    "nano": dict(blocks=(1, 1, 1), channels=(8, 16, 32)),
    "tiny": dict(blocks=(1, 2, 3, 4, 5), channels=(8, 16, 32, 64, 128)),
    "base": dict(blocks=(1, 2, 4, 4, 6), channels=(16, 32, 64, 128, 256)),
    "large": dict(blocks=(1, 2, 4, 6, 8), channels=(24, 48, 96, 192, 384)),
}


def variant(name: str, **overrides) -> UNetConfig:
    try:
        spec = dict(VARIANTS[name])
    except KeyError:
        raise ValueError(f"unknown U-Net variant {name!r}; choose from {sorted(VARIANTS)}") from None
    spec.update(overrides)
    spec.setdefault("in_channels", spec["channels"][0])
    return UNetConfig(**spec)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _trunc_normal(rng, shape, std=0.02, dtype=np.float64):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def block_param_shapes(c: int, k: int) -> dict[str, tuple]:
    return {
        "dw.w": (k, k, k, c), "dw.b": (c,),
        "ln.g": (c,), "ln.b": (c,),
        "pw1.w": (c, 4 * c), "pw1.b": (4 * c,),
        "pw2.w": (4 * c, c), "pw2.b": (c,),
        "gamma": (c,),
    }


def param_shapes(cfg: UNetConfig) -> dict[str, tuple]:
    C, B, k = cfg.channels, cfg.blocks, cfg.kernel_size
    shapes: dict[str, tuple] = {}
    if cfg.in_channels != C[0]:
        shapes["stem.w"] = (cfg.in_channels, C[0])
        shapes["stem.b"] = (C[0],)
    for i in range(cfg.stages):
        if i > 0:
            shapes[f"down{i}.ln.g"] = (C[i - 1],)
            shapes[f"down{i}.ln.b"] = (C[i - 1],)
            shapes[f"down{i}.conv.w"] = (2, 2, 2, C[i - 1], C[i])
            shapes[f"down{i}.conv.b"] = (C[i],)
        for j in range(B[i]):
            for name, s in block_param_shapes(C[i], k).items():
                shapes[f"enc{i}.{j}.{name}"] = s
    for i in reversed(range(cfg.stages - 1)):
        shapes[f"up{i}.pw.w"] = (C[i + 1], C[i])
        shapes[f"up{i}.pw.b"] = (C[i],)
        shapes[f"up{i}.ln.g"] = (C[i],)
        shapes[f"up{i}.ln.b"] = (C[i],)
        shapes[f"up{i}.fuse.w"] = (2 * C[i], C[i])
        shapes[f"up{i}.fuse.b"] = (C[i],)
        for j in range(B[i]):
            for name, s in block_param_shapes(C[i], k).items():
                shapes[f"dec{i}.{j}.{name}"] = s
    shapes["head.w"] = (C[0], 1)
    shapes["head.b"] = (1,)
    return shapes


def param_count(cfg: UNetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: UNetConfig, seed: int = 0, dtype=np.float32, head_bias: float = 0.0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 7])
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            params[name] = np.full(shape, 1e-6, dtype=dtype)
        elif leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf == "w":
            params[name] = _trunc_normal(rng, shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    params["head.b"][...] = head_bias
    return params


# ---------------------------------------------------------------------------
# ConvNeXt block
# ---------------------------------------------------------------------------

def convnext_block_forward(x, p, prefix: str = ""):
    """``x + gamma * pw2(gelu(pw1(ln(dw(x)))))``; ``p`` maps ``prefix + 'dw.w'`` etc."""
    q = lambda n: p[prefix + n]  # noqa: E731
    if x.shape[-1] != q("dw.w").shape[-1]:
        raise ValueError(f"block expects {q('dw.w').shape[-1]} channels, got {x.shape[-1]}")
    h, c_dw = L.dwconv_forward(x, q("dw.w"), q("dw.b"))
    h, c_ln = L.layernorm_forward(h, q("ln.g"), q("ln.b"))
    h, c_p1 = L.dense_forward(h, q("pw1.w"), q("pw1.b"))
    h, c_ge = L.gelu_forward(h)
    h, c_p2 = L.dense_forward(h, q("pw2.w"), q("pw2.b"))
    h, c_sc = L.scale_forward(h, q("gamma"))
    return x + h, (prefix, c_dw, c_ln, c_p1, c_ge, c_p2, c_sc)


def convnext_block_backward(dy, cache, grads):
    prefix, c_dw, c_ln, c_p1, c_ge, c_p2, c_sc = cache
    dh, grads[prefix + "gamma"] = L.scale_backward(dy, c_sc)
    dh, grads[prefix + "pw2.w"], grads[prefix + "pw2.b"] = L.dense_backward(dh, c_p2)
    dh = L.gelu_backward(dh, c_ge)
    dh, grads[prefix + "pw1.w"], grads[prefix + "pw1.b"] = L.dense_backward(dh, c_p1)
    dh, grads[prefix + "ln.g"], grads[prefix + "ln.b"] = L.layernorm_backward(dh, c_ln)
    dh, grads[prefix + "dw.w"], grads[prefix + "dw.b"] = L.dwconv_backward(dh, c_dw)
    return dy + dh


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

def unet_forward(x, params, cfg: UNetConfig):
    """Returns ``(prediction (N, r, r, r, 1), cache)``."""
    S = cfg.stages
    r = x.shape[1]
    if x.ndim != 5 or x.shape[1:4] != (r, r, r):
        raise ValueError(f"expected (N, r, r, r, C) input, got {x.shape}")
    if r % (2 ** (S - 1)):
        raise ValueError(f"resolution {r} not divisible by 2^{S - 1}")
    if x.shape[-1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[-1]}")
    tape = []
    h = x
    if "stem.w" in params:
        h, c = L.dense_forward(h, params["stem.w"], params["stem.b"])
        tape.append(("stem", c))
    skips = []
    for i in range(S):
        if i > 0:
            h, c1 = L.layernorm_forward(h, params[f"down{i}.ln.g"], params[f"down{i}.ln.b"])
            h, c2 = L.downconv_forward(h, params[f"down{i}.conv.w"], params[f"down{i}.conv.b"])
            tape.append((f"down{i}", (c1, c2)))
        for j in range(cfg.blocks[i]):
            h, c = convnext_block_forward(h, params, f"enc{i}.{j}.")
            tape.append(("block", c))
        if i < S - 1:
            skips.append(h)
    for i in reversed(range(S - 1)):
        h, c1 = L.dense_forward(h, params[f"up{i}.pw.w"], params[f"up{i}.pw.b"])
        h, c2 = L.layernorm_forward(h, params[f"up{i}.ln.g"], params[f"up{i}.ln.b"])
        h, c3 = L.upsample_forward(h)
        h, c4 = L.concat_forward(h, skips[i])
        h, c5 = L.dense_forward(h, params[f"up{i}.fuse.w"], params[f"up{i}.fuse.b"])
        tape.append((f"up{i}", (c1, c2, c3, c4, c5)))
        for j in range(cfg.blocks[i]):
            h, c = convnext_block_forward(h, params, f"dec{i}.{j}.")
            tape.append(("block", c))
    h, c1 = L.dense_forward(h, params["head.w"], params["head.b"])
    y, c2 = L.clamp_forward(h)
    tape.append(("head", (c1, c2)))
    return y, tape


def unet_backward(dy, tape, cfg: UNetConfig):
    """Returns ``(d_input, grads)``."""
    grads: dict[str, np.ndarray] = {}
    skip_grads: dict[int, np.ndarray] = {}
    dh = dy
    for kind, cache in reversed(tape):
        if kind == "head":
            c1, c2 = cache
            dh = L.clamp_backward(dh, c2)
            dh, grads["head.w"], grads["head.b"] = L.dense_backward(dh, c1)
        elif kind == "block":
            dh = convnext_block_backward(dh, cache, grads)
        elif kind.startswith("up"):
            i = int(kind[2:])
            c1, c2, c3, c4, c5 = cache
            dh, grads[f"up{i}.fuse.w"], grads[f"up{i}.fuse.b"] = L.dense_backward(dh, c5)
            dh, dskip = L.concat_backward(dh, c4)
            skip_grads[i] = dskip
            dh = L.upsample_backward(dh, c3)
            dh, grads[f"up{i}.ln.g"], grads[f"up{i}.ln.b"] = L.layernorm_backward(dh, c2)
            dh, grads[f"up{i}.pw.w"], grads[f"up{i}.pw.b"] = L.dense_backward(dh, c1)
        elif kind.startswith("down"):
            i = int(kind[4:])
            c1, c2 = cache
            dh, grads[f"down{i}.conv.w"], grads[f"down{i}.conv.b"] = L.downconv_backward(dh, c2)
            dh, grads[f"down{i}.ln.g"], grads[f"down{i}.ln.b"] = L.layernorm_backward(dh, c1)
            # this point is the output of encoder stage i-1, which also fed skip i-1
            dh = dh + skip_grads.pop(i - 1)
        elif kind == "stem":
            dh, grads["stem.w"], grads["stem.b"] = L.dense_backward(dh, cache)
        else:  # pragma: no cover
            raise RuntimeError(kind)
    return dh, grads
