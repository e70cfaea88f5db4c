"""Learned scatter operation: per-muon features placed into a voxel volume.

Each muon's 14-feature vector goes through a small MLP (the projector) whose
output is reshaped into a ``d x d x d x c`` block.  The block is added into an
``r^3 x (c+1)`` volume centred on the muon's placement voxel, and the last
channel counts how many blocks touched each cell.  A pointwise linear fuse
map then reduces the ``c + 1`` channels to ``c``.

Events are processed in canonical order and summed with a fixed-order
sparse product, so the volume is bit-identical under any input permutation.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .neural import layers as L
from .poca import poca_points, scattering_angles
from .simulator import ConfigurationError, EventBatch, Geometry, canonical_order
from .tracing import ray_box_many

N_FEATURES = 14
# fixed input standardization inside the projector: chord is O(1e-2)
FEATURE_SCALE = np.array([1.0] * 12 + [1.0, 100.0])


@dataclass(frozen=True)
class ScatterConfig:
    resolution: int = 16
    point_size: int = 1
    channels: int = 8
    threshold: float = 2e-3
    seed: int = 0
    hidden: int = 32

    def __post_init__(self):
        if self.point_size < 1 or self.point_size % 2 == 0:
            raise ConfigurationError("point_size must be a positive odd integer")
        if self.channels < 1 or self.hidden < 1:
            raise ConfigurationError("channels and hidden width must be >= 1")
        if self.resolution < self.point_size:
            raise ConfigurationError("resolution must be >= point_size")
        if not self.threshold >= 0:
            raise ConfigurationError("threshold must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# features and placement
# ---------------------------------------------------------------------------

def featurize(events: EventBatch, geom: Geometry = Geometry()) -> np.ndarray:
    """``(N, 14)`` features: x0, xf (scaled so the object cube maps to [-1, 1]),
    d0, df, momentum in GeV, and the recomputed chord ``|df - d0|``."""
    half = geom.half
    d0 = np.asarray(events.entry_dir, float)
    df = np.asarray(events.exit_dir, float)
    out = np.empty((len(events), N_FEATURES))
    out[:, 0:3] = np.asarray(events.entry_pos, float) / half
    out[:, 3:6] = np.asarray(events.exit_pos, float) / half
    out[:, 6:9] = d0
    out[:, 9:12] = df
    out[:, 12] = np.asarray(events.momentum, float) / 1000.0
    out[:, 13] = np.linalg.norm(df - d0, axis=1)
    return out


def _event_uniforms(events: EventBatch, seed: int) -> np.ndarray:
    """One uniform in [0, 1) per event, keyed by the event's own bytes.

    Placement therefore depends only on the event, never on its position in
    the input list.
    """
    rows = np.ascontiguousarray(events.to_array()[:, :13], dtype="<f8")
    key = int(seed).to_bytes(8, "little", signed=True)
    u = np.empty(len(rows))
    for i, row in enumerate(rows):
        h = hashlib.blake2b(row.tobytes(), digest_size=8, key=key).digest()
        u[i] = (int.from_bytes(h, "little") >> 11) * (1.0 / (1 << 53))
    return u


def placement_points(events: EventBatch, config: ScatterConfig = ScatterConfig(),
                     geom: Geometry = Geometry()):
    """Placement point for every event: ``(points (N, 3), valid (N,))``.

    Scattered muons (chord > threshold) use the PoCA point, invalid if it
    lies outside the object.  The rest use a uniformly chosen point on the
    incoming line's chord through the object, invalid if the line misses it.
    """
    n = len(events)
    half = geom.half
    pts = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    if n == 0:
        return pts, valid
    _, chord = scattering_angles(events.entry_dir, events.exit_dir)
    scattered = chord > config.threshold

    poca, _, _ = poca_points(events)
    inside = np.all(np.abs(poca) <= half, axis=1)
    pts[scattered] = poca[scattered]
    valid[scattered] = inside[scattered]

    o, d = np.asarray(events.entry_pos, float), np.asarray(events.entry_dir, float)
    t0, t1, hit = ray_box_many(o, d, half)
    u = _event_uniforms(events, config.seed)
    t = t0 + u * (t1 - t0)
    straight = ~scattered
    pts[straight] = np.clip(o[straight] + t[straight, None] * d[straight], -half, half)
    valid[straight] = hit[straight]
    return pts, valid


def placement_point(event, config: ScatterConfig = ScatterConfig(), geom: Geometry = Geometry()):
    """Single-event form of :func:`placement_points`; ``None`` if not placed."""
    batch = EventBatch(
        np.asarray(event.entry_pos, float)[None], np.asarray(event.exit_pos, float)[None],
        np.asarray(event.entry_dir, float)[None], np.asarray(event.exit_dir, float)[None],
        np.array([event.momentum], float), np.array([event.true_momentum], float),
    )
    pts, valid = placement_points(batch, config, geom)
    return pts[0] if valid[0] else None


def voxel_of(points: np.ndarray, resolution: int, geom: Geometry = Geometry()) -> np.ndarray:
    """``(N, 3)`` integer voxel indices containing each point (edges clamp inward)."""
    ell = geom.object_side / resolution
    return np.clip(np.floor((points + geom.half) / ell).astype(np.int64), 0, resolution - 1)


# ---------------------------------------------------------------------------
# scatter plan: fixed per event set, independent of learned parameters
# ---------------------------------------------------------------------------

@dataclass
class ScatterPlan:
    """Canonically ordered features plus the sparse placement matrix.

    ``matrix`` has shape ``(r^3, n * d^3)``; column ``i * d^3 + k`` is block
    cell ``k`` of event ``i``.  Rows use flat index ``ix + r (iy + r iz)``.
    """

    features: np.ndarray  # (n, 14), canonical order
    matrix: sp.csr_matrix
    counts: np.ndarray  # (r^3,)
    resolution: int
    point_size: int

    @property
    def n_events(self) -> int:
        return self.features.shape[0]

    @property
    def n_placed_cells(self) -> int:
        return int(self.matrix.nnz)


def _block_offsets(d: int) -> np.ndarray:
    h = d // 2
    a = np.arange(-h, h + 1)
    # cell k = ox_idx * d^2 + oy_idx * d + oz_idx, matching a C-order reshape to (d, d, d, c)
    ox, oy, oz = np.meshgrid(a, a, a, indexing="ij")
    return np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)


def build_plan(events: EventBatch, config: ScatterConfig = ScatterConfig(),
               geom: Geometry = Geometry()) -> ScatterPlan:
    ev = events.take(canonical_order(events)) if len(events) else events
    r, d = config.resolution, config.point_size
    feats = featurize(ev, geom)
    pts, valid = placement_points(ev, config, geom)
    n = len(ev)
    d3 = d**3
    if n == 0:
        m = sp.csr_matrix((r**3, 0))
        return ScatterPlan(feats, m, np.zeros(r**3), r, d)
    centre = voxel_of(pts, r, geom)
    cells = centre[:, None, :] + _block_offsets(d)[None]  # (n, d3, 3)
    inb = np.all((cells >= 0) & (cells < r), axis=2) & valid[:, None]
    flat = cells[..., 0] + r * (cells[..., 1] + r * cells[..., 2])
    cols = np.arange(n * d3).reshape(n, d3)
    rows_k, cols_k = flat[inb], cols[inb]
    m = sp.csr_matrix((np.ones(len(rows_k)), (rows_k, cols_k)), shape=(r**3, n * d3))
    m.sort_indices()  # within each voxel, sum in event order
    counts = np.asarray(m.sum(axis=1)).ravel()
    return ScatterPlan(feats, m, counts, r, d)


# ---------------------------------------------------------------------------
# parameters and passes
# ---------------------------------------------------------------------------

def param_shapes(config: ScatterConfig) -> dict[str, tuple]:
    c, h, d3 = config.channels, config.hidden, config.point_size**3
    return {
        "proj1.w": (N_FEATURES, h), "proj1.b": (h,),
        "proj2.w": (h, d3 * c), "proj2.b": (d3 * c,),
        "fuse.w": (c + 1, c), "fuse.b": (c,),
    }


def init_params(config: ScatterConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Projector: scaled normal init; fuse: identity on the feature channels
    plus a small weight on the counter channel."""
    rng = np.random.default_rng([seed, 11])
    shapes = param_shapes(config)
    p = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            p[name] = np.zeros(shape)
        elif name == "fuse.w":
            w = np.zeros(shape)
            w[: config.channels] = np.eye(config.channels)
            w[config.channels] = 0.02 * rng.standard_normal(config.channels)
            p[name] = w
        else:
            p[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return {k: v.astype(dtype) for k, v in p.items()}


def project_forward(features, params):
    x = (features * FEATURE_SCALE).astype(params["proj1.w"].dtype, copy=False)
    h, c1 = L.dense_forward(x, params["proj1.w"], params["proj1.b"])
    h, c2 = L.gelu_forward(h)
    y, c3 = L.dense_forward(h, params["proj2.w"], params["proj2.b"])
    return y, (c1, c2, c3)


def project_backward(dy, cache, grads):
    c1, c2, c3 = cache
    dh, grads["proj2.w"], grads["proj2.b"] = L.dense_backward(dy, c3)
    dh = L.gelu_backward(dh, c2)
    _, grads["proj1.w"], grads["proj1.b"] = L.dense_backward(dh, c1)


def scatter_volume(plan: ScatterPlan, projected: np.ndarray, channels: int) -> np.ndarray:
    """Accumulate projected blocks ``(n, d^3 c)``: returns ``(r, r, r, c + 1)``."""
    r = plan.resolution
    n = plan.n_events
    d3 = plan.point_size**3
    if projected.shape != (n, d3 * channels):
        raise ConfigurationError(f"projection shape {projected.shape} != {(n, d3 * channels)}")
    y = projected.reshape(n * d3, channels)
    out = np.empty((r**3, channels + 1), dtype=projected.dtype)
    out[:, :channels] = plan.matrix @ y
    out[:, channels] = plan.counts
    return _to_grid(out, r)


def _to_grid(flat: np.ndarray, r: int) -> np.ndarray:
    # flat rows use ix + r (iy + r iz): ix varies fastest
    return np.ascontiguousarray(flat.reshape(r, r, r, -1).transpose(2, 1, 0, 3))


def _from_grid(grid: np.ndarray) -> np.ndarray:
    r = grid.shape[0]
    return np.ascontiguousarray(grid.transpose(2, 1, 0, 3)).reshape(r**3, -1)


def scatter_backward(plan: ScatterPlan, dvolume: np.ndarray, channels: int) -> np.ndarray:
    """Gradient of the feature channels back onto the projected blocks."""
    dflat = _from_grid(dvolume)[:, :channels]
    dy = plan.matrix.T @ dflat
    return np.asarray(dy).reshape(plan.n_events, plan.point_size**3 * channels)


def combine(volume: np.ndarray, params) -> np.ndarray:
    return combine_forward(volume, params)[0]


def combine_forward(volume, params):
    w = params["fuse.w"]
    if volume.shape[-1] != w.shape[0]:
        raise ConfigurationError(f"fuse map expects {w.shape[0]} channels, got {volume.shape[-1]}")
    return L.dense_forward(volume, w, params["fuse.b"])


def combine_backward(dout, cache, grads):
    _, grads["fuse.w"], grads["fuse.b"] = L.dense_backward(dout, cache)


def scatter_features(events: EventBatch, params, config: ScatterConfig = ScatterConfig(),
                     geom: Geometry = Geometry()) -> np.ndarray:
    """Events to the ``(r, r, r, c + 1)`` feature volume."""
    plan = build_plan(events, config, geom)
    y, _ = project_forward(plan.features, params)
    return scatter_volume(plan, y, config.channels)


def encode_forward(plan: ScatterPlan, params, channels: int):
    """Projector, scatter and fuse for one sample; returns ``(r^3 x c volume, cache)``."""
    y, c_proj = project_forward(plan.features, params)
    vol = scatter_volume(plan, y, channels)
    out, c_fuse = combine_forward(vol, params)
    return out, (plan, c_proj, c_fuse, channels)


def encode_backward(dout, cache, grads):
    plan, c_proj, c_fuse, channels = cache
    dvol, grads["fuse.w"], grads["fuse.b"] = L.dense_backward(dout, c_fuse)
    dy = scatter_backward(plan, dvol, channels)
    project_backward(dy.astype(dout.dtype, copy=False), c_proj, grads)
