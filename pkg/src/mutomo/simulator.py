"""Desk-scale cosmic muon transport.

Muons start on the upper detector plane with a cos^2 zenith law and a
power-law momentum spectrum, fly straight to the object cube, cross it voxel
by voxel with Gaussian multiple Coulomb scattering applied per voxel segment,
and fly straight to the lower detector plane.  Energy loss and decay are
ignored; v = c.

Every output slot ``k`` owns a counter-based random stream keyed by
``(master_seed, k)``, so the result does not depend on thread count or
scheduling.  Dropped muons are replaced by continuing the same stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .phantom import VoxelGrid
from .tracing import ray_box, voxel_step

E_S = 21.0  # MeV, scattering constant of the Gaussian theory
P_REF = 15.0  # MeV, normalization momentum of the scattering density

_MAX_ATTEMPTS = 100_000  # per output slot; acceptance below 1e-4 is a config error
_MAX_STEPS = 100_000


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    object_side: float = 100.0
    detector_half_side: float = 100.0
    detector_gap: float = 50.0
    plane_spacing: float = 10.0  # distance between the two pixel planes of one detector

    def __post_init__(self):
        for name in ("object_side", "detector_half_side", "detector_gap", "plane_spacing"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"geometry.{name} must be positive")

    @property
    def half(self) -> float:
        return 0.5 * self.object_side

    @property
    def plane_z(self) -> float:
        return self.half + self.detector_gap


@dataclass(frozen=True)
class BeamConfig:
    gamma: float = 2.7
    p_min: float = 500.0  # MeV
    p_max: float = 100_000.0  # MeV

    def __post_init__(self):
        if not self.p_min > 0 or not self.p_max > self.p_min:
            raise ConfigurationError(f"need 0 < p_min < p_max, got {self.p_min}, {self.p_max}")
        if not self.gamma > 1:
            raise ConfigurationError(f"power-law exponent must exceed 1, got {self.gamma}")


@dataclass(frozen=True)
class DetectorConfig:
    pixels_per_side: int | None = None  # None = infinite resolution
    momentum_error: float = 0.2
    min_momentum: float = 100.0  # MeV, floor on the momentum estimate

    def __post_init__(self):
        if self.pixels_per_side is not None and self.pixels_per_side < 1:
            raise ConfigurationError("pixels_per_side must be >= 1 or None")
        if not 0.0 <= self.momentum_error <= 1.0:
            raise ConfigurationError("momentum_error must lie in [0, 1]")


@dataclass
class MuonState:
    position: np.ndarray
    direction: np.ndarray
    momentum: float

    def copy(self) -> "MuonState":
        return MuonState(self.position.copy(), self.direction.copy(), self.momentum)


@dataclass(frozen=True)
class MuonEvent:
    entry_pos: np.ndarray
    exit_pos: np.ndarray
    entry_dir: np.ndarray
    exit_dir: np.ndarray
    momentum: float
    true_momentum: float


@dataclass
class EventBatch:
    """Struct-of-arrays view of ``N`` detected muons.

    Positions are in cm on the inner detector planes, directions are unit
    vectors pointing downward, momenta in MeV.
    """

    entry_pos: np.ndarray
    exit_pos: np.ndarray
    entry_dir: np.ndarray
    exit_dir: np.ndarray
    momentum: np.ndarray
    true_momentum: np.ndarray
    n_dropped: int = field(default=0, compare=False)

    def __len__(self) -> int:
        return len(self.momentum)

    def __getitem__(self, i: int) -> MuonEvent:
        return MuonEvent(
            self.entry_pos[i], self.exit_pos[i], self.entry_dir[i], self.exit_dir[i],
            float(self.momentum[i]), float(self.true_momentum[i]),
        )

    def take(self, idx) -> "EventBatch":
        return EventBatch(
            self.entry_pos[idx], self.exit_pos[idx], self.entry_dir[idx], self.exit_dir[idx],
            self.momentum[idx], self.true_momentum[idx],
        )

    def astype(self, dtype) -> "EventBatch":
        return EventBatch(
            *(np.ascontiguousarray(a, dtype=dtype) for a in (
                self.entry_pos, self.exit_pos, self.entry_dir, self.exit_dir,
                self.momentum, self.true_momentum)),
            n_dropped=self.n_dropped,
        )

    def to_array(self) -> np.ndarray:
        """``(N, 15)`` rows: x0, xf, d0, df, p_est, chord, p_true."""
        chord = np.linalg.norm(self.exit_dir - self.entry_dir, axis=1)
        return np.column_stack([
            self.entry_pos, self.exit_pos, self.entry_dir, self.exit_dir,
            self.momentum, chord, self.true_momentum,
        ])

    @classmethod
    def from_array(cls, rows: np.ndarray) -> "EventBatch":
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != 15:
            raise ValueError(f"expected (N, 15) event rows, got {rows.shape}")
        return cls(
            rows[:, 0:3].copy(), rows[:, 3:6].copy(), rows[:, 6:9].copy(), rows[:, 9:12].copy(),
            rows[:, 12].copy(), rows[:, 14].copy(),
        )

    @classmethod
    def concat(cls, batches) -> "EventBatch":
        batches = list(batches)
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in (
            "entry_pos", "exit_pos", "entry_dir", "exit_dir", "momentum", "true_momentum")))


# ---------------------------------------------------------------------------
# counter-based random streams (splitmix64)
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def stream_key(seed, index):
    """Starting state of the stream for output slot ``index``."""
    return _mix64(_mix64(np.uint64(seed) + _GOLDEN) + np.uint64(index) * _GOLDEN + np.uint64(1))


@njit(cache=True)
def _uniform(state):
    """Advance ``state[0]``; return a double in (0, 1)."""
    state[0] += _GOLDEN
    z = _mix64(state[0])
    return (float(z >> _S11) + 0.5) * _INV53


@njit(cache=True)
def _normal_pair(state):
    u1 = _uniform(state)
    u2 = _uniform(state)
    rad = math.sqrt(-2.0 * math.log(u1))
    return rad * math.cos(2.0 * math.pi * u2), rad * math.sin(2.0 * math.pi * u2)


# ---------------------------------------------------------------------------
# physics kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def zenith_cos(u):
    """Inverse CDF of pdf(theta) ~ cos^2(theta) sin(theta) on [0, pi/2]."""
    return u ** (1.0 / 3.0)


@njit(cache=True)
def power_law_momentum(u, gamma, p_min, p_max):
    e = 1.0 - gamma
    a = p_min**e
    b = p_max**e
    return (a + u * (b - a)) ** (1.0 / e)


@njit(cache=True)
def plane_sigma(x, lam, p):
    """RMS plane angle (rad) after path ``x`` cm at density ``lam`` cm^-1."""
    return math.sqrt(E_S * E_S / (2.0 * p * p) * x * lam)


@njit(cache=True)
def _transverse_basis(dx, dy, dz):
    # helper axis least aligned with d
    ax = abs(dx)
    ay = abs(dy)
    az = abs(dz)
    if ax <= ay and ax <= az:
        ex, ey, ez = 1.0, 0.0, 0.0
    elif ay <= az:
        ex, ey, ez = 0.0, 1.0, 0.0
    else:
        ex, ey, ez = 0.0, 0.0, 1.0
    ux = dy * ez - dz * ey
    uy = dz * ex - dx * ez
    uz = dx * ey - dy * ex
    n = math.sqrt(ux * ux + uy * uy + uz * uz)
    ux /= n
    uy /= n
    uz /= n
    vx = dy * uz - dz * uy
    vy = dz * ux - dx * uz
    vz = dx * uy - dy * ux
    return ux, uy, uz, vx, vy, vz


@njit(cache=True)
def scatter_kick(pos, d, p, x, lam, z1, z2, z3, z4):
    """Apply the correlated (displacement, angle) kick of one segment in place.

    ``pos`` is the end point of the unscattered segment; ``z1..z4`` are
    standard normals (z1, z2 for the first transverse plane).
    """
    if lam <= 0.0 or x <= 0.0:
        return
    sig = plane_sigma(x, lam, p)
    ux, uy, uz, vx, vy, vz = _transverse_basis(d[0], d[1], d[2])
    inv12 = 1.0 / math.sqrt(12.0)
    th_u = z2 * sig
    th_v = z4 * sig
    y_u = x * sig * (z1 * inv12 + 0.5 * z2)
    y_v = x * sig * (z3 * inv12 + 0.5 * z4)
    pos[0] += y_u * ux + y_v * vx
    pos[1] += y_u * uy + y_v * vy
    pos[2] += y_u * uz + y_v * vz
    tu = math.tan(th_u)
    tv = math.tan(th_v)
    nx = d[0] + tu * ux + tv * vx
    ny = d[1] + tu * uy + tv * vy
    nz = d[2] + tu * uz + tv * vz
    n = math.sqrt(nx * nx + ny * ny + nz * nz)
    d[0] = nx / n
    d[1] = ny / n
    d[2] = nz / n


@njit(cache=True)
def _sample_start(state, gamma, p_min, p_max, z_top, det_half, pos, d):
    """Rejection-sample a start state; returns (momentum, attempts) or (-1, attempts)."""
    for attempt in range(1, _MAX_ATTEMPTS + 1):
        x = (2.0 * _uniform(state) - 1.0) * det_half
        y = (2.0 * _uniform(state) - 1.0) * det_half
        c = zenith_cos(_uniform(state))
        s = math.sqrt(max(0.0, 1.0 - c * c))
        phi = 2.0 * math.pi * _uniform(state)
        dx = s * math.cos(phi)
        dy = s * math.sin(phi)
        dz = -c
        if dz >= 0.0:
            continue
        t = (-2.0 * z_top) / dz
        xb = x + t * dx
        yb = y + t * dy
        if abs(xb) <= det_half and abs(yb) <= det_half:
            pos[0] = x
            pos[1] = y
            pos[2] = z_top
            d[0] = dx
            d[1] = dy
            d[2] = dz
            return power_law_momentum(_uniform(state), gamma, p_min, p_max), attempt
    return -1.0, _MAX_ATTEMPTS


@njit(cache=True)
def _propagate(state, grid, h, z_top, det_half, pos, d, p):
    """Transport from the upper plane to the lower plane in place.

    Returns False when the muon misses the lower detector.
    """
    r = grid.shape[0]
    t0, t1, hit = ray_box(pos[0], pos[1], pos[2], d[0], d[1], d[2], h)
    if hit and t1 > 0.0:
        if t0 > 0.0:
            pos[0] += t0 * d[0]
            pos[1] += t0 * d[1]
            pos[2] += t0 * d[2]
        for _ in range(_MAX_STEPS):
            ix, iy, iz, t = voxel_step(pos[0], pos[1], pos[2], d[0], d[1], d[2], r, h)
            if ix < 0 or ix >= r or iy < 0 or iy >= r or iz < 0 or iz >= r:
                break
            if t < 1e-9:
                t = 1e-9
            pos[0] += t * d[0]
            pos[1] += t * d[1]
            pos[2] += t * d[2]
            lam = grid[ix, iy, iz]
            if lam > 0.0:
                z1, z2 = _normal_pair(state)
                z3, z4 = _normal_pair(state)
                scatter_kick(pos, d, p, t, lam, z1, z2, z3, z4)
    if d[2] >= 0.0:
        return False
    t = (-z_top - pos[2]) / d[2]
    if t < 0.0:
        return False
    pos[0] += t * d[0]
    pos[1] += t * d[1]
    pos[2] = -z_top
    return abs(pos[0]) <= det_half and abs(pos[1]) <= det_half


@njit(cache=True, parallel=True)
def _simulate_kernel(grid, h, z_top, det_half, gamma, p_min, p_max, seed, n, out):
    # out columns: entry pos(3), entry dir(3), exit pos(3), exit dir(3), p, drops, attempts_failed
    for k in prange(n):
        state = np.empty(1, dtype=np.uint64)
        state[0] = stream_key(seed, k)
        pos = np.empty(3)
        d = np.empty(3)
        drops = 0
        ok = False
        failed = 0
        for _ in range(_MAX_ATTEMPTS):
            p, _att = _sample_start(state, gamma, p_min, p_max, z_top, det_half, pos, d)
            if p < 0.0:
                failed = 1
                break
            out[k, 0] = pos[0]
            out[k, 1] = pos[1]
            out[k, 2] = pos[2]
            out[k, 3] = d[0]
            out[k, 4] = d[1]
            out[k, 5] = d[2]
            if _propagate(state, grid, h, z_top, det_half, pos, d, p):
                ok = True
                out[k, 6] = pos[0]
                out[k, 7] = pos[1]
                out[k, 8] = pos[2]
                out[k, 9] = d[0]
                out[k, 10] = d[1]
                out[k, 11] = d[2]
                out[k, 12] = p
                break
            drops += 1
        out[k, 13] = drops
        out[k, 14] = 0 if ok and not failed else 1


@njit(cache=True, parallel=True)
def _transport_kernel(grid, h, z_top, det_half, seed, pos0, dir0, mom, out, ok):
    n = pos0.shape[0]
    for k in prange(n):
        state = np.empty(1, dtype=np.uint64)
        state[0] = stream_key(seed, k)
        pos = pos0[k].copy()
        d = dir0[k].copy()
        ok[k] = _propagate(state, grid, h, z_top, det_half, pos, d, mom[k])
        out[k, 0] = pos[0]
        out[k, 1] = pos[1]
        out[k, 2] = pos[2]
        out[k, 3] = d[0]
        out[k, 4] = d[1]
        out[k, 5] = d[2]


@njit(cache=True)
def _sample_kernel(seed, n, gamma, p_min, p_max, z_top, det_half, out):
    for k in range(n):
        state = np.empty(1, dtype=np.uint64)
        state[0] = stream_key(seed, k)
        pos = np.empty(3)
        d = np.empty(3)
        p, att = _sample_start(state, gamma, p_min, p_max, z_top, det_half, pos, d)
        out[k, 0:3] = pos
        out[k, 3:6] = d
        out[k, 6] = p
        out[k, 7] = att


@njit(cache=True)
def _zenith_kernel(seed, n, out):
    state = np.empty(1, dtype=np.uint64)
    state[0] = stream_key(seed, 0)
    for k in range(n):
        out[k] = zenith_cos(_uniform(state))


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _grid_array(grid: VoxelGrid, geom: Geometry) -> np.ndarray:
    if abs(grid.extent - geom.object_side) > 1e-9:
        raise ConfigurationError(
            f"grid extent {grid.extent} does not match object side {geom.object_side}"
        )
    return np.ascontiguousarray(grid.values, dtype=np.float64)


def sample_zenith_cosines(seed: int, n: int) -> np.ndarray:
    """Raw draws of cos(zenith) from the cos^2 law, before detector acceptance."""
    out = np.empty(n)
    _zenith_kernel(np.uint64(seed), n, out)
    return out


def sample_muons(seed: int, n: int, beam: BeamConfig = BeamConfig(), geom: Geometry = Geometry()):
    """Accepted start states on the upper plane.

    Returns ``(positions, directions, momenta, attempts)``.
    """
    out = np.empty((n, 8))
    _sample_kernel(np.uint64(seed), n, beam.gamma, beam.p_min, beam.p_max,
                   geom.plane_z, geom.detector_half_side, out)
    if n and np.any(out[:, 6] < 0):
        raise ConfigurationError("detector acceptance below 1e-4; geometry is inconsistent")
    return out[:, 0:3], out[:, 3:6], out[:, 6], out[:, 7].astype(np.int64)


def sample_muon(stream_seed: int, beam: BeamConfig = BeamConfig(), geom: Geometry = Geometry()) -> MuonState:
    pos, d, p, _ = sample_muons(stream_seed, 1, beam, geom)
    return MuonState(pos[0].copy(), d[0].copy(), float(p[0]))


def step_scatter(state: MuonState, x: float, lam: float, rng: np.random.Generator) -> MuonState:
    """Gaussian multiple-scattering kick for a segment of ``x`` cm at density ``lam``.

    ``state.position`` is taken as the end of the unscattered segment; the
    returned state carries the lateral displacement and the deflected
    direction.  ``lam == 0`` or ``x == 0`` returns an identical state.
    """
    if x < 0 or lam < 0:
        raise ValueError("segment length and density must be non-negative")
    out = state.copy()
    if lam == 0 or x == 0:
        return out
    z = rng.standard_normal(4)
    scatter_kick(out.position, out.direction, state.momentum, x, lam, z[0], z[1], z[2], z[3])
    return out


def transport_states(grid: VoxelGrid, positions, directions, momenta, seed: int = 0,
                     geom: Geometry = Geometry()):
    """Transport given start states from the upper plane.

    Returns ``(exit_positions, exit_directions, ok)``; ``ok`` is False for
    muons that miss the lower detector.
    """
    pos0 = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    dir0 = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    mom = np.ascontiguousarray(np.broadcast_to(momenta, (len(pos0),)), dtype=np.float64)
    out = np.empty((len(pos0), 6))
    ok = np.empty(len(pos0), dtype=np.bool_)
    _transport_kernel(_grid_array(grid, geom), geom.half, geom.plane_z, geom.detector_half_side,
                      np.uint64(seed), pos0, dir0, mom, out, ok)
    return out[:, 0:3], out[:, 3:6], ok


def transport(state: MuonState, grid: VoxelGrid, geom: Geometry = Geometry(), seed: int = 0):
    """Single-muon transport; returns ``(entry_state, exit_state)`` or ``None`` if dropped."""
    xp, xd, ok = transport_states(grid, state.position[None], state.direction[None],
                                  state.momentum, seed, geom)
    if not ok[0]:
        return None
    return state.copy(), MuonState(xp[0].copy(), xd[0].copy(), state.momentum)


def simulate_true(grid: VoxelGrid, dosage: int, seed: int, beam: BeamConfig = BeamConfig(),
                  geom: Geometry = Geometry()) -> EventBatch:
    """Exactly ``dosage`` muons that reach the lower detector, with exact records."""
    if dosage < 1:
        raise ValueError(f"dosage must be >= 1, got {dosage}")
    out = np.empty((dosage, 15))
    _simulate_kernel(_grid_array(grid, geom), geom.half, geom.plane_z, geom.detector_half_side,
                     beam.gamma, beam.p_min, beam.p_max, np.uint64(seed), dosage, out)
    if np.any(out[:, 14] != 0):
        raise ConfigurationError("could not produce detected muons (acceptance below 1e-4)")
    p = out[:, 12].copy()
    return EventBatch(out[:, 0:3].copy(), out[:, 6:9].copy(), out[:, 3:6].copy(),
                      out[:, 9:12].copy(), p, p.copy(), n_dropped=int(out[:, 13].sum()))


def _snap(u, n, half):
    cell = 2.0 * half / n
    idx = np.clip(np.floor((u + half) / cell), 0, n - 1)
    return -half + (idx + 0.5) * cell


def detect(true: EventBatch, det: DetectorConfig = DetectorConfig(), seed: int = 0,
           geom: Geometry = Geometry()) -> EventBatch:
    """Apply detector pixelation and momentum-estimate error to exact records.

    Each detector is two pixel planes ``plane_spacing`` apart (the inner one at
    ``+-plane_z``).  With finite resolution both crossings are snapped to
    pixel centres and directions are rebuilt from the snapped pair.  The
    momentum estimate is ``p * (1 + u)``, ``u ~ U[-dp, dp]``; the same
    underlying draws are used for every ``dp`` under one seed.
    """
    n = len(true)
    w = np.random.default_rng([seed, 2]).random(n)
    u = det.momentum_error * (2.0 * w - 1.0)
    est = np.maximum(true.true_momentum * (1.0 + u), det.min_momentum)
    if det.pixels_per_side is None:
        return EventBatch(true.entry_pos.copy(), true.exit_pos.copy(), true.entry_dir.copy(),
                          true.exit_dir.copy(), est, true.true_momentum.copy(), true.n_dropped)

    npx = det.pixels_per_side
    half = geom.detector_half_side
    gap = geom.plane_spacing

    def pair(pos, d, outward_sign):
        # crossing of the outer plane (further from the object along z)
        t = outward_sign * gap / d[:, 2]
        outer = pos + t[:, None] * d
        inner_s = pos.copy()
        outer_s = outer.copy()
        for a in (0, 1):
            inner_s[:, a] = _snap(pos[:, a], npx, half)
            outer_s[:, a] = _snap(outer[:, a], npx, half)
        return inner_s, outer_s

    top_in, top_out = pair(true.entry_pos, true.entry_dir, +1.0)
    bot_in, bot_out = pair(true.exit_pos, true.exit_dir, -1.0)
    d0 = top_in - top_out
    d0 /= np.linalg.norm(d0, axis=1, keepdims=True)
    df = bot_out - bot_in
    df /= np.linalg.norm(df, axis=1, keepdims=True)
    return EventBatch(top_in, bot_in, d0, df, est, true.true_momentum.copy(), true.n_dropped)


def simulate_event_set(grid: VoxelGrid, dosage: int, master_seed: int,
                       beam: BeamConfig = BeamConfig(), det: DetectorConfig = DetectorConfig(),
                       geom: Geometry = Geometry()) -> EventBatch:
    true = simulate_true(grid, dosage, master_seed, beam, geom)
    return detect(true, det, master_seed, geom)


def canonical_order(events: EventBatch) -> np.ndarray:
    """Permutation sorting events by content; identical for any input order."""
    if len(events) == 0:
        return np.zeros(0, dtype=np.int64)
    cols = np.column_stack([
        events.entry_pos, events.exit_pos, events.entry_dir, events.exit_dir,
        events.momentum, events.true_momentum,
    ])
    return np.lexsort(cols.T[::-1])
