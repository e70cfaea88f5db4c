"""Maximum-likelihood reconstruction from scattering angles.

Each muon's two projected scattering angles are modelled as independent
zero-mean Gaussians with variance

    sigma_i^2 = (p_ref / p_i)^2 * sum_j L_ij * lambda_j

where ``L_ij`` is the length of the muon's chord inside voxel ``j``.  The
chord joins the incoming track's entry into the object with the outgoing
track's exit from it.  Displacements are not used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .phantom import VoxelGrid
from .poca import projected_angles
from .simulator import P_REF, EventBatch, Geometry, canonical_order
from .tracing import Ray, PathSegment, ray_box_many, siddon, voxel_path

WATER_DENSITY = 1.0 / 36.08

__all__ = [
    "MlemConfig", "NoDataError", "ScatterSystem", "build_system", "log_likelihood",
    "log_likelihood_gradient", "mlem_iterate", "mlem_reconstruct", "voxel_path",
    "PathSegment", "Ray",
]


class NoDataError(ValueError):
    pass


@dataclass(frozen=True)
class MlemConfig:
    max_iterations: int = 100
    tolerance: float = 1e-7
    lambda_floor: float = 1e-6
    resolution: int = 8
    initial_density: float = WATER_DENSITY
    p_ref: float = P_REF
    max_halvings: int = 40

    def __post_init__(self):
        if not self.lambda_floor > 0:
            raise ValueError("lambda_floor must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.resolution < 1 or self.max_iterations < 0:
            raise ValueError("resolution must be >= 1 and max_iterations >= 0")


@dataclass
class ScatterSystem:
    """Path-length matrix and per-muon data for the events crossing the object."""

    lengths: sp.csr_matrix  # (n_events, r^3)
    weight: np.ndarray  # (p_ref / p)^2
    sq_angle: np.ndarray  # theta_u^2 + theta_v^2
    resolution: int
    extent: float
    visits: np.ndarray = field(init=False)  # muons crossing each voxel

    def __post_init__(self):
        self.visits = np.diff(self.lengths.tocsc().indptr)

    def __len__(self):
        return self.lengths.shape[0]


@njit(cache=True)
def _build_csr(entry, exit_, r, h):
    n = entry.shape[0]
    cap = 3 * r + 3
    idx = np.empty(n * cap, dtype=np.int64)
    val = np.empty(n * cap)
    indptr = np.zeros(n + 1, dtype=np.int64)
    tmp_i = np.empty(cap, dtype=np.int64)
    tmp_l = np.empty(cap)
    pos = 0
    for k in range(n):
        m = siddon(entry[k], exit_[k], r, h, tmp_i, tmp_l)
        # column order inside a row is irrelevant for the products; sort for canonical CSR
        order = np.argsort(tmp_i[:m])
        for q in range(m):
            idx[pos] = tmp_i[order[q]]
            val[pos] = tmp_l[order[q]]
            pos += 1
        indptr[k + 1] = pos
    return idx[:pos], val[:pos], indptr


def build_system(events: EventBatch, resolution: int, geom: Geometry = Geometry(),
                 p_ref: float = P_REF) -> ScatterSystem:
    """Trace every event that crosses the object (others are dropped)."""
    ev = events.take(canonical_order(events))
    half = geom.half
    t_in, _, hit_in = ray_box_many(ev.entry_pos, ev.entry_dir, half)
    _, t_out, hit_out = ray_box_many(ev.exit_pos, ev.exit_dir, half)
    keep = hit_in & hit_out
    entry = ev.entry_pos + t_in[:, None] * ev.entry_dir
    exit_ = ev.exit_pos + t_out[:, None] * ev.exit_dir
    entry = np.clip(entry[keep], -half, half)
    exit_ = np.clip(exit_[keep], -half, half)
    idx, val, indptr = _build_csr(np.ascontiguousarray(entry), np.ascontiguousarray(exit_),
                                  resolution, half)
    n = int(keep.sum())
    L = sp.csr_matrix((val, idx, indptr), shape=(n, resolution**3))
    th_u, th_v = projected_angles(ev.entry_dir[keep], ev.exit_dir[keep])
    weight = (p_ref / ev.momentum[keep]) ** 2
    # rows with zero length (grazing a corner) carry no information
    has_path = np.diff(indptr) > 0
    if not np.all(has_path):
        L = L[has_path]
        weight = weight[has_path]
        th_u, th_v = th_u[has_path], th_v[has_path]
    return ScatterSystem(L, weight, th_u**2 + th_v**2, resolution, geom.object_side)


def _variance(system: ScatterSystem, lam_flat: np.ndarray) -> np.ndarray:
    return system.weight * (system.lengths @ lam_flat)


def _ll(system: ScatterSystem, lam_flat: np.ndarray) -> float:
    s2 = _variance(system, lam_flat)
    return float(np.sum(-np.log(s2) - system.sq_angle / (2.0 * s2)))


def _grad(system: ScatterSystem, lam_flat: np.ndarray) -> np.ndarray:
    s2 = _variance(system, lam_flat)
    w = 0.5 * system.weight * (system.sq_angle / s2**2 - 2.0 / s2)
    return system.lengths.T @ w


def _flat(grid: VoxelGrid) -> np.ndarray:
    return grid.values.reshape(-1, order="F")


def log_likelihood(grid: VoxelGrid, events: EventBatch | ScatterSystem,
                   geom: Geometry = Geometry()) -> float:
    """Gaussian log-likelihood of both projected angles of every crossing muon,
    without the ``-log(2 pi)`` constant."""
    system = events if isinstance(events, ScatterSystem) else build_system(events, grid.resolution, geom)
    return _ll(system, _flat(grid))


def log_likelihood_gradient(grid: VoxelGrid, events: EventBatch | ScatterSystem,
                            geom: Geometry = Geometry()) -> np.ndarray:
    system = events if isinstance(events, ScatterSystem) else build_system(events, grid.resolution, geom)
    g = _grad(system, _flat(grid))
    r = grid.resolution
    return g.reshape(r, r, r, order="F")


def mlem_iterate(system: ScatterSystem, config: MlemConfig = MlemConfig(), callback=None):
    """Run the safeguarded update; returns ``(lambda_flat, log_likelihood_history)``.

    Update: ``lam_j += lam_j^2 / M_j * dLL/dlam_j``, floored at
    ``lambda_floor`` and halved until the likelihood does not decrease.
    ``callback(iteration, lam_flat)`` sees every accepted iterate.
    """
    if len(system) == 0:
        raise NoDataError("no data: no muon crosses the object")
    lam = np.full(system.resolution**3, max(config.initial_density, config.lambda_floor))
    visits = np.maximum(system.visits, 1)
    ll = _ll(system, lam)
    history = [ll]
    for _ in range(config.max_iterations):
        step = lam**2 / visits * _grad(system, lam)
        step[system.visits == 0] = 0.0
        beta = 1.0
        accepted = False
        for _h in range(config.max_halvings):
            trial = np.maximum(lam + beta * step, config.lambda_floor)
            ll_trial = _ll(system, trial)
            if ll_trial >= ll:
                accepted = True
                break
            beta *= 0.5
        if not accepted:
            break
        change = abs(ll_trial - ll) / max(abs(ll), 1e-300)
        lam, ll = trial, ll_trial
        history.append(ll)
        if callback is not None:
            callback(len(history) - 1, lam)
        if change < config.tolerance:
            break
    return lam, history


def mlem_reconstruct(events: EventBatch, config: MlemConfig = MlemConfig(),
                     geom: Geometry = Geometry()) -> VoxelGrid:
    system = build_system(events, config.resolution, geom, config.p_ref)
    lam, _ = mlem_iterate(system, config)
    r = config.resolution
    return VoxelGrid(lam.reshape(r, r, r, order="F"), geom.object_side)
