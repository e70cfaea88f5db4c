"""Ray / voxel-grid geometry.

Grids are cubes ``[-h, h]^3`` with ``h = extent / 2`` split into ``r`` voxels
per axis.  ``voxel_path`` decomposes a chord into per-voxel lengths using the
merged parametric plane crossings (Siddon's method); ``voxel_step`` is the
incremental form used by the transport loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("ray origin and direction must be 3-vectors")
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-12:
            raise ValueError(f"ray direction must be unit length, |d| = {n!r}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class PathSegment:
    voxel: tuple[int, int, int]
    length: float


@njit(cache=True)
def ray_box(ox, oy, oz, dx, dy, dz, h):
    """Slab intersection of a line with the cube [-h, h]^3.

    Returns ``(t_in, t_out, hit)`` for the full line (t may be negative).
    """
    t_in = -np.inf
    t_out = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < -h or o[a] > h:
                return 0.0, 0.0, False
        else:
            t1 = (-h - o[a]) / d[a]
            t2 = (h - o[a]) / d[a]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > t_in:
                t_in = t1
            if t2 < t_out:
                t_out = t2
    if t_in > t_out:
        return 0.0, 0.0, False
    return t_in, t_out, True


@njit(cache=True)
def _axis_index(p, d, h, ell, r):
    f = (p + h) / ell
    i = np.floor(f)
    if f == i and d < 0.0:
        i -= 1.0
    if i < 0.0:
        return -1
    if i >= r:
        return r
    return int(i)


@njit(cache=True)
def voxel_step(px, py, pz, dx, dy, dz, r, h):
    """Voxel containing the point (ties broken along the flight direction)
    and the distance to that voxel's exit face.

    Returns ``(ix, iy, iz, t)``; an index of -1 or r means the point has
    left the grid.
    """
    ell = 2.0 * h / r
    ix = _axis_index(px, dx, h, ell, r)
    iy = _axis_index(py, dy, h, ell, r)
    iz = _axis_index(pz, dz, h, ell, r)
    if ix < 0 or ix >= r or iy < 0 or iy >= r or iz < 0 or iz >= r:
        return ix, iy, iz, 0.0
    t = np.inf
    p = (px, py, pz)
    d = (dx, dy, dz)
    idx = (ix, iy, iz)
    for a in range(3):
        if d[a] > 0.0:
            ta = ((idx[a] + 1) * ell - h - p[a]) / d[a]
        elif d[a] < 0.0:
            ta = (idx[a] * ell - h - p[a]) / d[a]
        else:
            continue
        if ta < t:
            t = ta
    if t < 0.0:
        t = 0.0
    return ix, iy, iz, t


@njit(cache=True)
def siddon(entry, exit_, r, h, out_idx, out_len):
    """Chord decomposition into ``out_idx[k] = flat voxel index`` (x fastest)
    and ``out_len[k]`` in cm.  Returns the number of segments written;
    ``out_*`` need room for ``3 * r + 3`` entries.
    """
    d0 = exit_[0] - entry[0]
    d1 = exit_[1] - entry[1]
    d2 = exit_[2] - entry[2]
    L = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if L == 0.0:
        return 0
    ell = 2.0 * h / r
    alphas = np.empty(3 * (r + 1) + 2)
    n = 0
    alphas[n] = 0.0
    n += 1
    alphas[n] = 1.0
    n += 1
    d = (d0, d1, d2)
    for a in range(3):
        if d[a] == 0.0:
            continue
        for k in range(r + 1):
            al = (-h + k * ell - entry[a]) / d[a]
            if 0.0 < al < 1.0:
                alphas[n] = al
                n += 1
    al_sorted = np.sort(alphas[:n])
    m = 0
    prev_flat = -1
    for k in range(n - 1):
        a0 = al_sorted[k]
        a1 = al_sorted[k + 1]
        if a1 <= a0:
            continue
        am = 0.5 * (a0 + a1)
        ix = int(np.floor((entry[0] + am * d0 + h) / ell))
        iy = int(np.floor((entry[1] + am * d1 + h) / ell))
        iz = int(np.floor((entry[2] + am * d2 + h) / ell))
        ix = min(max(ix, 0), r - 1)
        iy = min(max(iy, 0), r - 1)
        iz = min(max(iz, 0), r - 1)
        flat = ix + r * (iy + r * iz)
        seg = (a1 - a0) * L
        if flat == prev_flat:
            out_len[m - 1] += seg
        else:
            out_idx[m] = flat
            out_len[m] = seg
            m += 1
            prev_flat = flat
    return m


def unflatten(flat: int, r: int) -> tuple[int, int, int]:
    ix = flat % r
    iy = (flat // r) % r
    iz = flat // (r * r)
    return int(ix), int(iy), int(iz)


def voxel_path(entry, exit, resolution: int, extent: float = 100.0) -> list[PathSegment]:
    """Ordered per-voxel segments of the straight chord ``entry -> exit``.

    Both points are expected on (or inside) the grid cube.  A zero-length
    chord gives an empty list.
    """
    entry = np.asarray(entry, dtype=float)
    exit = np.asarray(exit, dtype=float)
    cap = 3 * resolution + 3
    idx = np.empty(cap, dtype=np.int64)
    lens = np.empty(cap)
    m = siddon(entry, exit, resolution, 0.5 * extent, idx, lens)
    return [PathSegment(unflatten(idx[k], resolution), float(lens[k])) for k in range(m)]


def chord_through_box(origin, direction, half: float):
    """Entry and exit points of a line with the cube, or ``None`` if it misses."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    t0, t1, hit = ray_box(o[0], o[1], o[2], d[0], d[1], d[2], half)
    if not hit:
        return None
    return o + t0 * d, o + t1 * d


def ray_box_many(origins: np.ndarray, directions: np.ndarray, half: float):
    """Vectorized :func:`ray_box` over ``(N, 3)`` arrays: ``(t_in, t_out, hit)``."""
    o = np.asarray(origins, dtype=float)
    d = np.asarray(directions, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    flat = d == 0.0
    inside = np.abs(o) <= half
    lo = np.where(flat, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(flat, np.where(inside, np.inf, -np.inf), hi)
    t_in = lo.max(axis=1)
    t_out = hi.min(axis=1)
    hit = t_in <= t_out
    return np.where(hit, t_in, 0.0), np.where(hit, t_out, 0.0), hit
