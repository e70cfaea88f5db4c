"""Voxel phantoms built from fractal gradient noise.

A phantom is a cube of side ``extent`` cm split into ``resolution**3`` voxels.
Each voxel stores a scattering density in cm^-1, which under the fixed
15 MeV normalization is simply the reciprocal radiation length of the
material filling it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class InvalidMaterialError(ValueError):
    pass


@dataclass(frozen=True)
class Material:
    name: str
    radiation_length: float  # cm; math.inf for vacuum

    def __post_init__(self):
        if not self.radiation_length > 0:
            raise InvalidMaterialError(
                f"material {self.name!r}: radiation length must be > 0, got {self.radiation_length}"
            )

    @property
    def density(self) -> float:
        return material_lambda(self)

    @property
    def is_empty(self) -> bool:
        return math.isinf(self.radiation_length)


def material_lambda(material: Material) -> float:
    """Scattering density of ``material`` in cm^-1 (zero for the empty material)."""
    x0 = material.radiation_length
    if not x0 > 0:
        raise InvalidMaterialError(f"material {material.name!r}: non-positive radiation length {x0}")
    if math.isinf(x0):
        return 0.0
    return 1.0 / x0


EMPTY = Material("empty", math.inf)

# Radiation lengths in cm (PDG values).
DEFAULT_MATERIALS = (
    EMPTY,
    Material("water", 36.08),
    Material("concrete", 11.55),
    Material("aluminum", 8.897),
    Material("iron", 1.757),
    Material("lead", 0.5612),
    Material("uranium", 0.3166),
)


@dataclass(frozen=True)
class MaterialLibrary:
    materials: tuple[Material, ...] = DEFAULT_MATERIALS

    def __post_init__(self):
        mats = tuple(self.materials)
        object.__setattr__(self, "materials", mats)
        if not mats:
            raise InvalidMaterialError("material library is empty")
        names = [m.name for m in mats]
        if len(set(names)) != len(names):
            raise InvalidMaterialError(f"duplicate material names in {names}")
        if not any(m.is_empty for m in mats):
            object.__setattr__(self, "materials", (EMPTY,) + mats)
        if self.lambda_max <= 0:
            raise InvalidMaterialError("library needs at least one non-empty material")

    @property
    def solids(self) -> tuple[Material, ...]:
        return tuple(m for m in self.materials if not m.is_empty)

    @property
    def lambda_max(self) -> float:
        return max(m.density for m in self.materials)

    def densities(self) -> np.ndarray:
        return np.array([m.density for m in self.materials])

    def __getitem__(self, name: str) -> Material:
        for m in self.materials:
            if m.name == name:
                return m
        raise KeyError(name)

    @classmethod
    def from_mapping(cls, mapping: dict[str, float]) -> "MaterialLibrary":
        """Build from ``{name: radiation_length_cm}``; ``None`` or ``inf`` marks vacuum."""
        mats = []
        for name, x0 in mapping.items():
            mats.append(Material(name, math.inf if x0 is None else float(x0)))
        return cls(tuple(mats))


@dataclass
class VoxelGrid:
    """Piecewise-constant density on a cube centred at the origin.

    ``values[ix, iy, iz]`` is the density of the voxel whose centre is at
    ``-extent/2 + (i + 0.5) * voxel_size`` along each axis.
    """

    values: np.ndarray
    extent: float = 100.0
    resolution: int = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] < 1:
            raise ValueError(f"voxel grid must be a non-empty cube, got shape {v.shape}")
        if not self.extent > 0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("voxel densities must be finite and non-negative")
        self.values = v
        self.resolution = v.shape[0]

    @property
    def voxel_size(self) -> float:
        return self.extent / self.resolution

    @property
    def half_extent(self) -> float:
        return 0.5 * self.extent

    @classmethod
    def zeros(cls, resolution: int, extent: float = 100.0) -> "VoxelGrid":
        return cls(np.zeros((resolution,) * 3), extent)

    @classmethod
    def uniform(cls, resolution: int, density: float, extent: float = 100.0) -> "VoxelGrid":
        return cls(np.full((resolution,) * 3, float(density)), extent)

    def voxel_centers(self) -> np.ndarray:
        return -self.half_extent + (np.arange(self.resolution) + 0.5) * self.voxel_size


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def gradient_noise(rng: np.random.Generator, resolution: int, frequency: float) -> np.ndarray:
    """One layer of lattice-gradient (Perlin) noise sampled at voxel centres.

    Gradients are random unit vectors on a lattice with ``frequency`` cells
    across the cube, shifted by a random sub-cell offset.  Values lie in
    [-sqrt(3)/2, sqrt(3)/2].
    """
    n_cells = int(math.ceil(frequency)) + 2
    g = rng.normal(size=(n_cells + 1, n_cells + 1, n_cells + 1, 3))
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    offset = rng.uniform(0.0, 1.0, size=3)

    t = (np.arange(resolution) + 0.5) / resolution * frequency
    coords = [t + offset[a] for a in range(3)]
    cell = [np.floor(c).astype(np.int64) for c in coords]
    frac = [c - np.floor(c) for c in coords]

    cx, cy, cz = np.meshgrid(*cell, indexing="ij")
    fx, fy, fz = np.meshgrid(*frac, indexing="ij")
    u, v, w = _fade(fx), _fade(fy), _fade(fz)

    out = np.zeros((resolution,) * 3)
    for dx in (0, 1):
        wx = u if dx else 1.0 - u
        for dy in (0, 1):
            wy = v if dy else 1.0 - v
            for dz in (0, 1):
                wz = w if dz else 1.0 - w
                grad = g[cx + dx, cy + dy, cz + dz]
                dot = grad[..., 0] * (fx - dx) + grad[..., 1] * (fy - dy) + grad[..., 2] * (fz - dz)
                out += wx * wy * wz * dot
    return out


_NOISE_BOUND = math.sqrt(3.0) / 2.0


def fractal_noise(
    seed: int,
    resolution: int,
    octaves: int = 3,
    persistence: float = 0.5,
    base_frequency: float = 2.0,
) -> np.ndarray:
    """Octave-summed gradient noise mapped into [0, 1]."""
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    if octaves < 1:
        raise ValueError(f"octaves must be >= 1, got {octaves}")
    if not 0 < persistence <= 1:
        raise ValueError(f"persistence must be in (0, 1], got {persistence}")
    rng = np.random.default_rng([seed, 0])
    total = np.zeros((resolution,) * 3)
    weight = 0.0
    amp = 1.0
    for k in range(octaves):
        total += amp * gradient_noise(rng, resolution, base_frequency * 2**k)
        weight += amp
        amp *= persistence
    field01 = 0.5 * (total / (weight * _NOISE_BOUND) + 1.0)
    return np.clip(field01, 0.0, 1.0)


@dataclass(frozen=True)
class PhantomConfig:
    resolution: int = 16
    extent: float = 100.0
    occupancy_threshold: float = 0.5
    octaves: int = 3
    persistence: float = 0.5
    base_frequency: float = 2.0


def generate_phantom(
    seed: int,
    resolution: int = 16,
    library: MaterialLibrary | None = None,
    occupancy_threshold: float = 0.5,
    *,
    extent: float = 100.0,
    octaves: int = 3,
    persistence: float = 0.5,
    base_frequency: float = 2.0,
) -> VoxelGrid:
    """Threshold fractal noise and fill each 6-connected blob with one material.

    Materials are drawn uniformly from the non-empty members of ``library``.
    """
    if not 0 < occupancy_threshold < 1:
        raise ValueError(f"occupancy threshold must be in (0, 1), got {occupancy_threshold}")
    library = library or MaterialLibrary()
    noise = fractal_noise(seed, resolution, octaves, persistence, base_frequency)
    occupied = noise >= occupancy_threshold
    labels, n = ndimage.label(occupied)  # default structure is face (6-) connectivity
    solids = library.solids
    rng = np.random.default_rng([seed, 1])
    picks = rng.integers(0, len(solids), size=n)
    table = np.zeros(n + 1)
    table[1:] = [solids[i].density for i in picks]
    return VoxelGrid(table[labels], extent)


def phantom_from_config(seed: int, cfg: PhantomConfig, library: MaterialLibrary | None = None) -> VoxelGrid:
    return generate_phantom(
        seed,
        cfg.resolution,
        library,
        cfg.occupancy_threshold,
        extent=cfg.extent,
        octaves=cfg.octaves,
        persistence=cfg.persistence,
        base_frequency=cfg.base_frequency,
    )
