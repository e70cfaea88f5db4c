import math
from collections import deque

import numpy as np
import pytest

from mutomo.phantom import (
    DEFAULT_MATERIALS,
    EMPTY,
    InvalidMaterialError,
    Material,
    MaterialLibrary,
    VoxelGrid,
    fractal_noise,
    generate_phantom,
    gradient_noise,
    material_lambda,
)


def flood_components(occupied):
    """Independent 6-connected labelling by breadth-first search."""
    r = occupied.shape[0]
    labels = np.zeros(occupied.shape, dtype=int)
    n = 0
    for start in zip(*np.nonzero(occupied)):
        if labels[start]:
            continue
        n += 1
        labels[start] = n
        q = deque([start])
        while q:
            x, y, z = q.popleft()
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nb = (x + dx, y + dy, z + dz)
                if all(0 <= c < r for c in nb) and occupied[nb] and not labels[nb]:
                    labels[nb] = n
                    q.append(nb)
    return labels, n


def test_material_lambda_examples():
    assert material_lambda(Material("lead", 0.5612)) == pytest.approx(1.78189, abs=1e-5)
    assert material_lambda(EMPTY) == 0.0
    assert material_lambda(Material("unit", 1.0)) == 1.0
    assert Material("x", 2.0).density == 1.0 / 2.0


@pytest.mark.parametrize("x0", [0.0, -1.0])
def test_non_positive_radiation_length_rejected(x0):
    with pytest.raises(InvalidMaterialError):
        Material("bad", x0)


def test_library_invariants():
    lib = MaterialLibrary()
    assert lib.materials[0].is_empty
    assert lib.lambda_max == pytest.approx(1 / 0.3166)
    with pytest.raises(InvalidMaterialError):
        MaterialLibrary((Material("a", 1.0), Material("a", 2.0)))
    with pytest.raises(InvalidMaterialError):
        MaterialLibrary((EMPTY,))
    lib2 = MaterialLibrary.from_mapping({"iron": 1.757})
    assert [m.name for m in lib2.materials] == ["empty", "iron"]


def test_voxel_grid_validation():
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        VoxelGrid(-np.ones((2, 2, 2)))
    g = VoxelGrid.zeros(4)
    assert g.voxel_size == 25.0
    np.testing.assert_allclose(g.voxel_centers(), [-37.5, -12.5, 12.5, 37.5])


def test_fractal_noise_deterministic_and_in_range():
    a = fractal_noise(3, 16)
    b = fractal_noise(3, 16)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, fractal_noise(4, 16))


def test_single_octave_is_rescaled_base_layer():
    f = fractal_noise(5, 12, octaves=1, base_frequency=2.0)
    base = gradient_noise(np.random.default_rng([5, 0]), 12, 2.0)
    expected = np.clip(0.5 * (base / (math.sqrt(3) / 2) + 1.0), 0, 1)
    np.testing.assert_allclose(f, expected, rtol=0, atol=1e-15)


def test_noise_argument_errors():
    with pytest.raises(ValueError):
        fractal_noise(0, 0)
    with pytest.raises(ValueError):
        fractal_noise(0, 8, octaves=0)
    with pytest.raises(ValueError):
        fractal_noise(0, 8, persistence=0.0)


def test_threshold_near_one_gives_empty_grid():
    noise = fractal_noise(9, 16)
    assert noise.max() < 1 - 1e-9
    g = generate_phantom(9, 16, occupancy_threshold=1 - 1e-9)
    assert not np.any(g.values)


def test_single_material_library():
    lib = MaterialLibrary((EMPTY, Material("iron", 1.757)))
    g = generate_phantom(2, 16, lib)
    occ = g.values[g.values > 0]
    assert occ.size > 0
    assert np.all(occ == 1 / 1.757)


@pytest.mark.parametrize("seed", [42, 0, 1, 7])
def test_components_are_homogeneous(seed):
    g = generate_phantom(seed, 16, occupancy_threshold=0.5)
    occupied = g.values > 0
    frac = occupied.mean()
    if seed == 42:
        assert 0.2 <= frac <= 0.8
    labels, n = flood_components(occupied)
    allowed = {m.density for m in DEFAULT_MATERIALS if not m.is_empty}
    for k in range(1, n + 1):
        vals = np.unique(g.values[labels == k])
        assert len(vals) == 1
        assert vals[0] in allowed


def test_phantom_regeneration_bit_identical():
    a = generate_phantom(11, 16)
    b = generate_phantom(11, 16)
    assert a.values.tobytes() == b.values.tobytes()


def test_bad_threshold():
    with pytest.raises(ValueError):
        generate_phantom(0, 8, occupancy_threshold=1.0)
