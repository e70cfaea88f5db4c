import math

import numpy as np
import pytest

from mutomo.tracing import Ray, chord_through_box, ray_box_many, voxel_path


def test_axis_aligned_ray_gives_equal_segments():
    segs = voxel_path([-50, 10, 10], [50, 10, 10], 4, 100.0)
    assert [s.length for s in segs] == [25.0] * 4
    assert [s.voxel for s in segs] == [(0, 2, 2), (1, 2, 2), (2, 2, 2), (3, 2, 2)]


def test_main_diagonal_single_voxel():
    segs = voxel_path([-50, -50, -50], [50, 50, 50], 1, 100.0)
    assert len(segs) == 1
    assert segs[0].length == pytest.approx(100 * math.sqrt(3), rel=1e-15)


def test_zero_length_chord_is_empty():
    assert voxel_path([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 8) == []


def test_diagonal_through_many_voxels_visits_each_once():
    segs = voxel_path([-50, -50, -50], [50, 50, 50], 5, 100.0)
    assert [s.voxel for s in segs] == [(i, i, i) for i in range(5)]
    for s in segs:
        assert s.length == pytest.approx(20 * math.sqrt(3), rel=1e-12)


def random_chords(rng, n, half=50.0):
    out = []
    while len(out) < n:
        o = rng.uniform(-150, 150, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        c = chord_through_box(o, d, half)
        if c is not None and np.linalg.norm(c[1] - c[0]) > 1e-6:
            out.append(c)
    return out


@pytest.mark.parametrize("r", [1, 7, 16])
def test_segments_tile_random_chords(r):
    rng = np.random.default_rng(r)
    for a, b in random_chords(rng, 200):
        segs = voxel_path(a, b, r)
        total = sum(s.length for s in segs)
        assert total == pytest.approx(np.linalg.norm(b - a), rel=1e-9)
        voxels = [s.voxel for s in segs]
        assert len(set(voxels)) == len(voxels)
        assert all(s.length > 0 for s in segs)
        assert all(0 <= c < r for v in voxels for c in v)


def test_ray_unit_direction_enforced():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))


def test_ray_box_many_matches_scalar():
    rng = np.random.default_rng(0)
    o = rng.uniform(-120, 120, (200, 3))
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t0, t1, hit = ray_box_many(o, d, 50.0)
    for k in range(200):
        c = chord_through_box(o[k], d[k], 50.0)
        assert hit[k] == (c is not None)
        if c is not None:
            np.testing.assert_allclose(o[k] + t0[k] * d[k], c[0], atol=1e-9)
            np.testing.assert_allclose(o[k] + t1[k] * d[k], c[1], atol=1e-9)
