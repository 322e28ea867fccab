import numpy as np
import pytest

from distgs.errors import EmptyCloud, InvalidConfig, IsovalueOutOfRange, UnknownKind
from distgs.isosurface import (PointCloud, Volume, constant_color, extract_isosurface, make_volume,
                               seed_gaussians)


def test_sphere_sign_at_center_and_corner():
    vol = make_volume("sphere", (17, 17, 17))
    assert vol.values[8, 8, 8] < 0.6 < vol.values[0, 0, 0]


def test_volume_determinism():
    a = make_volume("gyroid", (12, 12, 12), 0.05, seed=3)
    b = make_volume("gyroid", (12, 12, 12), 0.05, seed=3)
    c = make_volume("gyroid", (12, 12, 12), 0.05, seed=4)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_gyroid_point_count():
    pc = extract_isosurface(make_volume("gyroid", (32, 32, 32)), 0.0)
    assert len(pc) > 1000
    assert len(pc) == 9792  # recorded regression value


@pytest.mark.parametrize("dims,count", [(16, 456), (24, 984), (32, 1704)])
def test_sphere_points_on_radius(dims, count):
    vol = make_volume("sphere", (dims,) * 3)
    pc = extract_isosurface(vol, 0.6)
    r = np.linalg.norm(pc.positions, axis=1)
    assert np.all(np.abs(r - 0.6) <= 1.5 * vol.spacing)
    assert len(pc) == count
    np.testing.assert_allclose(np.linalg.norm(pc.normals, axis=1), 1.0)
    # normals point outwards (towards larger distance)
    assert np.all(np.sum(pc.normals * pc.positions, axis=1) > 0)


def test_isovalue_out_of_range():
    vol = make_volume("sphere", (8, 8, 8))
    with pytest.raises(IsovalueOutOfRange):
        extract_isosurface(vol, vol.values.max() + 1)
    with pytest.raises(IsovalueOutOfRange):
        extract_isosurface(vol, vol.values.min())


def test_no_sign_change_no_points():
    vals = np.ones((8, 8, 8))
    vals[0, 0, 0] = -1.0  # one crossing corner only
    pc = extract_isosurface(Volume((8, 8, 8), 1.0, (0, 0, 0), vals), 0.0)
    assert len(pc) == 3
    assert np.all(pc.positions <= 1.0)


def test_translation_invariance():
    vol = make_volume("sphere", (16, 16, 16))
    k = 3
    padded = np.full((16 + k, 16 + k, 16 + k), 10.0)
    padded[k:, k:, k:] = vol.values
    moved = Volume(padded.shape, vol.spacing, tuple(np.asarray(vol.origin) - k * vol.spacing), padded)
    a = extract_isosurface(vol, 0.6).positions
    b = extract_isosurface(moved, 0.6).positions
    assert a.shape == b.shape
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_unknown_kind_and_small_dims():
    with pytest.raises(UnknownKind):
        make_volume("torus")
    with pytest.raises(InvalidConfig):
        make_volume("sphere", (4, 4, 4))


def test_two_blob_is_connected_across_the_middle():
    pc = extract_isosurface(make_volume("two-blob", (32, 32, 32)), 0.5)
    assert len(pc) == 1120
    assert np.sum(np.abs(pc.positions[:, 0]) < 0.1) > 0
    assert (pc.positions[:, 0] < 0).sum() == (pc.positions[:, 0] > 0).sum()


def test_transfer_function():
    pc = extract_isosurface(make_volume("sphere", (12, 12, 12)), 0.6, constant_color((0.1, 0.2, 0.3)))
    assert np.all(pc.colors == [0.1, 0.2, 0.3])


def test_seed_single_point_fixed():
    pc = PointCloud(np.zeros((1, 3)), np.full((1, 3), 0.5), np.array([[0, 0, 1.0]]))
    m = seed_gaussians(pc, "fixed")
    assert len(m) == 1
    assert np.array_equal(m.rot[0], [1, 0, 0, 0])
    assert m.opacity[0] == pytest.approx(0.1)


def test_seed_grid_knn_equal_scales():
    g = np.stack(np.meshgrid(*[np.arange(5) * 0.1] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    m = seed_gaussians(PointCloud(g, np.zeros_like(g), np.zeros_like(g)), "knn", k=3)
    assert np.ptp(m.log_scale) < 1e-9
    assert np.exp(m.log_scale[0, 0]) == pytest.approx(0.1)


def test_seed_bijection_and_aabb():
    pc = extract_isosurface(make_volume("two-blob", (16, 16, 16)), 0.5)
    m = seed_gaussians(pc)
    assert len(m) == len(pc)
    lo, hi = m.aabb()
    assert np.array_equal(lo, pc.aabb()[0]) and np.array_equal(hi, pc.aabb()[1])


def test_seed_empty_cloud():
    with pytest.raises(EmptyCloud):
        seed_gaussians(PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3))))
