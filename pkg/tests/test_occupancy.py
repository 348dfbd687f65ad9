import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evoscene.errors import ConfigError, GeometryError, NoDataError
from evoscene.geometry import CameraIntrinsics, DepthMap, look_at
from evoscene.occupancy import (
    OccupancyGrid,
    VoxelState,
    carve_free_space,
    carve_free_space_bruteforce,
    decode_grid,
    decompose_patches,
    encode_grid,
    fit_bounds,
    patch_corners,
    read_grid,
    state_counts,
    voxelize,
    write_grid,
)
from evoscene.prior import ConfidencePointCloud
from evoscene.views import ViewEntry, ViewSet


def cloud_of(points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    return ConfidencePointCloud(points, np.zeros((n, 3)), np.ones(n), np.ones(n, dtype=int), np.full(n, "v"))


def small_grid(S=6, observed=()):
    grid = OccupancyGrid(np.array([-0.3, -0.3, -0.3]), 0.1, np.zeros((S, S, S), dtype=np.uint8))
    for idx in observed:
        grid.states[idx] = VoxelState.OBSERVED
    return grid


# =====================================
# REJILLA
# =====================================

def test_grid_must_be_cubic():
    with pytest.raises(GeometryError):
        OccupancyGrid(np.zeros(3), 0.1, np.zeros((2, 3, 2), dtype=np.uint8))
    with pytest.raises(GeometryError):
        OccupancyGrid(np.zeros(3), 0.0, np.zeros((2, 2, 2), dtype=np.uint8))


def test_fit_bounds_encloses_points():
    rng = np.random.default_rng(0)
    points = rng.uniform([-1.0, 0.0, 2.0], [1.0, 0.5, 3.0], size=(500, 3))

    origin, pitch = fit_bounds(cloud_of(points), 32, margin=0.05)

    side = pitch * 32
    assert side == pytest.approx(2.0 * 1.1, rel=0.05)
    assert np.all(np.percentile(points, 1, axis=0) >= origin)
    assert np.all(np.percentile(points, 99, axis=0) <= origin + side)


def test_fit_bounds_errors_and_degenerate_cloud():
    with pytest.raises(NoDataError):
        fit_bounds(cloud_of(np.zeros((0, 3))), 8)
    with pytest.raises(ConfigError):
        fit_bounds(cloud_of([[0.0, 0.0, 0.0]]), 1)

    origin, pitch = fit_bounds(cloud_of([[1.0, 2.0, 3.0]]), 4)
    assert pitch == pytest.approx(0.25)
    np.testing.assert_allclose(origin, [0.5, 1.5, 2.5])


def test_voxelize_marks_observed_and_ignores_outside():
    grid = voxelize(cloud_of([[0.05, 0.05, 0.05], [0.35, 0.05, 0.05], [5.0, 0.0, 0.0]]), np.zeros(3), 0.1, 4)

    assert grid.states[0, 0, 0] == VoxelState.OBSERVED
    assert grid.states[3, 0, 0] == VoxelState.OBSERVED
    assert grid.count(VoxelState.OBSERVED) == 2
    assert state_counts(grid) == {"unknown": 62, "free": 0, "observed": 2}


# =====================================
# TALLADO
# =====================================

def carve_scene(seed: int, S: int = 6):
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics.from_fov(8, 8, 50.0)
    eye = np.array([0.37, 0.23, 1.31]) + rng.uniform(-0.1, 0.1, 3)
    E = look_at(eye, np.array([0.01, -0.02, 0.03]))
    depth = DepthMap.from_array(rng.uniform(0.9, 1.6, size=(8, 8)))
    view = ViewEntry("v", np.zeros((8, 8, 3)), K, E)
    observed = [tuple(rng.integers(0, S, 3)) for _ in range(4)]
    return small_grid(S, observed), ViewSet([view]), {"v": depth}


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_dda_matches_bruteforce(seed):
    grid, views, depths = carve_scene(seed)

    fast = carve_free_space(grid, views, depths)
    slow = carve_free_space_bruteforce(grid, views, depths)

    np.testing.assert_array_equal(fast.states, slow.states)


def test_carving_never_degrades_observed_and_keeps_input():
    grid, views, depths = carve_scene(3)
    before = grid.states.copy()

    carved = carve_free_space(grid, views, depths)

    np.testing.assert_array_equal(grid.states, before)
    observed = before == VoxelState.OBSERVED
    assert np.all(carved.states[observed] == VoxelState.OBSERVED)
    assert np.all(carved.states[~observed] != VoxelState.OBSERVED)
    assert carved.count(VoxelState.FREE) > 0


def test_carving_leaves_space_behind_surface_unknown():
    K = CameraIntrinsics.from_fov(8, 8, 50.0)
    E = look_at(np.array([0.0, 0.0, 2.0]), np.zeros(3))
    view = ViewEntry("v", np.zeros((8, 8, 3)), K, E)
    grid = small_grid(6)
    # superficie a 1.6 m: el bloque [-0.3, 0.3] empieza a 1.7 m
    carved = carve_free_space(grid, ViewSet([view]), {"v": DepthMap.from_array(np.full((8, 8), 1.6))})

    assert carved.count(VoxelState.FREE) == 0


# =====================================
# PARCHES
# =====================================

def test_patch_corners_default_layout():
    assert patch_corners(128, 64, 48) == [0, 16, 32, 48, 64]
    assert patch_corners(32, 16, 8) == [0, 8, 16]
    assert patch_corners(11, 4, 1) == [0, 3, 6, 7]
    assert patch_corners(8, 8, 4) == [0]


def test_patch_corners_validation():
    with pytest.raises(ConfigError):
        patch_corners(8, 9, 0)
    with pytest.raises(ConfigError):
        patch_corners(8, 4, 4)


@given(st.integers(2, 12), st.data())
def test_patches_cover_every_voxel(S, data):
    P = data.draw(st.integers(1, S))
    overlap = data.draw(st.integers(0, P - 1))
    grid = OccupancyGrid(np.zeros(3), 0.1, np.zeros((S, S, S), dtype=np.uint8))

    patches = decompose_patches(grid, P, overlap, ViewSet())

    assert np.all(patches.coverage_counts() >= 1)
    assert len(patches) == len(patch_corners(S, P, overlap)) ** 3
    assert all(p.states.shape == (P, P, P) for p in patches)


def test_default_decomposition_has_125_patches():
    corners = patch_corners(128, 64, 48)
    assert len(corners) ** 3 == 125


def test_single_patch_gets_full_image_crops():
    K = CameraIntrinsics.from_fov(10, 8, 60.0)
    E = look_at(np.array([0.0, 0.0, 2.0]), np.zeros(3))
    view = ViewEntry("v", np.zeros((8, 10, 3)), K, E)
    grid = small_grid(4)

    patches = decompose_patches(grid, 4, 2, ViewSet([view]), {"v": DepthMap.from_array(np.ones((8, 10)))})

    assert len(patches) == 1
    crop = patches.patches[0].crops[0]
    assert crop.box == (0, 0, 9, 7)
    assert crop.image.shape == (8, 10, 3)
    assert crop.depth.shape == (8, 10)


def test_patch_crops_are_clipped_to_the_image():
    K = CameraIntrinsics.from_fov(16, 16, 60.0)
    E = look_at(np.array([0.2, 0.1, 1.5]), np.zeros(3))
    view = ViewEntry("v", np.zeros((16, 16, 3)), K, E)

    patches = decompose_patches(small_grid(6), 3, 0, ViewSet([view]))

    for patch in patches:
        for crop in patch.crops:
            x0, y0, x1, y1 = crop.box
            assert 0 <= x0 <= x1 <= 15 and 0 <= y0 <= y1 <= 15
            assert crop.image.shape == (y1 - y0 + 1, x1 - x0 + 1, 3)
            assert np.all(np.isnan(crop.depth))


# =====================================
# FORMATO EVOG
# =====================================

def test_grid_file_layout(tmp_path):
    grid = small_grid(3, observed=[(2, 0, 0)])
    blob = encode_grid(grid)

    assert blob[:4] == b"EVOG"
    # x más rápido: el vóxel (2, 0, 0) es el tercer byte del cuerpo
    body = blob[len(blob) - 27:]
    assert body[2] == VoxelState.OBSERVED

    write_grid(tmp_path / "g.evog", grid)
    back = read_grid(tmp_path / "g.evog")
    np.testing.assert_array_equal(back.states, grid.states)
    assert back.pitch == grid.pitch


def test_decode_grid_rejects_corruption():
    blob = encode_grid(small_grid(3))
    with pytest.raises(GeometryError):
        decode_grid(b"NOPE" + blob[4:])
    with pytest.raises(GeometryError):
        decode_grid(blob[:-1])
