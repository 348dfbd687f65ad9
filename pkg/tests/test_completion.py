import numpy as np
import pytest

from evoscene import completion
from evoscene.backends.base import CompletionRequest, CompletionResponse, SceneCompleter
from evoscene.backends.oracle import OracleCompleter
from evoscene.completion import (
    GRAY,
    PatchLatent,
    SceneLatent,
    blend_patch_latents,
    complete_structure,
    hat_window,
    load_latent,
    loss_and_gradient,
    oracle_complete,
    save_latent,
    transfer_colors,
)
from evoscene.errors import BackendError, ConfigError, ContractError, GeometryError, NoDataError, OptimizationError
from evoscene.occupancy import OccupancyGrid, VoxelState, decompose_patches
from evoscene.rendering import render
from evoscene.views import ViewEntry, ViewSet


def grid_with(S, observed=(), free=()):
    grid = OccupancyGrid(np.zeros(3), 0.1, np.zeros((S, S, S), dtype=np.uint8))
    for idx in observed:
        grid.states[idx] = VoxelState.OBSERVED
    for idx in free:
        grid.states[idx] = VoxelState.FREE
    return grid


def request_for(states, prior_colors=None):
    return CompletionRequest(
        patch_index=0, corner=(0, 0, 0), states=states, crops=[],
        origin=np.zeros(3), pitch=0.1, prior_colors=prior_colors,
    )


class EmptyingCompleter(SceneCompleter):
    """Vacía todo en el parche `victim`; en los demás devuelve el conjunto observado."""

    def __init__(self, victim):
        self.victim = victim

    def complete(self, request):
        occ = (request.states == VoxelState.OBSERVED).astype(np.uint8)
        if request.patch_index == self.victim:
            occ[:] = 0
        return CompletionResponse(occupancy=occ)


class FullCompleter(SceneCompleter):
    def complete(self, request):
        return CompletionResponse(occupancy=np.ones(request.states.shape, dtype=np.uint8))


class ParityCompleter(SceneCompleter):
    """Los parches pares ocupan todo; los impares sólo lo observado."""

    def complete(self, request):
        if request.patch_index % 2 == 0:
            return CompletionResponse(occupancy=np.ones(request.states.shape, dtype=np.uint8))
        return CompletionResponse(occupancy=(request.states == VoxelState.OBSERVED).astype(np.uint8))


class ShapeCompleter(SceneCompleter):
    def complete(self, request):
        return CompletionResponse(occupancy=np.ones((1, 1, 1), dtype=np.uint8))


class CrashingCompleter(SceneCompleter):
    def complete(self, request):
        raise RuntimeError("gpu en llamas")


# =====================================
# COMPLETADO DE ESTRUCTURA
# =====================================

def test_backend_that_empties_observed_voxels_is_rejected():
    grid = grid_with(4, observed=[(0, 0, 2)])
    patches = decompose_patches(grid, 2, 0, ViewSet())
    victim = next(p.index for p in patches if p.corner == (0, 0, 2))

    with pytest.raises(ContractError) as info:
        complete_structure(grid, patches, EmptyingCompleter(victim))

    assert info.value.patch_index == victim
    assert info.value.field == "occupancy"
    assert info.value.exit_code == 3


def test_backend_response_with_wrong_shape_is_rejected():
    grid = grid_with(4)
    patches = decompose_patches(grid, 4, 0, ViewSet())

    with pytest.raises(ContractError) as info:
        complete_structure(grid, patches, ShapeCompleter())
    assert info.value.patch_index == 0


def test_unexpected_backend_failure_becomes_backend_error():
    grid = grid_with(4)
    patches = decompose_patches(grid, 2, 0, ViewSet())

    with pytest.raises(BackendError, match="gpu en llamas"):
        complete_structure(grid, patches, CrashingCompleter())


def test_free_voxels_never_occupied_and_observed_always_occupied():
    grid = grid_with(4, observed=[(1, 1, 1), (3, 3, 3)], free=[(0, 0, 0), (2, 1, 1)])
    patches = decompose_patches(grid, 2, 0, ViewSet())

    completed, results = complete_structure(grid, patches, FullCompleter(), workers=3)

    occ = completed.occupied
    assert not occ[0, 0, 0] and not occ[2, 1, 1]
    assert occ[1, 1, 1] and occ[3, 3, 3]
    assert occ.sum() == 64 - 2
    assert [r.index for r in results] == list(range(len(patches)))
    np.testing.assert_array_equal(completed.states, grid.states)


def test_majority_vote_ties_resolve_to_occupied():
    # S=3, P=2, solape 1: el vóxel central está en los 8 parches, 4 votan sí
    grid = grid_with(3)
    patches = decompose_patches(grid, 2, 1, ViewSet())
    assert len(patches) == 8

    completed, _ = complete_structure(grid, patches, ParityCompleter())

    assert completed.occupied[1, 1, 1]
    # la esquina (2, 2, 2) sólo la contiene el parche 7 (impar)
    assert not completed.occupied[2, 2, 2]


# =====================================
# COMPLETADOR ORÁCULO
# =====================================

def test_oracle_closing_fills_gap_between_observed_planes():
    states = np.zeros((8, 8, 8), dtype=np.uint8)
    states[2] = VoxelState.OBSERVED
    states[4] = VoxelState.OBSERVED

    response = oracle_complete(request_for(states), radius=1)

    filled = np.flatnonzero(response.occupancy.any(axis=(1, 2)))
    assert filled.tolist() == [2, 3, 4]
    assert response.occupancy[2:5].all()
    np.testing.assert_allclose(response.colors, GRAY)
    np.testing.assert_allclose(response.scale, 0.1)


def test_oracle_closing_never_fills_free_space():
    states = np.zeros((8, 8, 8), dtype=np.uint8)
    states[2] = VoxelState.OBSERVED
    states[3] = VoxelState.FREE
    states[4] = VoxelState.OBSERVED

    response = oracle_complete(request_for(states), radius=1)

    assert not response.occupancy[3].any()
    assert response.occupancy[2].all() and response.occupancy[4].all()


def test_oracle_uses_prior_colors_when_available():
    states = np.zeros((4, 4, 4), dtype=np.uint8)
    states[2, 0, 0] = VoxelState.OBSERVED
    prior = np.full((4, 4, 4, 3), np.nan)
    prior[2, 0, 0] = [1.0, 0.0, 0.0]

    response = oracle_complete(request_for(states, prior), radius=0)

    np.testing.assert_allclose(response.colors[2, 0, 0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(response.colors[0, 0, 0], GRAY)
    assert response.occupancy.sum() == 1


def test_oracle_completer_matches_local_function():
    states = np.zeros((6, 6, 6), dtype=np.uint8)
    states[1:5, 2, 2] = VoxelState.OBSERVED
    request = request_for(states)

    np.testing.assert_array_equal(
        OracleCompleter(radius=2).complete(request).occupancy,
        oracle_complete(request, radius=2).occupancy,
    )


# =====================================
# FUSIÓN Y TRANSFERENCIA
# =====================================

def patch_latent(index, corner, size, occupied, color):
    occ = np.full((size,) * 3, occupied, dtype=bool)
    return PatchLatent(
        index, corner, occ, np.broadcast_to(np.asarray(color, dtype=float), (size,) * 3 + (3,)).copy(),
        np.ones((size,) * 3), np.full((size,) * 3, 0.1), np.ones((size,) * 3, dtype=bool),
    )


def test_hat_window_is_positive_and_peaks_in_the_middle():
    w = hat_window(5)
    assert np.all(w > 0)
    assert w[2, 2, 2] == w.max()
    assert w[0, 0, 0] == w.min()


def test_blend_only_averages_patches_that_claim_the_voxel():
    grid = grid_with(2, observed=[(0, 0, 0)])
    grid.occupied = np.zeros((2, 2, 2), dtype=bool)
    grid.occupied[0, 0, 0] = True
    red = patch_latent(0, (0, 0, 0), 2, True, [1.0, 0.0, 0.0])
    blue = patch_latent(1, (0, 0, 0), 2, False, [0.0, 0.0, 1.0])

    latent = blend_patch_latents([red, blue], grid)

    assert len(latent) == 1
    np.testing.assert_allclose(latent.colors[0], [1.0, 0.0, 0.0])
    assert latent.textured[0]


def test_blend_averages_overlapping_claims():
    grid = grid_with(2)
    grid.occupied = np.ones((2, 2, 2), dtype=bool)
    red = patch_latent(0, (0, 0, 0), 2, True, [1.0, 0.0, 0.0])
    blue = patch_latent(1, (0, 0, 0), 2, True, [0.0, 0.0, 1.0])

    latent = blend_patch_latents([red, blue], grid)

    np.testing.assert_allclose(latent.colors, np.tile([0.5, 0.0, 0.5], (8, 1)))


def test_transfer_colors_within_one_pitch():
    # centro anterior (0.2, 0.2, 0.2); actuales (0.15, 0.15, 0.25) y (0.35, 0.35, 0.35)
    previous = SceneLatent([[1, 1, 1]], [[0.9, 0.1, 0.1]], [1.0], [0.1], np.full(3, 0.05), 0.1, 4)
    current = SceneLatent(
        [[1, 1, 2], [3, 3, 3]], np.full((2, 3), GRAY), [1.0, 1.0], [0.1, 0.1], np.zeros(3), 0.1, 4,
        textured=[False, False],
    )

    out = transfer_colors(current, previous)

    np.testing.assert_allclose(out.colors[0], [0.9, 0.1, 0.1])
    np.testing.assert_allclose(out.colors[1], GRAY)
    assert out.textured.tolist() == [True, False]
    assert current.textured.tolist() == [False, False]
    assert transfer_colors(current, None) is current


def test_transfer_keeps_textured_voxels():
    previous = SceneLatent([[1, 1, 1]], [[0.9, 0.1, 0.1]], [1.0], [0.1], np.zeros(3), 0.1, 4)
    current = SceneLatent([[1, 1, 1]], [[0.2, 0.2, 0.2]], [1.0], [0.1], np.zeros(3), 0.1, 4)

    np.testing.assert_allclose(transfer_colors(current, previous).colors, [[0.2, 0.2, 0.2]])


# =====================================
# LATENTE
# =====================================

def test_scene_latent_validation():
    with pytest.raises(GeometryError):
        SceneLatent([[0, 0, 0]], [[1.5, 0, 0]], [1.0], [0.1], np.zeros(3), 0.1, 2)
    with pytest.raises(GeometryError):
        SceneLatent([[0, 0, 0]], [[0.5, 0, 0]], [0.0], [0.1], np.zeros(3), 0.1, 2)
    with pytest.raises(GeometryError):
        SceneLatent([[0, 0, 2]], [[0.5, 0, 0]], [1.0], [0.1], np.zeros(3), 0.1, 2)


def test_latent_must_sit_on_occupied_voxels(tmp_path):
    grid = grid_with(3, observed=[(1, 1, 1)])
    latent = SceneLatent.from_grid(grid)
    latent.check_against(grid)

    stray = SceneLatent([[0, 0, 0]], [[0.5, 0.5, 0.5]], [1.0], [0.1], np.zeros(3), 0.1, 3)
    with pytest.raises(GeometryError):
        stray.check_against(grid)

    save_latent(tmp_path / "latent.npz", latent)
    back = load_latent(tmp_path / "latent.npz")
    np.testing.assert_array_equal(back.indices, latent.indices)
    assert back.textured.tolist() == [False]


# =====================================
# OPTIMIZACIÓN EN TIEMPO DE PRUEBA
# =====================================

def cube_latent(seed=7):
    rng = np.random.default_rng(seed)
    idx = np.argwhere(np.ones((2, 2, 2), dtype=bool)) + 1
    return SceneLatent(
        idx, rng.uniform(0.1, 0.9, (8, 3)), rng.uniform(0.2, 0.8, 8), np.full(8, 0.1),
        np.full(3, -0.2), 0.1, 4,
    )


def total_loss(latent, views, weights):
    targets = completion._prepare_targets(latent, views, None)
    completion._rasterize_all(latent, targets)
    return completion._evaluate(latent, targets, weights, None, 0)[0]


def analytic(latent, views, weights):
    targets = completion._prepare_targets(latent, views, None)
    completion._rasterize_all(latent, targets)
    _, gc, go = loss_and_gradient(latent, targets, weights, with_opacity=True)
    return gc, go


def test_ssim_gradient_matches_finite_differences(small_camera):
    K, E = small_camera
    latent = cube_latent()
    target = np.random.default_rng(1).random((16, 16, 3))
    views = ViewSet([ViewEntry("v", target, K, E)])
    weights = (0.0, 0.0, 1.0)
    eps = 1e-6

    gc, go = analytic(latent, views, weights)

    numeric_c = np.zeros_like(latent.colors)
    for i in range(8):
        for c in range(3):
            up, down = latent.colors.copy(), latent.colors.copy()
            up[i, c] += eps
            down[i, c] -= eps
            numeric_c[i, c] = (
                total_loss(latent.with_attributes(colors=up), views, weights)
                - total_loss(latent.with_attributes(colors=down), views, weights)
            ) / (2 * eps)
    numeric_o = np.zeros(8)
    for i in range(8):
        up, down = latent.opacity.copy(), latent.opacity.copy()
        up[i] += eps
        down[i] -= eps
        numeric_o[i] = (
            total_loss(latent.with_attributes(opacity=up), views, weights)
            - total_loss(latent.with_attributes(opacity=down), views, weights)
        ) / (2 * eps)

    np.testing.assert_allclose(gc, numeric_c, rtol=1e-3, atol=1e-8)
    np.testing.assert_allclose(go, numeric_o, rtol=1e-3, atol=1e-8)


def test_l1_gradient_matches_finite_differences(small_camera):
    K, E = small_camera
    latent = cube_latent().with_attributes(colors=np.full((8, 3), 0.3))
    views = ViewSet([ViewEntry("v", np.ones((16, 16, 3)), K, E)])
    weights = (1.0, 0.0, 0.0)
    eps = 1e-6

    gc, _ = analytic(latent, views, weights)

    for i in range(8):
        up, down = latent.colors.copy(), latent.colors.copy()
        up[i, 0] += eps
        down[i, 0] -= eps
        numeric = (
            total_loss(latent.with_attributes(colors=up), views, weights)
            - total_loss(latent.with_attributes(colors=down), views, weights)
        ) / (2 * eps)
        assert gc[i, 0] == pytest.approx(numeric, rel=1e-4, abs=1e-10)


def test_optimization_lowers_the_photometric_loss(small_camera):
    K, E = small_camera
    truth = cube_latent(seed=3).with_attributes(opacity=np.ones(8))
    image = render(truth, K, E).rgb
    start = truth.with_attributes(colors=np.full((8, 3), GRAY))
    views = ViewSet([ViewEntry("v", image, K, E)])

    result = completion.test_time_optimize(start, views, steps=6, lr=1.0)

    losses = result.losses
    assert len(losses) == 7
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
    np.testing.assert_array_equal(start.colors, np.full((8, 3), GRAY))


def test_optimization_with_opacity_keeps_it_in_range(small_camera):
    K, E = small_camera
    image = np.random.default_rng(5).random((16, 16, 3))
    views = ViewSet([ViewEntry("v", image, K, E)])

    result = completion.test_time_optimize(cube_latent(), views, steps=3, optimize_opacity=True)

    assert all(b <= a for a, b in zip(result.losses, result.losses[1:]))
    assert np.all((result.latent.opacity > 0) & (result.latent.opacity <= 1))


def test_optimization_requires_views_and_perceptual_backend(small_camera):
    latent = cube_latent()
    with pytest.raises(NoDataError):
        completion.test_time_optimize(latent, ViewSet())

    view = ViewEntry("v", np.zeros((16, 16, 3)), *small_camera)
    with pytest.raises(ConfigError):
        completion.test_time_optimize(latent, ViewSet([view]), weights=(1.0, 0.5, 1.0))


def test_non_finite_perceptual_loss_aborts(small_camera):
    K, E = small_camera
    views = ViewSet([ViewEntry("v", np.zeros((16, 16, 3)), K, E)])

    def broken(frame, target):
        return float("nan"), np.zeros_like(frame)

    with pytest.raises(OptimizationError) as info:
        completion.test_time_optimize(cube_latent(), views, weights=(1.0, 0.5, 1.0), perceptual=broken)

    assert info.value.step == 0
    assert info.value.view_id == "v"
