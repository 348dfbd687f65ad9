import struct

import numpy as np
import pytest

from evoscene import meshing
from evoscene.completion import SceneLatent
from evoscene.errors import GeometryError
from evoscene.geometry import CameraIntrinsics, look_at
from evoscene.meshing import (
    FILL_COLOR,
    TexturedMesh,
    bake_textures,
    encode_splats_ply,
    export_glb,
    export_obj,
    harmonic_fill,
    marching_cubes,
    read_glb,
    write_glb,
)
from evoscene.views import ViewEntry, ViewSet


def ball(S=16, radius=5.0):
    idx = np.indices((S, S, S)).transpose(1, 2, 3, 0)
    center = (S - 1) / 2.0
    return np.linalg.norm(idx - center, axis=-1) <= radius


@pytest.fixture
def sphere_mesh():
    # centro en el origen: -0.8 + (7.5 + 0.5) * 0.1 = 0
    return marching_cubes(ball(), origin=np.full(3, -0.8), pitch=0.1)


# =====================================
# MARCHING CUBES
# =====================================

def test_ball_gives_closed_genus_zero_surface():
    binary = ball()
    mesh = marching_cubes(binary)

    assert mesh.is_watertight()
    assert mesh.euler_characteristic() == 2
    volume = meshing._signed_volume(mesh.vertices, mesh.faces)
    assert 0.7 * binary.sum() < volume < 1.3 * binary.sum()
    mesh.validate()


def test_isolated_voxel_still_produces_a_closed_surface():
    binary = np.zeros((3, 3, 3), dtype=bool)
    binary[1, 1, 1] = True

    mesh = marching_cubes(binary)

    assert len(mesh.faces) > 0
    assert mesh.is_watertight()


def test_smoothing_keeps_occupied_and_free_voxels_apart_from_the_iso_level():
    binary = np.random.default_rng(4).random((6, 6, 6)) > 0.5

    field = meshing.smoothed_field(binary)

    assert field[binary].min() >= 0.5 + 1.0 / 54 - 1e-12
    assert field[~binary].max() <= 0.5 - 1.0 / 54 + 1e-12


def test_empty_field_gives_empty_mesh():
    mesh = marching_cubes(np.zeros((4, 4, 4), dtype=bool))
    assert len(mesh.vertices) == 0 and len(mesh.faces) == 0
    assert not mesh.is_watertight()


def test_mesh_sits_inside_the_grid_box(sphere_mesh):
    assert np.all(np.abs(sphere_mesh.vertices) <= 0.8)
    radii = np.linalg.norm(sphere_mesh.vertices, axis=1)
    assert radii.mean() == pytest.approx(0.5, abs=0.1)


def test_validate_reports_broken_meshes():
    with pytest.raises(GeometryError):
        TexturedMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]], normals=np.zeros((3, 3))).validate()
    with pytest.raises(GeometryError):
        TexturedMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], colors=np.full((3, 3), 2.0)).validate()
    with pytest.raises(GeometryError):
        TexturedMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]]).validate()


# =====================================
# COLORES
# =====================================

def test_bake_from_uniform_view_colors_every_vertex(sphere_mesh):
    K = CameraIntrinsics.from_fov(32, 32, 40.0)
    E = look_at(np.array([0.0, 0.0, 2.0]), np.zeros(3))
    red = np.zeros((32, 32, 3))
    red[..., 0] = 1.0
    views = ViewSet([ViewEntry("seed", red, K, E)])

    baked = bake_textures(sphere_mesh, views, pitch=0.1)

    np.testing.assert_allclose(baked.colors, np.tile([1.0, 0.0, 0.0], (len(baked.vertices), 1)), atol=1e-9)
    np.testing.assert_array_equal(baked.faces, sphere_mesh.faces)


def test_harmonic_fill_leaves_unanchored_components_gray():
    mesh = TexturedMesh(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5], [6, 5, 5], [5, 6, 5]],
        [[0, 1, 2], [3, 4, 5]],
    )
    colors = np.full((6, 3), FILL_COLOR)
    colors[0] = [1.0, 1.0, 1.0]
    colors[1] = [0.0, 0.0, 0.0]
    known = np.array([True, True, False, False, False, False])

    out = harmonic_fill(mesh, colors, known)

    np.testing.assert_allclose(out[2], [0.5, 0.5, 0.5])
    np.testing.assert_allclose(out[3:], FILL_COLOR)


# =====================================
# EXPORTACIÓN
# =====================================

def test_glb_container_layout(sphere_mesh, tmp_path):
    blob = export_glb(sphere_mesh)

    magic, version, length = struct.unpack_from("<4sII", blob, 0)
    assert (magic, version, length) == (b"glTF", 2, len(blob))
    json_len, json_type = struct.unpack_from("<I4s", blob, 12)
    assert json_type == b"JSON" and json_len % 4 == 0
    bin_len, bin_type = struct.unpack_from("<I4s", blob, 20 + json_len)
    assert bin_type == b"BIN\x00" and bin_len % 4 == 0

    write_glb(tmp_path / "mesh.glb", sphere_mesh)
    back = read_glb((tmp_path / "mesh.glb").read_bytes())
    np.testing.assert_allclose(back.vertices, sphere_mesh.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.faces, sphere_mesh.faces)


def test_empty_mesh_exports_a_valid_glb():
    blob = export_glb(TexturedMesh.empty())

    assert blob[:4] == b"glTF"
    assert len(read_glb(blob).faces) == 0
    with pytest.raises(GeometryError):
        read_glb(blob[:-4])


def test_obj_export_is_one_based():
    mesh = TexturedMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])

    text = export_obj(mesh)

    assert text.splitlines()[-1] == "f 1 2 3"
    assert sum(line.startswith("v ") for line in text.splitlines()) == 3


def test_splat_ply_header_and_body():
    latent = SceneLatent([[0, 0, 0], [1, 1, 1]], [[1, 0, 0], [0, 1, 0]], [1.0, 0.5], [0.1, 0.1], np.zeros(3), 0.1, 2)

    blob = encode_splats_ply(latent)

    header, body = blob.split(b"end_header\n", 1)
    assert b"element vertex 2" in header
    assert b"property float opacity" in header
    assert len(body) == 2 * meshing.SPLAT_DTYPE.itemsize
