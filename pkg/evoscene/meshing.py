"""
Extracción de malla: Marching Cubes sobre la ocupación completada, horneado de
colores por vértice desde las vistas acumuladas y exportación GLB / OBJ / PLY de splats.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
from scipy import sparse
from scipy.ndimage import uniform_filter
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve
from skimage import measure

from evoscene.completion import SceneLatent
from evoscene.errors import GeometryError
from evoscene.frames import sample_bilinear, to_uint8
from evoscene.geometry import DepthMap, project_points
from evoscene.occupancy import OccupancyGrid
from evoscene.rendering import render_depth
from evoscene.views import ViewSet

logger = logging.getLogger(__name__)

ISO_LEVEL = 0.5
MIN_TRIANGLE_AREA = 1e-12
SEED_VIEW_WEIGHT = 0.7
SYNTHESIZED_VIEW_WEIGHT = 1.0
FILL_COLOR = 0.5

GLB_MAGIC = b"glTF"
GLB_VERSION = 2
_CHUNK_JSON = b"JSON"
_CHUNK_BIN = b"BIN\x00"
_FLOAT = 5126
_UINT32 = 5125
_ARRAY_BUFFER = 34962
_ELEMENT_ARRAY_BUFFER = 34963

SPLAT_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
        ("opacity", "<f4"),
        ("scale", "<f4"),
    ]
)


# =====================================
# MALLA
# =====================================

@dataclass(eq=False)
class TexturedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.full((len(self.vertices), 3), FILL_COLOR)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.faces)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "TexturedMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def triangle_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def validate(self) -> None:
        """Invariantes: índices en rango, valores finitos, colores en [0,1], sin triángulos de área nula."""
        problems = []
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            problems.append("índices de triángulo fuera de rango")
        if not np.all(np.isfinite(self.vertices)):
            problems.append("vértices no finitos")
        if self.colors.shape != self.vertices.shape:
            problems.append("colores por vértice con forma distinta a los vértices")
        elif np.any(self.colors < 0) or np.any(self.colors > 1):
            problems.append("colores fuera de [0, 1]")
        if not problems and len(self.faces):
            degenerate = int(np.count_nonzero(self.triangle_areas() <= MIN_TRIANGLE_AREA))
            if degenerate:
                problems.append(f"{degenerate} triángulos de área nula")
        if problems:
            raise GeometryError("malla inválida: " + "; ".join(problems))

    def edges(self) -> np.ndarray:
        """Aristas no dirigidas (con repetición), ordenadas por extremo."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.sort(e, axis=1)

    def edge_face_counts(self) -> np.ndarray:
        if len(self.faces) == 0:
            return np.zeros(0, dtype=np.int64)
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        counts = self.edge_face_counts()
        return bool(len(counts)) and bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        n_edges = len(np.unique(self.edges(), axis=0)) if len(self.faces) else 0
        return len(self.vertices) - n_edges + len(self.faces)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Normales por vértice: suma de normales de cara ponderadas por área."""
    normals = np.zeros((len(vertices), 3))
    if len(faces) == 0:
        return normals
    tri = vertices[faces]
    face_n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    for k in range(3):
        np.add.at(normals, faces[:, k], face_n)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 0)


def _signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    tri = vertices[faces]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


# =====================================
# MARCHING CUBES
# =====================================

def smoothed_field(binary: np.ndarray) -> np.ndarray:
    """0.5·b + 0.5·caja3(b): nunca toca exactamente el nivel 0.5 y un vóxel aislado sigue por encima."""
    b = np.asarray(binary, dtype=np.float64)
    return 0.5 * b + 0.5 * uniform_filter(b, size=3, mode="constant", cval=0.0)


def marching_cubes(
    source: Union[OccupancyGrid, np.ndarray],
    origin: Optional[np.ndarray] = None,
    pitch: float = 1.0,
) -> TexturedMesh:
    """
    Malla sin textura de la ocupación binaria (completada si existe).

    Marching Cubes (variante de Lewiner de scikit-image, desambiguación topológica)
    a nivel 0.5 sobre el campo suavizado, con un borde de ceros para cerrar la
    superficie. Caras orientadas con normales hacia fuera. Campo vacío → malla vacía.
    """
    if isinstance(source, OccupancyGrid):
        binary = source.occupancy
        origin, pitch = source.origin, source.pitch
    else:
        binary = np.asarray(source, dtype=bool)
        origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    if not binary.any():
        return TexturedMesh.empty()

    field_values = np.pad(smoothed_field(binary), 1, mode="constant", constant_values=0.0)
    verts, faces, _, _ = measure.marching_cubes(
        field_values, level=ISO_LEVEL, method="lewiner", allow_degenerate=False
    )
    verts = verts.astype(np.float64)
    verts, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[faces].astype(np.int64)
    vertices = origin + (verts - 1.0 + 0.5) * pitch
    if _signed_volume(vertices, faces) < 0:
        faces = faces[:, [0, 2, 1]]
    mesh = TexturedMesh(vertices, faces)
    logger.info("marching cubes", extra={"vertices": len(vertices), "faces": len(faces)})
    return mesh


# =====================================
# HORNEADO DE TEXTURAS
# =====================================

def view_recency_weight(iteration_of_origin: int) -> float:
    return SEED_VIEW_WEIGHT if iteration_of_origin == 0 else SYNTHESIZED_VIEW_WEIGHT


def bake_textures(
    mesh: TexturedMesh,
    views: ViewSet,
    pitch: float,
    depths: Optional[Mapping[str, DepthMap]] = None,
) -> TexturedMesh:
    """
    Color por vértice desde todas las vistas donde el vértice es visible
    (|z proyectada - profundidad renderizada de la malla| <= 2·pitch), ponderado
    por cos(ángulo de vista con la normal) y por el peso de recencia de la vista.
    Los vértices no vistos se rellenan con la solución armónica de sus vecinos.
    """
    if len(mesh.vertices) == 0:
        return mesh
    tolerance = 2.0 * pitch
    num = np.zeros((len(mesh.vertices), 3))
    den = np.zeros(len(mesh.vertices))
    for view in views:
        depth = depths.get(view.view_id) if depths is not None else None
        if depth is None:
            depth = render_depth(mesh, view.K, view.E)
        pixels, z = project_points(mesh.vertices, view.K, view.E)
        stored = depth.sample(pixels[:, 0], pixels[:, 1])
        with np.errstate(invalid="ignore"):
            visible = (z > 0) & (np.abs(z - stored) <= tolerance)
        if not visible.any():
            continue
        to_camera = view.E.center - mesh.vertices[visible]
        to_camera /= np.linalg.norm(to_camera, axis=1, keepdims=True)
        cosine = np.clip(np.einsum("ij,ij->i", to_camera, mesh.normals[visible]), 0.0, None)
        weight = cosine * view_recency_weight(view.iteration_of_origin)
        rows = np.flatnonzero(visible)
        num[rows] += weight[:, None] * sample_bilinear(view.image, pixels[rows, 0], pixels[rows, 1])
        den[rows] += weight

    known = den > 0
    colors = np.full((len(mesh.vertices), 3), FILL_COLOR)
    colors[known] = num[known] / den[known, None]
    colors = harmonic_fill(mesh, colors, known)
    logger.info(
        "horneado de colores",
        extra={"views": len(views), "vertices": len(mesh.vertices), "unseen": int((~known).sum())},
    )
    return TexturedMesh(mesh.vertices, mesh.faces, np.clip(colors, 0.0, 1.0), mesh.normals)


def adjacency(mesh: TexturedMesh) -> sparse.csr_matrix:
    n = len(mesh.vertices)
    e = mesh.edges()
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    a = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0
    return a


def harmonic_fill(mesh: TexturedMesh, colors: np.ndarray, known: np.ndarray) -> np.ndarray:
    """
    Límite del promediado iterativo de vecinos: cada vértice desconocido toma la
    media de sus vecinos (Laplaciano con los conocidos fijos). Componentes sin
    ningún vértice conocido quedan en gris.
    """
    unknown = np.flatnonzero(~known)
    if len(unknown) == 0 or len(mesh.faces) == 0:
        return colors
    out = colors.copy()
    a = adjacency(mesh)
    _, labels = connected_components(a, directed=False)
    anchored = np.zeros(labels.max() + 1, dtype=bool)
    anchored[labels[known]] = True
    solvable = unknown[anchored[labels[unknown]]]
    if len(solvable) == 0:
        return out
    known_idx = np.flatnonzero(known)
    degree = np.asarray(a.sum(axis=1)).ravel()
    a_uu = a[solvable][:, solvable]
    a_uk = a[solvable][:, known_idx]
    laplacian = sparse.diags(degree[solvable]) - a_uu
    rhs = a_uk @ colors[known_idx]
    solved = spsolve(laplacian.tocsc(), rhs)
    out[solvable] = np.asarray(solved).reshape(len(solvable), 3)
    return out


# =====================================
# EXPORTACIÓN
# =====================================

def _pad(blob: bytes, fill: bytes) -> bytes:
    return blob + fill * ((-len(blob)) % 4)


def export_glb(mesh: TexturedMesh) -> bytes:
    """
    glTF 2.0 binario: cabecera de 12 bytes, chunk JSON (relleno con espacios) y
    chunk BIN (relleno con ceros), ambos múltiplos de 4. Una primitiva con
    POSITION / NORMAL / COLOR_0 (float32 VEC3) e índices uint32.
    """
    mesh.validate()
    doc: Dict[str, Any] = {"asset": {"version": "2.0", "generator": "evoscene"}, "scene": 0}
    binary = b""
    if len(mesh.faces) == 0:
        doc["scenes"] = [{"nodes": []}]
    else:
        positions = mesh.vertices.astype("<f4")
        normals = mesh.normals.astype("<f4")
        colors = mesh.colors.astype("<f4")
        indices = mesh.faces.astype("<u4").ravel()
        blocks = [positions.tobytes(), normals.tobytes(), colors.tobytes(), indices.tobytes()]
        views, offset = [], 0
        for k, block in enumerate(blocks):
            target = _ELEMENT_ARRAY_BUFFER if k == 3 else _ARRAY_BUFFER
            views.append({"buffer": 0, "byteOffset": offset, "byteLength": len(block), "target": target})
            offset += len(block)
        binary = b"".join(blocks)
        n = len(mesh.vertices)
        doc.update(
            {
                "scenes": [{"nodes": [0]}],
                "nodes": [{"mesh": 0}],
                "meshes": [
                    {
                        "primitives": [
                            {
                                "attributes": {"POSITION": 0, "NORMAL": 1, "COLOR_0": 2},
                                "indices": 3,
                                "mode": 4,
                            }
                        ]
                    }
                ],
                "buffers": [{"byteLength": len(binary)}],
                "bufferViews": views,
                "accessors": [
                    {
                        "bufferView": 0, "componentType": _FLOAT, "count": n, "type": "VEC3",
                        "min": positions.min(axis=0).astype(float).tolist(),
                        "max": positions.max(axis=0).astype(float).tolist(),
                    },
                    {"bufferView": 1, "componentType": _FLOAT, "count": n, "type": "VEC3"},
                    {"bufferView": 2, "componentType": _FLOAT, "count": n, "type": "VEC3"},
                    {"bufferView": 3, "componentType": _UINT32, "count": len(indices), "type": "SCALAR"},
                ],
            }
        )
    json_chunk = _pad(json.dumps(doc, separators=(",", ":")).encode("utf-8"), b" ")
    chunks = struct.pack("<I4s", len(json_chunk), _CHUNK_JSON) + json_chunk
    if binary:
        bin_chunk = _pad(binary, b"\x00")
        chunks += struct.pack("<I4s", len(bin_chunk), _CHUNK_BIN) + bin_chunk
    header = struct.pack("<4sII", GLB_MAGIC, GLB_VERSION, 12 + len(chunks))
    return header + chunks


def read_glb(blob: bytes) -> TexturedMesh:
    """Lector mínimo para los GLB que escribe `export_glb`."""
    if len(blob) < 20:
        raise GeometryError("GLB truncado")
    magic, version, length = struct.unpack_from("<4sII", blob, 0)
    if magic != GLB_MAGIC or version != GLB_VERSION:
        raise GeometryError(f"cabecera GLB inválida: {magic!r} v{version}")
    if length != len(blob):
        raise GeometryError(f"longitud GLB declarada {length}, real {len(blob)}")
    offset, doc, binary = 12, None, b""
    while offset < len(blob):
        chunk_len, chunk_type = struct.unpack_from("<I4s", blob, offset)
        body = blob[offset + 8: offset + 8 + chunk_len]
        if chunk_type == _CHUNK_JSON:
            doc = json.loads(body.decode("utf-8"))
        elif chunk_type == _CHUNK_BIN:
            binary = body
        offset += 8 + chunk_len
    if doc is None:
        raise GeometryError("GLB sin chunk JSON")
    if not doc.get("meshes"):
        return TexturedMesh.empty()

    def accessor(index: int) -> np.ndarray:
        acc = doc["accessors"][index]
        view = doc["bufferViews"][acc["bufferView"]]
        dtype = {_FLOAT: "<f4", _UINT32: "<u4"}[acc["componentType"]]
        width = {"VEC3": 3, "SCALAR": 1}[acc["type"]]
        start = view.get("byteOffset", 0) + acc.get("byteOffset", 0)
        data = np.frombuffer(binary, dtype=dtype, count=acc["count"] * width, offset=start)
        return data.reshape(acc["count"], width) if width > 1 else data

    primitive = doc["meshes"][0]["primitives"][0]
    attributes = primitive["attributes"]
    return TexturedMesh(
        vertices=accessor(attributes["POSITION"]).astype(np.float64),
        faces=accessor(primitive["indices"]).reshape(-1, 3).astype(np.int64),
        colors=accessor(attributes["COLOR_0"]).astype(np.float64) if "COLOR_0" in attributes else None,
        normals=accessor(attributes["NORMAL"]).astype(np.float64) if "NORMAL" in attributes else None,
    )


def write_glb(path: Union[str, Path], mesh: TexturedMesh) -> None:
    Path(path).write_bytes(export_glb(mesh))


def export_obj(mesh: TexturedMesh) -> str:
    """OBJ ASCII de depuración; colores como extensión `v x y z r g b`."""
    lines = ["# evoscene mesh", "# vertex colors: v x y z r g b (extension)"]
    for v, c in zip(mesh.vertices, mesh.colors):
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}")
    for f in mesh.faces + 1:
        lines.append(f"f {f[0]} {f[1]} {f[2]}")
    return "\n".join(lines) + "\n"


def encode_splats_ply(latent: SceneLatent) -> bytes:
    """Splats del latente como PLY binario little-endian."""
    data = np.empty(len(latent), dtype=SPLAT_DTYPE)
    centers = latent.centers()
    for k, axis in enumerate("xyz"):
        data[axis] = centers[:, k]
    rgb = to_uint8(latent.colors)
    for k, channel in enumerate(("red", "green", "blue")):
        data[channel] = rgb[:, k]
    data["opacity"] = latent.opacity
    data["scale"] = latent.scale
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(latent)}"]
    for name in SPLAT_DTYPE.names:
        kind = "float" if SPLAT_DTYPE[name].kind == "f" else "uchar"
        header.append(f"property {kind} {name}")
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + data.tobytes()


def write_splats(path: Union[str, Path], latent: SceneLatent) -> None:
    Path(path).write_bytes(encode_splats_ply(latent))
