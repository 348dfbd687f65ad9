"""
Etapa B, mitad geométrica: rejilla de ocupación de tres estados, tallado de
espacio libre por visibilidad de rayos y descomposición en parches solapados.
"""

import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from evoscene.backends.base import ImageCrop
from evoscene.errors import ConfigError, GeometryError, NoDataError
from evoscene.geometry import CameraPose, DepthMap, pixel_rays, project_points
from evoscene.prior import ConfidencePointCloud
from evoscene.views import ViewSet

logger = logging.getLogger(__name__)

GRID_MAGIC = b"EVOG"
_GRID_HEADER = struct.Struct("<4sI3dd")
RAY_CHUNK = 16384


class VoxelState(IntEnum):
    UNKNOWN = 0
    FREE = 1
    OBSERVED = 2


# =====================================
# REJILLA
# =====================================

@dataclass(eq=False)
class OccupancyGrid:
    """
    Rejilla cúbica S³ indexada [x, y, z]. `occupied` es la ocupación binaria
    completada (Observed ∪ alucinado); None mientras la rejilla no se ha completado.
    """

    origin: np.ndarray
    pitch: float
    states: np.ndarray
    occupied: Optional[np.ndarray] = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        states = np.asarray(self.states, dtype=np.uint8)
        if states.ndim != 3 or len(set(states.shape)) != 1 or states.shape[0] < 1:
            raise GeometryError(f"la rejilla debe ser cúbica S³ con S >= 1, llegó {states.shape}")
        if not self.pitch > 0:
            raise GeometryError(f"pitch debe ser positivo: {self.pitch}")
        if states.size and states.max() > VoxelState.OBSERVED:
            raise GeometryError("estados de vóxel fuera de {Unknown, Free, Observed}")
        self.states = states
        self.pitch = float(self.pitch)
        if self.occupied is not None:
            occupied = np.asarray(self.occupied, dtype=bool)
            if occupied.shape != states.shape:
                raise GeometryError("la ocupación completada no coincide con la rejilla")
            self.occupied = occupied

    @property
    def resolution(self) -> int:
        return self.states.shape[0]

    @property
    def occupancy(self) -> np.ndarray:
        """Ocupación binaria: la completada si existe, si no el conjunto observado."""
        if self.occupied is not None:
            return self.occupied
        return self.states == VoxelState.OBSERVED

    def count(self, state: VoxelState) -> int:
        return int(np.count_nonzero(self.states == state))

    def centers(self, indices: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(indices, dtype=np.float64) + 0.5) * self.pitch

    def index_of(self, points: np.ndarray) -> np.ndarray:
        """Índice de vóxel por floor((p - origin) / pitch); puede caer fuera de la rejilla."""
        return np.floor((np.asarray(points, dtype=np.float64) - self.origin) / self.pitch).astype(np.int64)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(
            self.origin.copy(),
            self.pitch,
            self.states.copy(),
            None if self.occupied is None else self.occupied.copy(),
        )


def fit_bounds(cloud: ConfidencePointCloud, S: int, margin: float = 0.05) -> Tuple[np.ndarray, float]:
    """
    Caja cúbica que encierra los percentiles [1, 99] por eje, ampliada por `margin`
    (fracción del lado) y centrada.

    Retorna:
    - origin: esquina mínima
    - pitch: lado / S
    """
    if len(cloud) == 0:
        raise NoDataError("no prior")
    if S < 2:
        raise ConfigError(f"la resolución debe ser >= 2, llegó {S}")
    if margin < 0:
        raise ConfigError(f"el margen no puede ser negativo: {margin}")
    lo = np.percentile(cloud.positions, 1, axis=0)
    hi = np.percentile(cloud.positions, 99, axis=0)
    side = float(np.max(hi - lo)) * (1.0 + 2.0 * margin)
    if side <= 0:
        side = 1.0
    center = 0.5 * (lo + hi)
    return center - 0.5 * side, side / S


def voxelize(cloud: ConfidencePointCloud, origin: np.ndarray, pitch: float, S: int) -> OccupancyGrid:
    """Vóxeles con al menos un punto → Observed; el resto Unknown."""
    grid = OccupancyGrid(origin, pitch, np.zeros((S, S, S), dtype=np.uint8))
    if len(cloud) == 0:
        return grid
    idx = grid.index_of(cloud.positions)
    inside = np.all((idx >= 0) & (idx < S), axis=1)
    outside = int(np.count_nonzero(~inside))
    if outside:
        logger.warning("puntos fuera de la rejilla ignorados", extra={"count": outside})
    idx = idx[inside]
    grid.states[idx[:, 0], idx[:, 1], idx[:, 2]] = VoxelState.OBSERVED
    return grid


# =====================================
# TALLADO DE ESPACIO LIBRE
# =====================================

def _plane_t(grid: OccupancyGrid, axis: int, k: np.ndarray, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Parámetro del rayo donde cruza el plano k del eje `axis` (misma aritmética en todo el módulo)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return (grid.origin[axis] + k * grid.pitch - origin[axis]) / dirs[..., axis]


def cell_interval(
    grid: OccupancyGrid, cell: np.ndarray, origin: np.ndarray, dirs: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Intervalo abierto (t_in, t_out) en el que cada rayo atraviesa la celda dada.
    Un eje paralelo cuenta como dentro si lo <= c < hi; si no, el intervalo queda vacío.
    """
    shape = np.broadcast_shapes(cell.shape[:-1], dirs.shape[:-1])
    t_in = np.full(shape, -np.inf)
    t_out = np.full(shape, np.inf)
    for axis in range(3):
        d = dirs[..., axis]
        lo_k = cell[..., axis]
        t_lo = _plane_t(grid, axis, lo_k, origin, dirs)
        t_hi = _plane_t(grid, axis, lo_k + 1, origin, dirs)
        near = np.where(d > 0, t_lo, t_hi)
        far = np.where(d > 0, t_hi, t_lo)
        lo_x = grid.origin[axis] + lo_k * grid.pitch
        hi_x = grid.origin[axis] + (lo_k + 1) * grid.pitch
        parallel_inside = (lo_x <= origin[axis]) & (origin[axis] < hi_x)
        near = np.where(d == 0, np.where(parallel_inside, -np.inf, np.inf), near)
        far = np.where(d == 0, np.where(parallel_inside, np.inf, -np.inf), far)
        t_in = np.maximum(t_in, near)
        t_out = np.minimum(t_out, far)
    return t_in, t_out


def center_depth(grid: OccupancyGrid, cell: np.ndarray, E: CameraPose) -> np.ndarray:
    """Profundidad de cámara (Z) del centro de cada celda."""
    c = grid.origin + (cell + 0.5) * grid.pitch
    r = E.rotation[2]
    return r[0] * c[..., 0] + r[1] * c[..., 1] + r[2] * c[..., 2] + E.translation[2]


def _carves(
    grid: OccupancyGrid, cell: np.ndarray, origin: np.ndarray, dirs: np.ndarray,
    depth: np.ndarray, epsilon: float, E: CameraPose,
) -> np.ndarray:
    """
    Un vóxel queda libre por un rayo si el rayo atraviesa su interior antes de la
    superficie observada y su centro está delante de ella por más de epsilon.
    """
    t_in, t_out = cell_interval(grid, cell, origin, dirs)
    crosses = np.maximum(t_in, 0.0) < np.minimum(t_out, depth)
    return crosses & (center_depth(grid, cell, E) < depth - epsilon)


def _view_rays(K, E: CameraPose, depth: DepthMap) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    origin, dirs = pixel_rays(K, E)
    flat = depth.values.ravel()
    keep = depth.mask.ravel()
    return origin, dirs[keep], flat[keep]


def _start_cells(grid: OccupancyGrid, origin: np.ndarray, dirs: np.ndarray, t_enter: np.ndarray) -> np.ndarray:
    """Celda que contiene el rayo justo al entrar, contando planos cruzados con la misma aritmética."""
    S = grid.resolution
    planes = np.arange(1, S)
    cell = np.zeros((len(dirs), 3), dtype=np.int64)
    for axis in range(3):
        d = dirs[:, axis]
        t_planes = _plane_t(grid, axis, planes[None, :], origin, dirs[:, None, :])
        crossed = np.count_nonzero(t_planes <= t_enter[:, None], axis=1)
        x_planes = grid.origin[axis] + planes * grid.pitch
        parallel = np.count_nonzero(x_planes[None, :] <= origin[axis], axis=1)
        cell[:, axis] = np.where(d > 0, crossed, np.where(d < 0, S - 1 - crossed, parallel))
    return np.clip(cell, 0, S - 1)


def _traverse(
    grid: OccupancyGrid, E: CameraPose, origin: np.ndarray, dirs: np.ndarray, depth: np.ndarray, epsilon: float
) -> np.ndarray:
    """DDA 3D vectorizado sobre un lote de rayos; retorna los índices planos a liberar."""
    S = grid.resolution
    # caja completa de la rejilla: planos 0 y S
    t_enter = np.full(len(dirs), 0.0)
    t_exit = depth.copy()
    for axis in range(3):
        d = dirs[:, axis]
        t0 = _plane_t(grid, axis, 0, origin, dirs)
        t1 = _plane_t(grid, axis, S, origin, dirs)
        inside = (grid.origin[axis] <= origin[axis]) & (origin[axis] < grid.origin[axis] + S * grid.pitch)
        near = np.where(d > 0, t0, np.where(d < 0, t1, -np.inf if inside else np.inf))
        far = np.where(d > 0, t1, np.where(d < 0, t0, np.inf if inside else -np.inf))
        t_enter = np.maximum(t_enter, near)
        t_exit = np.minimum(t_exit, far)
    active = np.flatnonzero(t_enter < t_exit)
    if len(active) == 0:
        return np.zeros(0, dtype=np.int64)

    dirs = dirs[active]
    depth = depth[active]
    cell = _start_cells(grid, origin, dirs, t_enter[active])
    step = np.sign(dirs).astype(np.int64)
    marked = []
    alive = np.arange(len(dirs))
    while len(alive):
        c = cell[alive]
        d = dirs[alive]
        hit = _carves(grid, c, origin, d, depth[alive], epsilon, E)
        if hit.any():
            h = c[hit]
            marked.append((h[:, 0] * S + h[:, 1]) * S + h[:, 2])
        _, t_out = cell_interval(grid, c, origin, d)
        # planos de salida por eje; los ejes empatados avanzan a la vez
        advance = np.zeros_like(c)
        for axis in range(3):
            k = c[:, axis] + (d[:, axis] > 0)
            t_axis = np.where(d[:, axis] != 0, _plane_t(grid, axis, k, origin, d), np.inf)
            advance[:, axis] = np.where(t_axis == t_out, step[alive, axis], 0)
        nxt = c + advance
        keep = (t_out < depth[alive]) & np.all((nxt >= 0) & (nxt < S), axis=1) & np.any(advance != 0, axis=1)
        cell[alive] = nxt
        alive = alive[keep]
    if not marked:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(marked))


def carve_free_space(
    grid: OccupancyGrid,
    views: ViewSet,
    depths: Mapping[str, DepthMap],
    epsilon: Optional[float] = None,
) -> OccupancyGrid:
    """
    Marca Free los vóxeles Unknown cruzados por rayos de cámara delante de la
    superficie observada. Observed nunca se degrada; detrás de superficies no se toca.
    epsilon por defecto = 1 pitch.
    """
    epsilon = grid.pitch if epsilon is None else float(epsilon)
    carved = grid.copy()
    S = grid.resolution
    flat_states = carved.states.reshape(-1)
    total = 0
    for view in views:
        if view.view_id not in depths:
            continue
        origin, dirs, depth = _view_rays(view.K, view.E, depths[view.view_id])
        for start in range(0, len(dirs), RAY_CHUNK):
            idx = _traverse(grid, view.E, origin, dirs[start:start + RAY_CHUNK], depth[start:start + RAY_CHUNK], epsilon)
            unknown = idx[flat_states[idx] == VoxelState.UNKNOWN]
            flat_states[unknown] = VoxelState.FREE
            total += len(unknown)
    logger.info(
        "tallado de espacio libre",
        extra={"views": len(views), "freed": total, "resolution": S},
    )
    return carved


def carve_free_space_bruteforce(
    grid: OccupancyGrid,
    views: ViewSet,
    depths: Mapping[str, DepthMap],
    epsilon: Optional[float] = None,
) -> OccupancyGrid:
    """Oráculo O(vóxeles × píxeles) para validar el DDA en rejillas pequeñas."""
    epsilon = grid.pitch if epsilon is None else float(epsilon)
    carved = grid.copy()
    S = grid.resolution
    cells = np.stack(np.meshgrid(*[np.arange(S)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    free = np.zeros(len(cells), dtype=bool)
    for view in views:
        if view.view_id not in depths:
            continue
        origin, dirs, depth = _view_rays(view.K, view.E, depths[view.view_id])
        for r in range(len(dirs)):
            free |= _carves(grid, cells, origin, dirs[r][None, :], depth[r], epsilon, view.E)
    unknown = carved.states.reshape(-1) == VoxelState.UNKNOWN
    carved.states.reshape(-1)[free & unknown] = VoxelState.FREE
    return carved


# =====================================
# PARCHES
# =====================================

@dataclass(eq=False)
class Patch:
    index: int
    corner: Tuple[int, int, int]
    states: np.ndarray
    crops: List[ImageCrop] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(c, c + self.size) for c in self.corner)


@dataclass(eq=False)
class PatchSet:
    """Parches P³ con paso P - overlap; la última esquina por eje se ajusta a S - P."""

    resolution: int
    patch_size: int
    overlap: int
    patches: List[Patch]

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap

    def __len__(self) -> int:
        return len(self.patches)

    def __iter__(self):
        return iter(self.patches)

    def coverage_counts(self) -> np.ndarray:
        """Número de parches que contienen cada vóxel."""
        counts = np.zeros((self.resolution,) * 3, dtype=np.int64)
        for patch in self.patches:
            counts[patch.slices()] += 1
        return counts


def patch_corners(S: int, P: int, overlap: int) -> List[int]:
    """Esquinas por eje: múltiplos del paso y una final ajustada a S - P."""
    if not 1 <= P <= S:
        raise ConfigError(f"tamaño de parche inválido: P={P}, S={S}")
    if not 0 <= overlap < P:
        raise ConfigError(f"solape inválido: overlap={overlap}, P={P}")
    corners = list(range(0, S - P + 1, P - overlap))
    if corners[-1] != S - P:
        corners.append(S - P)
    return corners


def _crop_for_view(view, depth: Optional[DepthMap], box_corners: np.ndarray, full: bool) -> Optional[ImageCrop]:
    K = view.K
    if full:
        x0, y0, x1, y1 = 0, 0, K.width - 1, K.height - 1
    else:
        pixels, z = project_points(box_corners, K, view.E)
        if not np.any(z > 0):
            return None
        if np.all(z > 0):
            x0 = int(np.floor(pixels[:, 0].min()))
            x1 = int(np.ceil(pixels[:, 0].max()))
            y0 = int(np.floor(pixels[:, 1].min()))
            y1 = int(np.ceil(pixels[:, 1].max()))
        else:
            # parcialmente detrás de la cámara: la proyección no está acotada
            x0, y0, x1, y1 = 0, 0, K.width - 1, K.height - 1
        x0, x1 = max(x0, 0), min(x1, K.width - 1)
        y0, y1 = max(y0, 0), min(y1, K.height - 1)
        if x0 > x1 or y0 > y1:
            return None
    image = view.image[y0:y1 + 1, x0:x1 + 1]
    if depth is not None:
        values = depth.values[y0:y1 + 1, x0:x1 + 1]
    else:
        values = np.full(image.shape[:2], np.nan)
    return ImageCrop(view.view_id, (x0, y0, x1, y1), image, values, K, view.E)


def decompose_patches(
    grid: OccupancyGrid,
    P: int,
    overlap: int,
    views: ViewSet,
    depths: Optional[Mapping[str, DepthMap]] = None,
) -> PatchSet:
    """
    Parte la rejilla en parches P³ solapados y adjunta a cada uno los recortes de
    imagen de todas las vistas. Con S = P el único parche lleva la imagen completa.
    """
    S = grid.resolution
    corners_1d = patch_corners(S, P, overlap)
    depths = depths or {}
    unit = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
    patches = []
    for cx in corners_1d:
        for cy in corners_1d:
            for cz in corners_1d:
                corner = (cx, cy, cz)
                box = grid.origin + (np.asarray(corner) + unit * P) * grid.pitch
                crops = []
                for view in views:
                    crop = _crop_for_view(view, depths.get(view.view_id), box, full=(P == S))
                    if crop is not None:
                        crops.append(crop)
                states = grid.states[cx:cx + P, cy:cy + P, cz:cz + P].copy()
                patches.append(Patch(len(patches), corner, states, crops))
    logger.info("descomposición en parches", extra={"patches": len(patches), "P": P, "overlap": overlap})
    return PatchSet(S, P, overlap, patches)


# =====================================
# E/S (formato EVOG)
# =====================================

def encode_grid(grid: OccupancyGrid) -> bytes:
    """Cabecera little-endian + S³ bytes de estado, x más rápido."""
    S = grid.resolution
    header = _GRID_HEADER.pack(GRID_MAGIC, S, *grid.origin.tolist(), grid.pitch)
    return header + grid.states.ravel(order="F").tobytes()


def decode_grid(blob: bytes) -> OccupancyGrid:
    if len(blob) < _GRID_HEADER.size:
        raise GeometryError("archivo de rejilla truncado")
    magic, S, ox, oy, oz, pitch = _GRID_HEADER.unpack_from(blob)
    if magic != GRID_MAGIC:
        raise GeometryError(f"magic de rejilla inválido: {magic!r}")
    body = blob[_GRID_HEADER.size:]
    if len(body) != S**3:
        raise GeometryError(f"se esperaban {S**3} bytes de estado, llegaron {len(body)}")
    states = np.frombuffer(body, dtype=np.uint8).reshape((S, S, S), order="F").copy()
    return OccupancyGrid(np.array([ox, oy, oz]), pitch, states)


def write_grid(path: Union[str, Path], grid: OccupancyGrid) -> None:
    Path(path).write_bytes(encode_grid(grid))


def read_grid(path: Union[str, Path]) -> OccupancyGrid:
    return decode_grid(Path(path).read_bytes())


def state_counts(grid: OccupancyGrid) -> Dict[str, int]:
    counts = {state.name.lower(): grid.count(state) for state in VoxelState}
    if grid.occupied is not None:
        counts["occupied"] = int(np.count_nonzero(grid.occupied))
    return counts
