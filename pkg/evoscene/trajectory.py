"""
Etapa C: planificación de cámaras.

Órbitas alrededor del centro de la escena con elevación y radio fijados por la
vista semilla, y el calendario de azimut alterno entre iteraciones.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from evoscene.errors import GeometryError
from evoscene.geometry import CameraIntrinsics, CameraPose

logger = logging.getLogger(__name__)

DEFAULT_AMPLITUDE_DEG = 45.0


@dataclass(frozen=True, eq=False)
class TrajectoryPose:
    azimuth_deg: float
    K: CameraIntrinsics
    E: CameraPose

    def to_dict(self) -> Dict[str, Any]:
        return {
            "azimuth_deg": self.azimuth_deg,
            "position": self.E.center.tolist(),
            "rotation": self.E.rotation.tolist(),
        }


@dataclass(frozen=True, eq=False)
class OrbitSpec:
    """
    Órbita: centro, radio, pose semilla, rango de azimut [a0, a1] en grados y N frames.
    La elevación queda fijada por la pose semilla.
    """

    center: np.ndarray
    radius: float
    base_pose: CameraPose
    intrinsics: CameraIntrinsics
    azimuth_range: Tuple[float, float]
    frame_count: int = 121

    def __post_init__(self):
        if self.frame_count < 2:
            raise GeometryError("la órbita necesita al menos 2 frames")
        if not self.radius > 0:
            raise GeometryError("el radio de la órbita debe ser positivo")
        offset = self.base_pose.center - np.asarray(self.center, dtype=np.float64)
        if np.linalg.norm(offset) == 0:
            raise GeometryError("la cámara semilla coincide con el centro de la órbita")

    @property
    def elevation_deg(self) -> float:
        offset = self.base_pose.center - np.asarray(self.center, dtype=np.float64)
        return math.degrees(math.asin(np.clip(offset[1] / np.linalg.norm(offset), -1.0, 1.0)))


def yaw_rotation(azimuth_deg: float) -> np.ndarray:
    """Rotación alrededor del eje vertical de mundo +Y (regla de la mano derecha)."""
    a = math.radians(azimuth_deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def orbital_trajectory(spec: OrbitSpec) -> List[TrajectoryPose]:
    """
    N poses con azimut equiespaciado en [a0, a1] (inclusivo).

    Cada pose es la pose semilla rotada alrededor del eje vertical que pasa por el
    centro, con el desplazamiento re-escalado al radio. Si la semilla mira al
    centro con up +Y, todas las poses también; con a0 = 0 el frame 0 es la semilla.
    """
    center = np.asarray(spec.center, dtype=np.float64)
    offset = spec.base_pose.center - center
    offset = offset / np.linalg.norm(offset) * spec.radius
    poses = []
    for azimuth in np.linspace(spec.azimuth_range[0], spec.azimuth_range[1], spec.frame_count):
        yaw = yaw_rotation(float(azimuth))
        position = center + yaw @ offset
        rotation = spec.base_pose.rotation @ yaw.T
        poses.append(TrajectoryPose(float(azimuth), spec.intrinsics, CameraPose(rotation, -rotation @ position)))
    return poses


def iteration_schedule(
    t: int,
    amplitude: float = DEFAULT_AMPLITUDE_DEG,
    table: Optional[Sequence[Sequence[float]]] = None,
) -> Tuple[float, float]:
    """
    Rango de azimut de la iteración t (t >= 1).
    - tabla por defecto: t=1 → [0, +A], t=2 → [0, -A]
    - fuera de la tabla: t impar → [0, +A], par → [0, -A], con aviso en el log
    """
    if t < 1:
        raise GeometryError(f"el calendario empieza en t=1, llegó t={t}")
    if table is None:
        table = [(0.0, amplitude), (0.0, -amplitude)]
    if t <= len(table):
        a0, a1 = table[t - 1]
        return float(a0), float(a1)
    fallback = (0.0, amplitude) if t % 2 == 1 else (0.0, -amplitude)
    logger.info("tabla de azimut agotada, se reutiliza la alternancia", extra={"t": t, "range": fallback})
    return fallback


def trajectory_to_json(poses: List[TrajectoryPose]) -> str:
    return json.dumps([p.to_dict() for p in poses], indent=2)
