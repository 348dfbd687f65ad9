"""
Geometría de cámara compartida por todas las etapas.

Convenciones:
- La pose es mundo→cámara: x_cam = R · x_mundo + t.
- La cámara mira hacia +Z, +X a la derecha, +Y hacia abajo.
- El centro del píxel (u, v) está en coordenadas enteras; sin desplazamiento de medio píxel.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from evoscene.errors import GeometryError

ORTHONORMAL_TOLERANCE = 1e-9
DEPTH_MAGIC = b"EVDM"
DISPARITY_FLAG = 1


# =====================================
# TIPOS DE DOMINIO
# =====================================

@dataclass(frozen=True)
class CameraIntrinsics:
    """Modelo pinhole: focales y punto principal en píxeles, tamaño de imagen."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focales deben ser positivas: fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"tamaño de imagen inválido: {self.width}x{self.height}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise GeometryError(f"punto principal fuera de la imagen: ({self.cx}, {self.cy})")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 60.0) -> "CameraIntrinsics":
        """
        Intrínsecos por defecto a partir del campo de visión horizontal.
        Se usa cuando el estimador de profundidad no devuelve intrínsecos.
        """
        fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Reescala los intrínsecos a otra resolución de imagen."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy, width=width, height=height
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraIntrinsics":
        return cls(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Pose mundo→cámara (R, t)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise GeometryError("pose con valores no finitos")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOLERANCE:
            raise GeometryError("la rotación no es ortonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise GeometryError("la rotación debe tener determinante +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Centro óptico en coordenadas de mundo."""
        return -self.rotation.T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Mundo → cámara para un arreglo (N, 3)."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """Cámara → mundo para un arreglo (N, 3)."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def compose(self, other: "CameraPose") -> "CameraPose":
        """Pose que aplica primero `other` y luego `self`."""
        return CameraPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def allclose(self, other: "CameraPose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraPose":
        return cls(np.array(data["rotation"], dtype=np.float64), np.array(data["translation"], dtype=np.float64))


def look_at(eye: np.ndarray, target: np.ndarray, up: Tuple[float, float, float] = (0.0, 1.0, 0.0)) -> CameraPose:
    """
    Pose de una cámara en `eye` mirando a `target`; `up` es la dirección de mundo
    que aparece hacia arriba en la imagen (el eje +Y de cámara apunta hacia abajo).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise GeometryError("look_at: eye y target coinciden")
    z_axis = forward / norm
    x_axis = np.cross(z_axis, np.asarray(up, dtype=np.float64))
    x_norm = np.linalg.norm(x_axis)
    if x_norm < 1e-12:
        raise GeometryError("look_at: dirección de vista paralela al vector up")
    x_axis /= x_norm
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.stack([x_axis, y_axis, z_axis])
    return CameraPose(rotation, -rotation @ eye)


@dataclass(eq=False)
class DepthMap:
    """Profundidad métrica por píxel (a lo largo de +Z de cámara) con máscara de validez."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape:
            raise GeometryError(f"mapa de profundidad con forma inválida: {values.shape} / {mask.shape}")
        valid = values[mask]
        if valid.size and (not np.all(np.isfinite(valid)) or np.any(valid <= 0)):
            raise GeometryError("profundidades válidas deben ser finitas y positivas")
        values = values.copy()
        values[~mask] = np.nan
        self.values = values
        self.mask = mask

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DepthMap":
        """Construye el mapa tomando NaN/inf/no positivos como inválidos."""
        values = np.asarray(values, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            mask = np.isfinite(values) & (values > 0)
        return cls(values, mask)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def sample(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """
        Profundidad en el píxel entero más cercano; NaN fuera de la imagen o inválido.
        """
        ui = np.rint(u).astype(np.int64)
        vi = np.rint(v).astype(np.int64)
        inside = (ui >= 0) & (ui < self.width) & (vi >= 0) & (vi < self.height)
        out = np.full(ui.shape, np.nan)
        out[inside] = self.values[vi[inside], ui[inside]]
        return out


@dataclass(eq=False)
class ConfidenceMap:
    """Confianza por píxel en [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if np.any(values < 0) or np.any(values > 1):
            raise GeometryError("confianzas fuera de [0, 1]")
        self.values = values

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(eq=False)
class BackProjection:
    """Puntos de mundo (N, 3) con su píxel de origen (N, 2) como (u, v)."""

    points: np.ndarray
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)


# =====================================
# OPERACIONES
# =====================================

def project(
    point: np.ndarray, K: CameraIntrinsics, E: CameraPose
) -> Optional[Tuple[np.ndarray, float]]:
    """
    Proyecta un punto de mundo.

    Retorna:
    - (pixel (u, v), profundidad) si Z > 0
    - None si el punto está detrás de la cámara (Z <= 0); no es un error
    """
    pixels, depths = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), K, E)
    if not depths[0] > 0:
        return None
    return pixels[0], float(depths[0])


def project_points(points: np.ndarray, K: CameraIntrinsics, E: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
    """
    Versión vectorizada de `project`. Los píxeles de puntos con Z <= 0 son NaN;
    la profundidad se devuelve tal cual para que el llamador decida.
    """
    cam = E.transform(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, K.fx * cam[:, 0] / z + K.cx, np.nan)
        v = np.where(z > 0, K.fy * cam[:, 1] / z + K.cy, np.nan)
    return np.stack([u, v], axis=1), z


def pixel_rays(K: CameraIntrinsics, E: CameraPose, pixels: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rayos de mundo por píxel: origen (centro de cámara) y dirección (N, 3) escalada
    para que el parámetro del rayo sea la profundidad Z de cámara.
    """
    if pixels is None:
        vs, us = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
        pixels = np.stack([us.ravel(), vs.ravel()], axis=1)
    pixels = np.asarray(pixels, dtype=np.float64)
    cam_dirs = np.stack(
        [(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))], axis=1
    )
    return E.center, cam_dirs @ E.rotation


def back_project(d: DepthMap, K: CameraIntrinsics, E: CameraPose) -> BackProjection:
    """
    Eleva cada píxel válido a un punto de mundo. Píxeles inválidos se omiten.
    """
    vs, us = np.nonzero(d.mask)
    z = d.values[vs, us]
    cam = np.stack([(us - K.cx) * z / K.fx, (vs - K.cy) * z / K.fy, z], axis=1)
    return BackProjection(points=E.inverse_transform(cam), pixels=np.stack([us, vs], axis=1))


def depth_gradient_magnitude(d: DepthMap) -> np.ndarray:
    """
    Magnitud del gradiente por diferencias centrales; en bordes (o junto a vecinos
    inválidos) diferencias hacia adelante/atrás; sin vecinos válidos el gradiente es 0.
    """
    values = np.where(d.mask, d.values, 0.0)
    padded = np.pad(values, 1)
    valid = np.pad(d.mask, 1)

    def axis_gradient(prev_v, next_v, prev_ok, next_ok):
        central = (next_v - prev_v) / 2.0
        forward = next_v - values
        backward = values - prev_v
        return np.where(
            prev_ok & next_ok, central, np.where(next_ok, forward, np.where(prev_ok, backward, 0.0))
        )

    gx = axis_gradient(padded[1:-1, :-2], padded[1:-1, 2:], valid[1:-1, :-2], valid[1:-1, 2:])
    gy = axis_gradient(padded[:-2, 1:-1], padded[2:, 1:-1], valid[:-2, 1:-1], valid[2:, 1:-1])
    return np.where(d.mask, np.hypot(gx, gy), 0.0)


def depth_confidence(d: DepthMap, sigma: float = 0.5) -> ConfidenceMap:
    """
    Confianza = exp(-|∇d| / sigma). Regiones suaves → ~1, discontinuidades → ~0.
    Píxeles inválidos reciben confianza 0.
    """
    if not sigma > 0:
        raise GeometryError(f"sigma debe ser positivo: {sigma}")
    g = depth_gradient_magnitude(d)
    return ConfidenceMap(np.where(d.mask, np.exp(-g / sigma), 0.0))


# =====================================
# FORMATOS DE ARCHIVO
# =====================================

def encode_depth(d: DepthMap, disparity: bool = False) -> bytes:
    """
    Formato EVDM: "EVDM", u32 ancho, u32 alto, [byte de bandera si es disparidad],
    luego ancho·alto float32 little-endian por filas (NaN = inválido).
    """
    header = DEPTH_MAGIC + struct.pack("<II", d.width, d.height)
    if disparity:
        header += struct.pack("<B", DISPARITY_FLAG)
    body = np.where(d.mask, d.values, np.nan).astype("<f4").tobytes()
    return header + body


def decode_depth(data: bytes) -> Tuple[np.ndarray, bool]:
    """Decodifica EVDM. Retorna (valores float32→float64 con NaN, es_disparidad)."""
    if data[:4] != DEPTH_MAGIC:
        raise GeometryError("archivo EVDM con magic inválido")
    width, height = struct.unpack("<II", data[4:12])
    body_size = width * height * 4
    offset = 12
    disparity = False
    if len(data) == offset + 1 + body_size:
        disparity = data[offset] == DISPARITY_FLAG
        offset += 1
    elif len(data) != offset + body_size:
        raise GeometryError(f"archivo EVDM truncado: {len(data)} bytes")
    values = np.frombuffer(data, dtype="<f4", count=width * height, offset=offset).astype(np.float64)
    return values.reshape(height, width), disparity


def write_depth(path: Union[str, Path], d: DepthMap) -> None:
    Path(path).write_bytes(encode_depth(d))


def read_depth(path: Union[str, Path]) -> DepthMap:
    values, _ = decode_depth(Path(path).read_bytes())
    return DepthMap.from_array(values)


def camera_to_json(K: CameraIntrinsics, E: CameraPose) -> str:
    return json.dumps({"intrinsics": K.to_dict(), "pose": E.to_dict()}, indent=2)


def camera_from_json(text: str) -> Tuple[CameraIntrinsics, CameraPose]:
    data = json.loads(text)
    return CameraIntrinsics.from_dict(data["intrinsics"]), CameraPose.from_dict(data["pose"])
