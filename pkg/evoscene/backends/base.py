"""
Contratos de los tres servicios neuronales.

Cualquier implementación que cumpla estos contratos (esquema, restricción de
vóxeles observados, número de frames) es intercambiable en el pipeline; las
verificaciones las hace el host, no el backend.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from evoscene.geometry import CameraIntrinsics, CameraPose, DepthMap, project_points
from evoscene.rendering import DisparityMap
from evoscene.trajectory import TrajectoryPose

DEFAULT_PROMPT_TEMPLATE = (
    "Camera orbiting around a static 3D scene, filling the blank space with detailed and "
    "realistic details, geometry consistent, high quality, 8k. The video shows {caption}"
)


# =====================================
# ESTIMADOR DE PROFUNDIDAD
# =====================================

@dataclass(eq=False)
class DepthEstimate:
    depth: DepthMap
    intrinsics: Optional[CameraIntrinsics] = None
    pose: Optional[CameraPose] = None


class DepthEstimator(ABC):
    """Profundidad métrica y (opcionalmente) cámara para una imagen."""

    returns_intrinsics: bool = False
    returns_pose: bool = False

    @abstractmethod
    def estimate(
        self,
        image: np.ndarray,
        view_id: Optional[str] = None,
        camera_hint: Optional[Tuple[CameraIntrinsics, CameraPose]] = None,
    ) -> DepthEstimate:
        ...


# =====================================
# COMPLETADOR DE ESCENA
# =====================================

@dataclass(eq=False)
class ImageCrop:
    """
    Recorte de una vista para un parche: caja de píxeles inclusiva (x0, y0, x1, y1),
    píxeles RGB, profundidad (NaN = inválida) y la cámara de la imagen completa.
    """

    view_id: str
    box: Tuple[int, int, int, int]
    image: np.ndarray
    depth: np.ndarray
    K: CameraIntrinsics
    E: CameraPose
    confidence: Optional[np.ndarray] = None

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Proyecta puntos de mundo a coordenadas locales del recorte.
        Retorna (u_local, v_local, z); u/v son NaN detrás de la cámara.
        """
        pixels, z = project_points(points, self.K, self.E)
        return pixels[:, 0] - self.box[0], pixels[:, 1] - self.box[1], z


@dataclass(eq=False)
class CompletionRequest:
    patch_index: int
    corner: Tuple[int, int, int]
    states: np.ndarray
    crops: List[ImageCrop]
    origin: np.ndarray
    pitch: float
    prior_colors: Optional[np.ndarray] = None

    @property
    def clamp_mask(self) -> np.ndarray:
        """Vóxeles observados: deben salir ocupados."""
        from evoscene.occupancy import VoxelState

        return self.states == VoxelState.OBSERVED

    def voxel_centers(self) -> np.ndarray:
        """Centros de mundo (P³, 3) en orden de índice [x, y, z]."""
        size = self.states.shape[0]
        idx = np.stack(np.meshgrid(*[np.arange(size)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        return self.origin + (idx + np.asarray(self.corner) + 0.5) * self.pitch


@dataclass(eq=False)
class CompletionResponse:
    occupancy: np.ndarray
    colors: Optional[np.ndarray] = None
    opacity: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None


class SceneCompleter(ABC):
    """Completa la ocupación binaria de un parche (sin estado)."""

    @abstractmethod
    def complete(self, request: CompletionRequest) -> CompletionResponse:
        ...


# =====================================
# SINTETIZADOR DE VISTAS
# =====================================

@dataclass(eq=False)
class SynthesisRequest:
    """
    Petición de síntesis de vídeo condicionada por disparidad.
    Los campos de muestreo son opacos para el host; sólo los usa un backend de difusión real.
    """

    seed_image: np.ndarray
    disparity: List[DisparityMap]
    trajectory: List[TrajectoryPose]
    view_ids: List[str]
    size: Tuple[int, int]
    prompt: str = DEFAULT_PROMPT_TEMPLATE.format(caption="")
    first_frame_injection: bool = True
    conditioning_scale: float = 0.4
    sampling_steps: int = 50
    guidance_scale: float = 7.5


@dataclass(eq=False)
class SynthesisResponse:
    frames: List[np.ndarray]
    poses: Optional[List[CameraPose]] = field(default=None)


class ViewSynthesizer(ABC):
    """Devuelve exactamente N frames del tamaño pedido."""

    @abstractmethod
    def synthesize(self, request: SynthesisRequest) -> SynthesisResponse:
        ...


@dataclass
class Backends:
    """Los tres servicios ligados a una ejecución."""

    depth: DepthEstimator
    completer: SceneCompleter
    synthesizer: ViewSynthesizer
