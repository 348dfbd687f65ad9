"""
Backends locales deterministas ligados a una escena sintética.

Sustituyen a los tres servicios neuronales para cerrar el ciclo sin red:
profundidad y cámara exactas, completado morfológico y "vídeo" renderizado
de la escena de referencia.
"""

import logging
import threading
import zlib
from typing import Dict, Optional, Tuple

import numpy as np

from evoscene.backends.base import (
    Backends,
    CompletionRequest,
    CompletionResponse,
    DepthEstimate,
    DepthEstimator,
    SceneCompleter,
    SynthesisRequest,
    SynthesisResponse,
    ViewSynthesizer,
)
from evoscene.completion import oracle_complete
from evoscene.errors import NoDataError
from evoscene.frames import quantize
from evoscene.geometry import CameraIntrinsics, CameraPose, DepthMap
from evoscene.synthbench import SceneSpec, render_gt

logger = logging.getLogger(__name__)

SEED_VIEW_ID = "seed"


def _rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


class OracleScene:
    """
    Escena de referencia más el registro de cámaras por id de vista.
    La vista semilla se registra al construir; las sintetizadas al generarlas.
    """

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self._cameras: Dict[str, Tuple[CameraIntrinsics, CameraPose]] = {SEED_VIEW_ID: spec.seed_camera()}
        self._lock = threading.Lock()

    def register(self, view_id: str, K: CameraIntrinsics, E: CameraPose) -> None:
        with self._lock:
            self._cameras[view_id] = (K, E)

    def camera(self, view_id: str) -> Tuple[CameraIntrinsics, CameraPose]:
        with self._lock:
            if view_id not in self._cameras:
                raise NoDataError(f"id de vista desconocido para el oráculo: {view_id}")
            return self._cameras[view_id]

    def seed_image(self) -> np.ndarray:
        K, E = self.spec.seed_camera()
        image, _ = render_gt(self.spec, K, E)
        return quantize(image)


def oracle_depth(
    scene: OracleScene,
    view_id: Optional[str] = None,
    camera: Optional[Tuple[CameraIntrinsics, CameraPose]] = None,
    size: Optional[Tuple[int, int]] = None,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> Tuple[DepthMap, CameraIntrinsics, CameraPose]:
    """
    Profundidad analítica y cámara exacta de la vista. Con noise_sigma > 0 se suma
    ruido gaussiano sembrado por (seed, view_id).
    """
    if camera is None:
        if view_id is None:
            raise NoDataError("el oráculo de profundidad necesita un id de vista o una cámara")
        camera = scene.camera(view_id)
    K, E = camera
    if size is not None and tuple(size) != (K.width, K.height):
        K = K.scaled(*size)
    _, depth = render_gt(scene.spec, K, E)
    if noise_sigma > 0:
        values = depth.values.copy()
        noise = _rng(seed, view_id or "anonymous").normal(0.0, noise_sigma, size=values.shape)
        values[depth.mask] = np.maximum(values[depth.mask] + noise[depth.mask], 1e-6)
        depth = DepthMap(values, depth.mask)
    return depth, K, E


def oracle_synthesize(
    scene: OracleScene,
    request: SynthesisRequest,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> SynthesisResponse:
    """
    Renderiza la escena de referencia a lo largo de la trayectoria (el prompt se
    ignora). Con inyección del primer frame, el frame 0 es la imagen semilla.
    """
    if request.disparity:
        logger.info(
            "disparidad recibida y no usada por el oráculo",
            extra={"frames": len(request.disparity)},
        )
    frames, poses = [], []
    for k, (pose, view_id) in enumerate(zip(request.trajectory, request.view_ids)):
        K = pose.K.scaled(*request.size) if (pose.K.width, pose.K.height) != tuple(request.size) else pose.K
        image, _ = render_gt(scene.spec, K, pose.E)
        if noise_sigma > 0:
            image = np.clip(image + _rng(seed, view_id).normal(0.0, noise_sigma, size=image.shape), 0.0, 1.0)
        if k == 0 and request.first_frame_injection:
            seed_image = np.asarray(request.seed_image, dtype=np.float64)
            if seed_image.shape == image.shape:
                image = seed_image
        frames.append(quantize(image))
        poses.append(pose.E)
        scene.register(view_id, K, pose.E)
    return SynthesisResponse(frames=frames, poses=poses)


class OracleDepthEstimator(DepthEstimator):
    returns_intrinsics = True
    returns_pose = True

    def __init__(self, scene: OracleScene, noise_sigma: float = 0.0, seed: int = 0):
        self.scene = scene
        self.noise_sigma = noise_sigma
        self.seed = seed

    def estimate(self, image, view_id=None, camera_hint=None) -> DepthEstimate:
        size = (image.shape[1], image.shape[0])
        depth, K, E = oracle_depth(self.scene, view_id, camera_hint, size, self.noise_sigma, self.seed)
        return DepthEstimate(depth=depth, intrinsics=K, pose=E)


class OracleCompleter(SceneCompleter):
    def __init__(self, radius: int = 2):
        self.radius = radius

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        return oracle_complete(request, radius=self.radius)


class OracleSynthesizer(ViewSynthesizer):
    def __init__(self, scene: OracleScene, noise_sigma: float = 0.0, seed: int = 0):
        self.scene = scene
        self.noise_sigma = noise_sigma
        self.seed = seed

    def synthesize(self, request: SynthesisRequest) -> SynthesisResponse:
        return oracle_synthesize(self.scene, request, self.noise_sigma, self.seed)


def oracle_backends(
    spec: SceneSpec,
    depth_noise: float = 0.0,
    photometric_noise: float = 0.0,
    closing_radius: int = 2,
    seed: int = 0,
) -> Backends:
    """Los tres backends oráculo compartiendo el mismo registro de cámaras."""
    scene = OracleScene(spec)
    return Backends(
        depth=OracleDepthEstimator(scene, depth_noise, seed),
        completer=OracleCompleter(closing_radius),
        synthesizer=OracleSynthesizer(scene, photometric_noise, seed),
    )
