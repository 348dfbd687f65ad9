"""
Cliente JSON sobre HTTP para los tres servicios (y la pérdida perceptual opcional).

Reintenta sólo fallos de transporte (conexión, timeout, HTTP 5xx) con backoff
exponencial 1s/2s/4s; una respuesta que no cumple el esquema es un ContractError
inmediato.
"""

import logging
import os
import threading
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Type

import numpy as np
import requests
from pydantic import BaseModel, ValidationError

from evoscene.backends.base import (
    CompletionRequest,
    CompletionResponse,
    DepthEstimate,
    DepthEstimator,
    SceneCompleter,
    SynthesisRequest,
    SynthesisResponse,
    ViewSynthesizer,
)
from evoscene.errors import BackendError, ContractError, TransportError
from evoscene.geometry import CameraIntrinsics, CameraPose, DepthMap
from evoscene.schemas import (
    ArrayPayload,
    CameraModel,
    CompleteResponse,
    DepthRequest,
    DepthResponse,
    LossRequest,
    LossResponse,
    SynthesizeResponse,
    completion_response_from_wire,
    completion_to_wire,
    synthesis_response_from_wire,
    synthesis_to_wire,
)

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 600.0
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 1.0


def session_dir_from_env() -> Optional[Path]:
    value = os.getenv("EVOSCENE_SESSION_DIR")
    return Path(value) if value else None


def _field_path(exc: ValidationError) -> str:
    loc = exc.errors()[0]["loc"] if exc.errors() else ()
    return ".".join(str(part) for part in loc) or "<root>"


class RemoteClient:
    """
    Transporte compartido: POST de un modelo pydantic, validación de `data` contra
    el modelo de respuesta. Las llamadas de un mismo cliente se serializan.
    """

    def __init__(
        self,
        base_url: str,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        backoff: float = DEFAULT_BACKOFF,
        session: Optional[requests.Session] = None,
        session_dir: Optional[Path] = None,
        sleep: Callable[[float], None] = time.sleep,
        serialize: bool = True,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.sess = session or requests.Session()
        self.session_dir = session_dir
        self._sleep = sleep
        self._lock = threading.Lock() if serialize else None
        self.last_attempts: List[Dict[str, Any]] = []

    def _post_once(self, url: str, body: Dict[str, Any]) -> Dict[str, Any]:
        r = self.sess.post(url, json=body, timeout=self.timeout)
        if r.status_code >= 500:
            raise requests.HTTPError(f"HTTP {r.status_code}", response=r)
        if r.status_code >= 400:
            try:
                detail = r.json().get("detail", r.text)
            except ValueError:
                detail = r.text
            raise BackendError(f"{url} rechazó la petición ({r.status_code}): {detail}")
        try:
            return r.json()
        except ValueError as e:
            raise ContractError(f"respuesta no JSON de {url}", field="<root>") from e

    def _with_retry(self, url: str, body: Dict[str, Any]) -> Dict[str, Any]:
        attempts: List[Dict[str, Any]] = []
        self.last_attempts = attempts
        for i in range(self.retries + 1):
            try:
                payload = self._post_once(url, body)
                attempts.append({"attempt": i + 1, "ok": True})
                return payload
            except (requests.ConnectionError, requests.Timeout, requests.HTTPError) as e:
                attempts.append({"attempt": i + 1, "ok": False, "error": str(e)})
                logger.warning("fallo de transporte", extra={"url": url, "attempt": i + 1, "error": str(e)})
                if i < self.retries:
                    self._sleep(self.backoff * (2 ** i))
        raise TransportError(f"reintentos agotados contra {url}", attempts=attempts)

    def call(self, endpoint: str, request: BaseModel, response_model: Type[BaseModel]) -> BaseModel:
        """
        Envía `request` a `endpoint` y valida la respuesta.
        Retorna el modelo de respuesta; ContractError nombra el campo inválido.
        """
        url = f"{self.base_url}/{endpoint.lstrip('/')}"
        body = request.model_dump(mode="json")
        if self._lock is not None:
            with self._lock:
                payload = self._with_retry(url, body)
        else:
            payload = self._with_retry(url, body)

        if not isinstance(payload, dict) or not payload.get("success", False):
            detail = payload.get("detail") if isinstance(payload, dict) else None
            raise BackendError(f"{url} respondió con error: {detail}")
        data = payload.get("data")
        if not isinstance(data, dict):
            raise ContractError(f"respuesta de {url} sin objeto 'data'", field="data")
        try:
            return response_model.model_validate(data)
        except ValidationError as e:
            field = _field_path(e)
            raise ContractError(f"respuesta de {url} no cumple el esquema en '{field}'", field=field) from e


# =====================================
# ADAPTADORES
# =====================================

class RemoteDepthEstimator(DepthEstimator):
    def __init__(self, client: RemoteClient, returns_intrinsics: bool = True, returns_pose: bool = False):
        self.client = client
        self.returns_intrinsics = returns_intrinsics
        self.returns_pose = returns_pose

    def estimate(
        self,
        image: np.ndarray,
        view_id: Optional[str] = None,
        camera_hint: Optional[Tuple[CameraIntrinsics, CameraPose]] = None,
    ) -> DepthEstimate:
        request = DepthRequest(
            view_id=view_id,
            image=ArrayPayload.encode(np.asarray(image, dtype=np.float64), self.client.session_dir),
            camera_hint=None if camera_hint is None else CameraModel.from_camera(*camera_hint),
        )
        response: DepthResponse = self.client.call("depth", request, DepthResponse)
        values = response.depth.decode(self.client.session_dir)
        if values.shape != image.shape[:2]:
            raise ContractError(f"profundidad {values.shape} para imagen {image.shape[:2]}", field="depth.shape")
        try:
            depth = DepthMap.from_array(values)
        except ValueError as e:
            raise ContractError(str(e), field="depth") from e
        K = E = None
        if response.camera is not None:
            try:
                K, E = response.camera.to_camera()
            except ValueError as e:
                raise ContractError(str(e), field="camera") from e
        return DepthEstimate(
            depth=depth,
            intrinsics=K if self.returns_intrinsics else None,
            pose=E if self.returns_pose else None,
        )


class RemoteSceneCompleter(SceneCompleter):
    def __init__(self, client: RemoteClient):
        self.client = client

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        wire = completion_to_wire(request, self.client.session_dir)
        response: CompleteResponse = self.client.call("complete", wire, CompleteResponse)
        return completion_response_from_wire(response, self.client.session_dir)


class RemoteViewSynthesizer(ViewSynthesizer):
    def __init__(self, client: RemoteClient):
        self.client = client

    def synthesize(self, request: SynthesisRequest) -> SynthesisResponse:
        wire = synthesis_to_wire(request, self.client.session_dir)
        response: SynthesizeResponse = self.client.call("synthesize", wire, SynthesizeResponse)
        result = synthesis_response_from_wire(response, self.client.session_dir)
        if len(result.frames) != len(request.trajectory):
            raise ContractError(
                f"{len(result.frames)} frames para una trayectoria de {len(request.trajectory)}",
                field="frames",
            )
        width, height = request.size
        for k, frame in enumerate(result.frames):
            if frame.shape != (height, width, 3):
                raise ContractError(f"frame {k} con forma {frame.shape}", field=f"frames.{k}")
        return result


class RemotePerceptualLoss:
    """Pérdida perceptual remota: (frame, objetivo) → (valor, gradiente respecto al frame)."""

    def __init__(self, client: RemoteClient):
        self.client = client

    def __call__(self, frame: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
        request = LossRequest(
            frame=ArrayPayload.encode(np.asarray(frame, dtype=np.float64), self.client.session_dir),
            target=ArrayPayload.encode(np.asarray(target, dtype=np.float64), self.client.session_dir),
        )
        response: LossResponse = self.client.call("loss", request, LossResponse)
        gradient = response.gradient.decode(self.client.session_dir)
        if gradient.shape != frame.shape:
            raise ContractError(f"gradiente {gradient.shape} para frame {frame.shape}", field="gradient")
        return float(response.loss), gradient.astype(np.float64)
