"""
Esquemas del protocolo JSON "evoscene-proto/1" entre el host y los backends.

Los arreglos viajan como ArrayPayload: base64 en línea o, con un directorio de
sesión negociado, como ruta relativa a un archivo .npy en ese directorio.
"""

import base64
import io
import uuid
from pathlib import Path
from typing import Any, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from evoscene.backends.base import (
    CompletionRequest,
    CompletionResponse,
    ImageCrop,
    SynthesisRequest,
    SynthesisResponse,
)
from evoscene.errors import ContractError
from evoscene.geometry import CameraIntrinsics, CameraPose
from evoscene.rendering import DisparityMap
from evoscene.trajectory import TrajectoryPose

PROTOCOL_VERSION = "evoscene-proto/1"


# =====================================
# SCHEMAS BASE
# =====================================

class ProtocolModel(BaseModel):
    protocol: str = Field(PROTOCOL_VERSION, description="Versión del protocolo")

    @field_validator("protocol")
    @classmethod
    def validate_protocol(cls, v):
        if v != PROTOCOL_VERSION:
            raise ValueError(f"versión de protocolo no soportada: {v}")
        return v


class ArrayPayload(BaseModel):
    """Arreglo numpy serializado: exactamente uno de `data` (base64) o `path` (side channel)."""

    dtype: str = Field(..., description="dtype de numpy, p. ej. '<f8'")
    shape: List[int] = Field(..., description="Forma del arreglo")
    data: Optional[str] = Field(None, description="Bytes del arreglo en base64")
    path: Optional[str] = Field(None, description="Ruta relativa al directorio de sesión")

    @model_validator(mode="after")
    def validate_source(self):
        if (self.data is None) == (self.path is None):
            raise ValueError("se requiere exactamente uno de data / path")
        return self

    @classmethod
    def encode(cls, array: np.ndarray, session_dir: Optional[Path] = None) -> "ArrayPayload":
        array = np.ascontiguousarray(array)
        if session_dir is not None:
            name = f"{uuid.uuid4().hex}.npy"
            np.save(Path(session_dir) / name, array, allow_pickle=False)
            return cls(dtype=array.dtype.str, shape=list(array.shape), path=name)
        return cls(
            dtype=array.dtype.str,
            shape=list(array.shape),
            data=base64.b64encode(array.tobytes()).decode("ascii"),
        )

    def decode(self, session_dir: Optional[Path] = None) -> np.ndarray:
        if self.path is not None:
            if session_dir is None:
                raise ContractError("payload por archivo sin directorio de sesión", field="path")
            target = (Path(session_dir) / self.path).resolve()
            if Path(session_dir).resolve() not in target.parents:
                raise ContractError("ruta de payload fuera del directorio de sesión", field="path")
            array = np.load(target, allow_pickle=False)
        else:
            raw = base64.b64decode(self.data)
            array = np.frombuffer(raw, dtype=np.dtype(self.dtype)).copy()
        expected = int(np.prod(self.shape)) if self.shape else 1
        if array.size != expected:
            raise ContractError(f"payload con {array.size} elementos, forma declarada {self.shape}", field="shape")
        return array.reshape(self.shape)


class CameraModel(BaseModel):
    intrinsics: dict = Field(..., description="fx, fy, cx, cy, width, height")
    rotation: List[List[float]] = Field(..., description="Rotación mundo→cámara 3×3")
    translation: List[float] = Field(..., description="Traslación mundo→cámara")

    @classmethod
    def from_camera(cls, K: CameraIntrinsics, E: CameraPose) -> "CameraModel":
        return cls(intrinsics=K.to_dict(), rotation=E.rotation.tolist(), translation=E.translation.tolist())

    def to_camera(self) -> Tuple[CameraIntrinsics, CameraPose]:
        return CameraIntrinsics.from_dict(self.intrinsics), CameraPose(np.array(self.rotation), np.array(self.translation))


# =====================================
# SCHEMAS DE REQUEST (INPUT)
# =====================================

class DepthRequest(ProtocolModel):
    view_id: Optional[str] = Field(None, description="Id de la vista")
    image: ArrayPayload = Field(..., description="Imagen RGB float (H, W, 3)")
    camera_hint: Optional[CameraModel] = Field(None, description="Cámara conocida, si la hay")


class CropModel(BaseModel):
    view_id: str
    box: Tuple[int, int, int, int] = Field(..., description="Caja inclusiva (x0, y0, x1, y1)")
    image: ArrayPayload
    depth: ArrayPayload
    confidence: Optional[ArrayPayload] = None
    camera: CameraModel


class CompleteRequest(ProtocolModel):
    patch_index: int = Field(..., ge=0, description="Índice del parche")
    corner: Tuple[int, int, int] = Field(..., description="Esquina mínima en la rejilla global")
    states: ArrayPayload = Field(..., description="Estados P³ (0 Unknown, 1 Free, 2 Observed)")
    crops: List[CropModel] = Field(default=[], description="Recortes de imagen por vista")
    origin: Tuple[float, float, float]
    pitch: float = Field(..., gt=0)
    prior_colors: Optional[ArrayPayload] = Field(None, description="Color del prior por vóxel (NaN sin puntos)")


class TrajectoryPoseModel(BaseModel):
    azimuth_deg: float
    camera: CameraModel


class SynthesizeRequest(ProtocolModel):
    seed_image: ArrayPayload
    disparity: List[ArrayPayload] = Field(default=[], description="Disparidad normalizada por frame")
    trajectory: List[TrajectoryPoseModel]
    view_ids: List[str]
    size: Tuple[int, int] = Field(..., description="(ancho, alto) de los frames")
    prompt: str = ""
    first_frame_injection: bool = True
    conditioning_scale: float = 0.4
    sampling_steps: int = 50
    guidance_scale: float = 7.5

    @model_validator(mode="after")
    def validate_lengths(self):
        if len(self.view_ids) != len(self.trajectory):
            raise ValueError("view_ids y trajectory deben tener la misma longitud")
        return self


class LossRequest(ProtocolModel):
    frame: ArrayPayload
    target: ArrayPayload


# =====================================
# SCHEMAS DE RESPONSE (OUTPUT)
# =====================================

class DepthResponse(ProtocolModel):
    depth: ArrayPayload = Field(..., description="Profundidad (H, W); NaN = inválida")
    camera: Optional[CameraModel] = None


class CompleteResponse(ProtocolModel):
    occupancy: ArrayPayload = Field(..., description="Ocupación binaria P³")
    colors: Optional[ArrayPayload] = None
    opacity: Optional[ArrayPayload] = None
    scale: Optional[ArrayPayload] = None


class SynthesizeResponse(ProtocolModel):
    frames: List[ArrayPayload] = Field(..., description="Exactamente N frames (H, W, 3)")
    poses: Optional[List[CameraModel]] = None


class LossResponse(ProtocolModel):
    loss: float
    gradient: ArrayPayload


# =====================================
# SCHEMAS DE RESPONSE ESTÁNDAR
# =====================================

class SuccessResponse(BaseModel):
    """Schema estándar para respuestas exitosas"""
    success: bool = Field(True, description="Indica si la operación fue exitosa")
    data: Optional[Any] = Field(None, description="Datos de la respuesta")
    message: Optional[str] = Field(None, description="Mensaje opcional")


class ErrorResponse(BaseModel):
    """Schema estándar para respuestas de error"""
    success: bool = Field(False, description="Indica que la operación falló")
    detail: str = Field(..., description="Detalle del error")
    error_code: Optional[str] = Field(None, description="Código de error opcional")


# =====================================
# CONVERSIÓN DOMINIO ↔ CABLE
# =====================================

def completion_to_wire(request: CompletionRequest, session_dir: Optional[Path] = None) -> CompleteRequest:
    def enc(a):
        return ArrayPayload.encode(a, session_dir)

    return CompleteRequest(
        patch_index=request.patch_index,
        corner=tuple(int(c) for c in request.corner),
        states=enc(request.states),
        crops=[
            CropModel(
                view_id=c.view_id,
                box=c.box,
                image=enc(c.image),
                depth=enc(c.depth),
                confidence=None if c.confidence is None else enc(c.confidence),
                camera=CameraModel.from_camera(c.K, c.E),
            )
            for c in request.crops
        ],
        origin=tuple(float(x) for x in request.origin),
        pitch=request.pitch,
        prior_colors=None if request.prior_colors is None else enc(request.prior_colors),
    )


def completion_from_wire(wire: CompleteRequest, session_dir: Optional[Path] = None) -> CompletionRequest:
    crops = []
    for c in wire.crops:
        K, E = c.camera.to_camera()
        crops.append(
            ImageCrop(
                view_id=c.view_id,
                box=tuple(c.box),
                image=c.image.decode(session_dir),
                depth=c.depth.decode(session_dir),
                K=K,
                E=E,
                confidence=None if c.confidence is None else c.confidence.decode(session_dir),
            )
        )
    return CompletionRequest(
        patch_index=wire.patch_index,
        corner=tuple(wire.corner),
        states=wire.states.decode(session_dir),
        crops=crops,
        origin=np.array(wire.origin),
        pitch=wire.pitch,
        prior_colors=None if wire.prior_colors is None else wire.prior_colors.decode(session_dir),
    )


def completion_response_to_wire(response: CompletionResponse, session_dir: Optional[Path] = None) -> CompleteResponse:
    def enc(a):
        return None if a is None else ArrayPayload.encode(np.asarray(a), session_dir)

    return CompleteResponse(
        occupancy=enc(np.asarray(response.occupancy, dtype=np.uint8)),
        colors=enc(response.colors),
        opacity=enc(response.opacity),
        scale=enc(response.scale),
    )


def completion_response_from_wire(wire: CompleteResponse, session_dir: Optional[Path] = None) -> CompletionResponse:
    def dec(p):
        return None if p is None else p.decode(session_dir)

    return CompletionResponse(
        occupancy=dec(wire.occupancy),
        colors=dec(wire.colors),
        opacity=dec(wire.opacity),
        scale=dec(wire.scale),
    )


def synthesis_to_wire(request: SynthesisRequest, session_dir: Optional[Path] = None) -> SynthesizeRequest:
    return SynthesizeRequest(
        seed_image=ArrayPayload.encode(request.seed_image, session_dir),
        disparity=[ArrayPayload.encode(d.normalized, session_dir) for d in request.disparity],
        trajectory=[
            TrajectoryPoseModel(azimuth_deg=p.azimuth_deg, camera=CameraModel.from_camera(p.K, p.E))
            for p in request.trajectory
        ],
        view_ids=list(request.view_ids),
        size=tuple(request.size),
        prompt=request.prompt,
        first_frame_injection=request.first_frame_injection,
        conditioning_scale=request.conditioning_scale,
        sampling_steps=request.sampling_steps,
        guidance_scale=request.guidance_scale,
    )


def synthesis_from_wire(wire: SynthesizeRequest, session_dir: Optional[Path] = None) -> SynthesisRequest:
    trajectory = []
    for p in wire.trajectory:
        K, E = p.camera.to_camera()
        trajectory.append(TrajectoryPose(p.azimuth_deg, K, E))
    disparity = []
    for d in wire.disparity:
        normalized = d.decode(session_dir)
        disparity.append(DisparityMap(normalized=normalized, raw=np.where(normalized > 0, normalized, np.nan)))
    return SynthesisRequest(
        seed_image=wire.seed_image.decode(session_dir),
        disparity=disparity,
        trajectory=trajectory,
        view_ids=list(wire.view_ids),
        size=tuple(wire.size),
        prompt=wire.prompt,
        first_frame_injection=wire.first_frame_injection,
        conditioning_scale=wire.conditioning_scale,
        sampling_steps=wire.sampling_steps,
        guidance_scale=wire.guidance_scale,
    )


def synthesis_response_to_wire(response: SynthesisResponse, session_dir: Optional[Path] = None) -> SynthesizeResponse:
    return SynthesizeResponse(
        frames=[ArrayPayload.encode(np.asarray(f, dtype=np.float64), session_dir) for f in response.frames],
        poses=None if response.poses is None else [
            CameraModel(intrinsics={}, rotation=E.rotation.tolist(), translation=E.translation.tolist())
            for E in response.poses
        ],
    )


def synthesis_response_from_wire(wire: SynthesizeResponse, session_dir: Optional[Path] = None) -> SynthesisResponse:
    poses = None
    if wire.poses is not None:
        poses = [CameraPose(np.array(p.rotation), np.array(p.translation)) for p in wire.poses]
    return SynthesisResponse(frames=[f.decode(session_dir) for f in wire.frames], poses=poses)
