"""
Configuración del pipeline: presets JSON, archivo de configuración, flags del CLI
y variables de entorno (python-dotenv).

Orden de carga: preset → archivo JSON → flags explícitos.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from evoscene.backends.base import Backends
from evoscene.errors import ConfigError, UsageError

logger = logging.getLogger(__name__)

# Cargar variables de entorno
load_dotenv()

PRESETS_DIR = Path(__file__).resolve().parent.parent / "data" / "presets"
INTERFACES = ("depth", "complete", "synthesize")
ENV_URLS = {
    "depth": "EVOSCENE_DEPTH_URL",
    "complete": "EVOSCENE_COMPLETE_URL",
    "synthesize": "EVOSCENE_SYNTHESIZE_URL",
    "loss": "EVOSCENE_LOSS_URL",
}


def _check_binding(value: Optional[str]) -> Optional[str]:
    if value is None or value == "oracle" or value == "remote":
        return value
    if value.startswith("remote:") and len(value) > len("remote:"):
        return value
    raise ValueError(f"binding inválido '{value}': se espera 'oracle', 'remote' o 'remote:URL'")


class PipelineConfig(BaseModel):
    """Parámetros del ciclo de auto-evolución. Los defaults son las constantes publicadas."""

    model_config = ConfigDict(extra="forbid")

    # Rejilla y parches
    resolution: int = Field(128, ge=2, description="Resolución S de la rejilla (S³ vóxeles)")
    patch_size: int = Field(64, ge=1, description="Tamaño P de parche")
    overlap: int = Field(48, ge=0, description="Solape entre parches en vóxeles")
    bounds_margin: float = Field(0.05, ge=0, description="Margen relativo de la caja de la rejilla")
    carve_epsilon: Optional[float] = Field(None, gt=0, description="Guarda de superficie del tallado (m); None = 1 pitch")
    carve_views: Literal["all", "latest"] = Field("all", description="Vistas usadas para tallar")

    # Calendario
    iterations: int = Field(3, ge=1, description="Número T de iteraciones")
    frames: int = Field(121, ge=2, description="Frames N por trayectoria")
    azimuth_amplitude: float = Field(45.0, gt=0, description="Amplitud A del azimut en grados")
    schedule_table: Optional[List[Tuple[float, float]]] = Field(None, description="Rangos de azimut por iteración")

    # Prior espacial
    depth_tolerance: float = Field(0.1, gt=0, description="Tolerancia de votación en metros")
    min_support: int = Field(3, ge=1, description="Votos mínimos para retener un punto")
    occlusion_margin: float = Field(0.1, ge=0, description="Margen de oclusión para abstenerse")
    confidence_mode: Literal["gradient", "gradient_support"] = Field("gradient")
    confidence_sigma: float = Field(0.5, gt=0, description="Escala del gradiente de profundidad en la confianza")
    bin_size: float = Field(0.05, gt=0, description="Tamaño del bin de fusión en metros")
    fallback_hfov_deg: float = Field(60.0, gt=0, lt=180, description="FOV horizontal si el backend no da intrínsecos")
    voting: bool = Field(True, description="Desactivar sólo para ablaciones")

    # Completado y optimización
    closing_radius: int = Field(2, ge=0, description="Radio del cierre morfológico del oráculo")
    completion_workers: int = Field(1, ge=1, description="Peticiones de completado concurrentes")
    tto_steps: int = Field(5, ge=0, description="Pasos de optimización en tiempo de prueba")
    tto_lr: float = Field(1.0, gt=0, description="Learning rate de la optimización")
    lambda_l1: float = Field(1.0, ge=0)
    lambda_lpips: float = Field(0.0, ge=0)
    lambda_ssim: float = Field(1.0, ge=0)
    optimize_opacity: bool = Field(False)
    render_size: Optional[Tuple[int, int]] = Field(None, description="(ancho, alto) de los renders de optimización")

    # Síntesis
    caption: str = Field("", description="Texto del slot {caption} del prompt")
    first_frame_injection: bool = Field(True)
    conditioning_scale: float = Field(0.4)
    sampling_steps: int = Field(50, ge=1)
    guidance_scale: float = Field(7.5)
    synthesis_size: Optional[Tuple[int, int]] = Field(None, description="(ancho, alto) de los frames; None = tamaño semilla")
    trust_backend_poses: bool = Field(False, description="Usar las poses devueltas por el sintetizador")

    # Backends
    depth_backend: str = Field("oracle", description="oracle | remote | remote:URL")
    complete_backend: str = Field("oracle", description="oracle | remote | remote:URL")
    synthesize_backend: str = Field("oracle", description="oracle | remote | remote:URL")
    loss_backend: Optional[str] = Field(None, description="remote | remote:URL para la pérdida perceptual")
    timeout: float = Field(600.0, gt=0, description="Timeout por llamada en segundos")
    retries: int = Field(3, ge=0)
    depth_noise: float = Field(0.0, ge=0, description="σ del ruido del oráculo de profundidad")
    photometric_noise: float = Field(0.0, ge=0, description="σ del ruido del oráculo de síntesis")

    seed: int = Field(0, description="Semilla de la ejecución")

    @field_validator("depth_backend", "complete_backend", "synthesize_backend", "loss_backend")
    @classmethod
    def validate_binding(cls, v):
        return _check_binding(v)

    @model_validator(mode="after")
    def validate_modules(self):
        if self.patch_size > self.resolution:
            raise ValueError(f"P={self.patch_size} no puede superar S={self.resolution}")
        if self.overlap >= self.patch_size:
            raise ValueError(f"overlap={self.overlap} debe ser menor que P={self.patch_size}")
        if self.lambda_lpips > 0 and self.loss_backend is None:
            raise ValueError("lambda_lpips > 0 requiere loss_backend")
        if self.loss_backend == "oracle":
            raise ValueError("no hay pérdida perceptual oráculo; use remote")
        return self

    @property
    def weights(self) -> Tuple[float, float, float]:
        return (self.lambda_l1, self.lambda_lpips, self.lambda_ssim)

    def bindings(self) -> Dict[str, str]:
        return {name: getattr(self, f"{name}_backend") for name in INTERFACES}

    def uses_oracle(self) -> bool:
        return "oracle" in self.bindings().values()


def _read_json(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"archivo de configuración no encontrado: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON inválido en {path}: {e}")


def load_preset(name: str) -> Dict[str, Any]:
    """Valores de un preset de data/presets/{name}.json (clave `values`)."""
    path = PRESETS_DIR / f"{name}.json"
    if not path.exists():
        available = sorted(p.stem for p in PRESETS_DIR.glob("*.json"))
        raise UsageError(f"preset desconocido '{name}'; disponibles: {available}")
    return dict(_read_json(path).get("values", {}))


def load_config(
    preset: Optional[str] = None,
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> PipelineConfig:
    """
    Combina preset, archivo y flags (en ese orden; los None de `overrides` se ignoran).
    """
    values: Dict[str, Any] = {}
    if preset is not None:
        values.update(load_preset(preset))
    if config_path is not None:
        values.update(_read_json(Path(config_path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return PipelineConfig(**values)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "<config>"
        raise ConfigError(f"configuración inválida en '{field}': {first['msg']}") from e


# =====================================
# MANIFIESTO DE EJECUCIÓN
# =====================================

class RunManifest(BaseModel):
    """Entrada, salida y bindings de una ejecución; se guarda como manifest.json."""

    config_path: Optional[str] = None
    preset: Optional[str] = None
    image: Optional[str] = Field(None, description="Imagen de entrada")
    scene: Optional[str] = Field(None, description="SceneSpec JSON (synthbench)")
    output: str = Field(..., description="Directorio de salida")
    bindings: Dict[str, str] = Field(default={})
    seed: int = 0

    @model_validator(mode="after")
    def validate_manifest(self):
        if (self.image is None) == (self.scene is None):
            raise ValueError("se requiere exactamente una entrada: imagen o escena")
        for name in INTERFACES:
            if name not in self.bindings:
                raise ValueError(f"backend '{name}' sin binding")
            _check_binding(self.bindings[name])
        if self.image is not None and "oracle" in self.bindings.values():
            raise ValueError("los backends oráculo necesitan una escena (--scene)")
        return self


def _remote_url(interface: str, binding: str) -> str:
    if binding.startswith("remote:"):
        return binding[len("remote:"):]
    url = os.getenv(ENV_URLS[interface])
    if not url:
        raise ConfigError(f"backend '{interface}' remoto sin URL: use remote:URL o {ENV_URLS[interface]}")
    return url


def resolve_backends(cfg: PipelineConfig, spec=None) -> Tuple[Backends, Optional[Any]]:
    """
    Construye los backends ligados por la configuración antes de cualquier cómputo.
    Retorna (backends, pérdida perceptual o None).
    """
    from evoscene.backends.oracle import OracleScene, OracleCompleter, OracleDepthEstimator, OracleSynthesizer
    from evoscene.backends.remote import (
        RemoteClient,
        RemoteDepthEstimator,
        RemotePerceptualLoss,
        RemoteSceneCompleter,
        RemoteViewSynthesizer,
        session_dir_from_env,
    )

    if cfg.uses_oracle() and spec is None:
        raise ConfigError("los backends oráculo necesitan una escena de referencia")
    scene = OracleScene(spec) if spec is not None else None
    session_dir = session_dir_from_env()

    def client(interface: str, binding: str) -> RemoteClient:
        return RemoteClient(_remote_url(interface, binding), timeout=cfg.timeout, retries=cfg.retries, session_dir=session_dir)

    b = cfg.bindings()
    depth = (
        OracleDepthEstimator(scene, cfg.depth_noise, cfg.seed)
        if b["depth"] == "oracle"
        else RemoteDepthEstimator(client("depth", b["depth"]), returns_pose=cfg.trust_backend_poses)
    )
    completer = (
        OracleCompleter(cfg.closing_radius)
        if b["complete"] == "oracle"
        else RemoteSceneCompleter(client("complete", b["complete"]))
    )
    synthesizer = (
        OracleSynthesizer(scene, cfg.photometric_noise, cfg.seed)
        if b["synthesize"] == "oracle"
        else RemoteViewSynthesizer(client("synthesize", b["synthesize"]))
    )
    perceptual = None
    if cfg.loss_backend is not None and cfg.lambda_lpips > 0:
        perceptual = RemotePerceptualLoss(client("loss", cfg.loss_backend))
    logger.info("backends ligados", extra={"bindings": b, "perceptual": perceptual is not None})
    return Backends(depth=depth, completer=completer, synthesizer=synthesizer), perceptual
