"""
Estado compartido del servidor mock: escena oráculo, backends y directorio de sesión.
"""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from fastapi import Request

from evoscene.backends.base import Backends
from evoscene.backends.oracle import OracleScene, oracle_backends
from evoscene.synthbench import SceneSpec

# Cargar variables de entorno
load_dotenv()


@dataclass
class ServiceState:
    scene: OracleScene
    backends: Backends
    session_dir: Optional[Path] = None


def build_state(
    spec: SceneSpec,
    session_dir: Optional[Path] = None,
    depth_noise: float = 0.0,
    closing_radius: int = 2,
    seed: int = 0,
) -> ServiceState:
    """
    Liga los backends oráculo a la escena. El directorio de sesión sale de
    EVOSCENE_SESSION_DIR si no se pasa explícitamente.
    """
    if session_dir is None and os.getenv("EVOSCENE_SESSION_DIR"):
        session_dir = Path(os.getenv("EVOSCENE_SESSION_DIR"))
    backends = oracle_backends(spec, depth_noise=depth_noise, closing_radius=closing_radius, seed=seed)
    return ServiceState(scene=backends.depth.scene, backends=backends, session_dir=session_dir)


def get_state(request: Request) -> ServiceState:
    """
    Dependency que proporciona el estado del servicio ligado a la app.
    """
    return request.app.state.service
