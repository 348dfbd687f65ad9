import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evoscene.backends.oracle import oracle_backends
from evoscene.config import PipelineConfig
from evoscene.geometry import CameraIntrinsics, look_at
from evoscene.synthbench import load_scene

settings.register_profile(
    "ci",
    max_examples=30,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
    derandomize=True,
    print_blob=True,
)
settings.load_profile("ci")

SCENES_DIR = Path(__file__).resolve().parent.parent / "bench" / "scenes"


# =====================================
# ESCENAS Y CÁMARAS
# =====================================

@pytest.fixture
def scenes_dir() -> Path:
    return SCENES_DIR


@pytest.fixture
def box_path() -> Path:
    return SCENES_DIR / "box.json"


@pytest.fixture
def box_spec(box_path):
    return load_scene(box_path)


@pytest.fixture
def sphere_spec():
    return load_scene(SCENES_DIR / "sphere.json")


@pytest.fixture
def small_camera():
    """Cámara 16×16 mirando al origen desde +Z."""
    K = CameraIntrinsics.from_fov(16, 16, 60.0)
    E = look_at(np.array([0.3, 0.2, 1.0]), np.zeros(3))
    return K, E


@pytest.fixture
def oracle(box_spec):
    return oracle_backends(box_spec)


# =====================================
# CONFIGURACIÓN
# =====================================

def tiny_values(**overrides):
    values = {
        "resolution": 16,
        "patch_size": 8,
        "overlap": 4,
        "iterations": 1,
        "frames": 3,
        "tto_steps": 2,
        "render_size": [32, 32],
    }
    values.update(overrides)
    return values


@pytest.fixture
def tiny_config():
    return PipelineConfig(**tiny_values())


@pytest.fixture
def make_config():
    """Configuración pequeña con valores reemplazables."""
    def factory(**overrides):
        return PipelineConfig(**tiny_values(**overrides))
    return factory


@pytest.fixture(autouse=True)
def restore_logging():
    """El CLI instala su propio handler; se restaura tras cada test."""
    yield
    root = logging.getLogger("evoscene")
    root.handlers[:] = []
    root.propagate = True
    root.setLevel(logging.NOTSET)
