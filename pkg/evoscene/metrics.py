"""
Métricas de reconstrucción (cobertura, chamfer) y registros por etapa.
"""

from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree

from evoscene.errors import NoDataError
from evoscene.meshing import TexturedMesh


class MetricRecord(BaseModel):
    """Registro de una etapa; sin tiempos de reloj (van a timings.json)."""

    t: int = Field(..., ge=0, description="Iteración")
    stage: str = Field(..., description="Etapa: A, B o C")
    counts: Dict[str, int] = Field(default={}, description="Conteos de puntos, vóxeles y vistas")
    losses: List[float] = Field(default=[], description="Pérdida por paso de optimización")
    filter: Optional[Dict[str, float]] = Field(None, description="Estadísticas del filtro de votación")
    coverage: Optional[float] = Field(None, description="Cobertura contra la escena de referencia")
    extra: Dict[str, Any] = Field(default={})


def _nearest(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    distances, _ = cKDTree(points).query(queries, k=1)
    return distances


def coverage_fraction(points: np.ndarray, reference: np.ndarray, tolerance: float) -> float:
    """
    Fracción de las muestras de referencia a menos de `tolerance` de la reconstrucción.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(reference) == 0:
        raise NoDataError("referencia vacía")
    if len(points) == 0:
        return 0.0
    return float(np.mean(_nearest(points, reference) <= tolerance))


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Distancia chamfer simétrica: promedio de las dos distancias medias al vecino más cercano."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise NoDataError("conjunto de puntos vacío")
    return float(0.5 * (_nearest(b, a).mean() + _nearest(a, b).mean()))


def sample_mesh(mesh: TexturedMesh, n: int, seed: Optional[int] = None) -> np.ndarray:
    """Muestreo uniforme por área sobre los triángulos de la malla."""
    if len(mesh.faces) == 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 3))
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.faces[tri, k]] for k in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
