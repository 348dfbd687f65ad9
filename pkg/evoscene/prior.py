"""
Etapa A: prior espacial 𝒫_t.

Nube de puntos con confianza que crece por iteración: votación geométrica
multivista sobre los candidatos nuevos y fusión por binning espacial con la
nube anterior (la fusión es el único paso con pérdida).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from evoscene.backends.base import DepthEstimate, DepthEstimator
from evoscene.errors import ContractError, GeometryError, NoDataError
from evoscene.geometry import (
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    back_project,
    depth_confidence,
    project_points,
)
from evoscene.views import ViewEntry, ViewSet

logger = logging.getLogger(__name__)

PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
        ("confidence", "<f4"),
        ("support", "<u2"),
    ]
)


# =====================================
# TIPOS DE DOMINIO
# =====================================

@dataclass(eq=False)
class ConfidencePointCloud:
    """
    Puntos de mundo con color, confianza, número de vistas de apoyo y vista de origen.
    """

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    source_view: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="<U64"))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(n)
        self.support = np.asarray(self.support, dtype=np.int64).reshape(n)
        self.source_view = np.asarray(self.source_view, dtype="<U64").reshape(n)
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("posiciones no finitas en la nube")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise GeometryError("confianzas fuera de [0, 1]")
        if np.any(self.support < 1):
            raise GeometryError("support_count debe ser >= 1")

    def __len__(self) -> int:
        return len(self.positions)

    def select(self, index: np.ndarray) -> "ConfidencePointCloud":
        return ConfidencePointCloud(
            self.positions[index],
            self.colors[index],
            self.confidence[index],
            self.support[index],
            self.source_view[index],
        )

    @staticmethod
    def concatenate(*clouds: "ConfidencePointCloud") -> "ConfidencePointCloud":
        return ConfidencePointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.confidence for c in clouds]),
            np.concatenate([c.support for c in clouds]),
            np.concatenate([c.source_view for c in clouds]),
        )

    def weighted_centroid(self) -> np.ndarray:
        """Centroide ponderado por confianza (pivote de las órbitas)."""
        if len(self) == 0:
            raise NoDataError("no prior: la nube está vacía")
        weights = self.confidence if self.confidence.sum() > 0 else np.ones(len(self))
        return (self.positions * weights[:, None]).sum(axis=0) / weights.sum()


@dataclass(frozen=True)
class VotingConfig:
    depth_tolerance: float = 0.1
    min_support: int = 3
    occlusion_margin: float = 0.1
    confidence_mode: str = "gradient"

    def __post_init__(self):
        if not self.depth_tolerance > 0:
            raise GeometryError("depth_tolerance debe ser positivo")
        if self.min_support < 1:
            raise GeometryError("min_support debe ser >= 1")
        if self.occlusion_margin < 0:
            raise GeometryError("occlusion_margin no puede ser negativo")
        if self.confidence_mode not in ("gradient", "gradient_support"):
            raise GeometryError(f"confidence_mode desconocido: {self.confidence_mode}")


@dataclass(eq=False)
class VoteTally:
    """Conteo por candidato: votos, abstenciones (oclusión) y contradicciones."""

    votes: np.ndarray
    abstentions: np.ndarray
    contradictions: np.ndarray

    def summary(self, retained: int) -> Dict[str, float]:
        total = len(self.votes)
        return {
            "candidates": total,
            "retained": retained,
            "retained_fraction": retained / total if total else 0.0,
            "votes": int(self.votes.sum()),
            "abstentions": int(self.abstentions.sum()),
            "contradictions": int(self.contradictions.sum()),
        }


# =====================================
# OPERACIONES
# =====================================

def candidates_from_view(view: ViewEntry, depth: DepthMap, sigma: float = 0.5) -> ConfidencePointCloud:
    """
    Retroproyecta una vista: confianza por gradiente de profundidad, color del
    píxel de origen y support_count = 1.
    """
    lifted = back_project(depth, view.K, view.E)
    us, vs = lifted.pixels[:, 0], lifted.pixels[:, 1]
    confidence = depth_confidence(depth, sigma).values[vs, us]
    return ConfidencePointCloud(
        positions=lifted.points,
        colors=view.image[vs, us],
        confidence=confidence,
        support=np.ones(len(lifted), dtype=np.int64),
        source_view=np.full(len(lifted), view.view_id, dtype="<U64"),
    )


def tally_votes(
    candidates: ConfidencePointCloud,
    views: ViewSet,
    depths: Mapping[str, DepthMap],
    cfg: VotingConfig,
) -> VoteTally:
    """
    Cuenta los votos de cada vista para cada candidato.

    - voto: proyecta dentro de la imagen y |z - d_k| <= depth_tolerance
    - abstención: queda detrás de la superficie almacenada por más de occlusion_margin
    - contradicción: cualquier otro caso con profundidad válida en el píxel
    La vista de origen del candidato siempre vota.
    """
    if len(views) == 0:
        raise NoDataError("no views: la votación necesita al menos una vista")
    missing = set(np.unique(candidates.source_view)) - set(views.ids)
    if missing:
        raise GeometryError(f"candidatos con vista de origen desconocida: {sorted(missing)}")

    n = len(candidates)
    votes = np.zeros(n, dtype=np.int64)
    abstentions = np.zeros(n, dtype=np.int64)
    contradictions = np.zeros(n, dtype=np.int64)
    for view in views:
        own = candidates.source_view == view.view_id
        depth = depths.get(view.view_id)
        if depth is None:
            votes += own
            continue
        pixels, z = project_points(candidates.positions, view.K, view.E)
        stored = depth.sample(pixels[:, 0], pixels[:, 1])
        seen = (z > 0) & np.isfinite(stored)
        diff = z - stored
        agree = seen & (np.abs(diff) <= cfg.depth_tolerance)
        occluded = seen & ~agree & (diff > cfg.occlusion_margin)
        votes += agree | own
        abstentions += occluded & ~own
        contradictions += seen & ~agree & ~occluded & ~own
    return VoteTally(votes, abstentions, contradictions)


def select_supported(candidates: ConfidencePointCloud, tally: VoteTally, cfg: VotingConfig) -> ConfidencePointCloud:
    keep = tally.votes >= cfg.min_support
    kept = candidates.select(keep)
    kept.support = tally.votes[keep].copy()
    if cfg.confidence_mode == "gradient_support":
        decided = tally.votes[keep] + tally.contradictions[keep]
        kept.confidence = kept.confidence * tally.votes[keep] / np.maximum(decided, 1)
    return kept


def multi_view_filter(
    candidates: ConfidencePointCloud,
    views: ViewSet,
    depths: Mapping[str, DepthMap],
    cfg: VotingConfig,
) -> ConfidencePointCloud:
    """
    Filtro de consistencia de profundidad entre vistas.
    Conserva candidatos con votos >= min_support; support_count = votos.
    """
    tally = tally_votes(candidates, views, depths, cfg)
    kept = select_supported(candidates, tally, cfg)
    logger.info("votación multivista", extra=tally.summary(len(kept)))
    return kept


def merge_point_clouds(
    prev: ConfidencePointCloud, new: ConfidencePointCloud, bin_size: float = 0.05
) -> ConfidencePointCloud:
    """
    Une ambas nubes y deja un punto por bin cúbico (floor(posición / bin_size)):
    el de mayor confianza; empates por mayor support_count y luego orden de
    inserción (prev antes que new). La salida se ordena por clave de bin.
    """
    if not bin_size > 0:
        raise GeometryError(f"bin_size debe ser positivo: {bin_size}")
    union = ConfidencePointCloud.concatenate(prev, new)
    if len(union) == 0:
        return union
    keys = np.floor(union.positions / bin_size).astype(np.int64)
    order = np.lexsort(
        (
            np.arange(len(union)),
            -union.support,
            -union.confidence,
            keys[:, 2],
            keys[:, 1],
            keys[:, 0],
        )
    )
    sorted_keys = keys[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
    return union.select(order[first])


def prior_from_estimate(
    image: np.ndarray,
    estimate: DepthEstimate,
    view_id: str = "seed",
    sigma: float = 0.5,
    fallback_hfov_deg: float = 60.0,
) -> Tuple[ConfidencePointCloud, CameraIntrinsics, CameraPose]:
    """
    Si el backend no devuelve intrínsecos se usa un FOV horizontal de respaldo;
    sin pose se usa la identidad.
    """
    height, width = image.shape[:2]
    K = estimate.intrinsics or CameraIntrinsics.from_fov(width, height, fallback_hfov_deg)
    E = estimate.pose or CameraPose.identity()
    view = ViewEntry(view_id=view_id, image=image, K=K, E=E, iteration_of_origin=0)
    cloud = candidates_from_view(view, estimate.depth, sigma)
    logger.info("prior inicial", extra={"points": len(cloud), "view_id": view_id})
    return cloud, K, E


def initial_prior(
    image: np.ndarray,
    depth_backend: DepthEstimator,
    view_id: str = "seed",
    sigma: float = 0.5,
    fallback_hfov_deg: float = 60.0,
) -> Tuple[ConfidencePointCloud, CameraIntrinsics, CameraPose]:
    """
    𝒫₀ a partir de la imagen de entrada: profundidad y cámara del backend,
    retroproyección con confianza por gradiente y colores de la imagen.
    """
    estimate = depth_backend.estimate(image, view_id=view_id)
    if estimate.depth.values.shape != image.shape[:2]:
        raise ContractError(
            f"profundidad {estimate.depth.values.shape} para una imagen {image.shape[:2]}", field="depth.shape"
        )
    return prior_from_estimate(image, estimate, view_id, sigma, fallback_hfov_deg)


# =====================================
# PLY
# =====================================

def encode_ply(cloud: ConfidencePointCloud) -> bytes:
    data = np.empty(len(cloud), dtype=PLY_DTYPE)
    data["x"], data["y"], data["z"] = cloud.positions.T.astype(np.float32)
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    data["red"], data["green"], data["blue"] = rgb.T
    data["confidence"] = cloud.confidence.astype(np.float32)
    data["support"] = np.minimum(cloud.support, np.iinfo(np.uint16).max).astype(np.uint16)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property float confidence\nproperty ushort support\n"
        "end_header\n"
    )
    return header.encode("ascii") + data.tobytes()


def decode_ply(blob: bytes) -> ConfidencePointCloud:
    marker = b"end_header\n"
    end = blob.find(marker)
    if not blob.startswith(b"ply\n") or end < 0:
        raise GeometryError("PLY inválido: cabecera no encontrada")
    header = blob[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise GeometryError("PLY inválido: se espera binary_little_endian")
    count = next(int(line.split()[2]) for line in header if line.startswith("element vertex"))
    data = np.frombuffer(blob, dtype=PLY_DTYPE, count=count, offset=end + len(marker))
    return ConfidencePointCloud(
        positions=np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64),
        colors=np.stack([data["red"], data["green"], data["blue"]], axis=1) / 255.0,
        confidence=np.clip(data["confidence"].astype(np.float64), 0.0, 1.0),
        support=np.maximum(data["support"].astype(np.int64), 1),
        source_view=np.full(count, "", dtype="<U64"),
    )


def write_ply(path: Union[str, Path], cloud: ConfidencePointCloud) -> None:
    Path(path).write_bytes(encode_ply(cloud))


def read_ply(path: Union[str, Path]) -> ConfidencePointCloud:
    return decode_ply(Path(path).read_bytes())


def save_exact(path: Union[str, Path], cloud: ConfidencePointCloud) -> None:
    """Copia exacta (float64) para reanudar desde checkpoint."""
    with open(path, "wb") as handle:
        np.savez(
            handle,
            positions=cloud.positions,
            colors=cloud.colors,
            confidence=cloud.confidence,
            support=cloud.support,
            source_view=cloud.source_view,
        )


def load_exact(path: Union[str, Path]) -> ConfidencePointCloud:
    with np.load(path, allow_pickle=False) as data:
        return ConfidencePointCloud(
            data["positions"], data["colors"], data["confidence"], data["support"], data["source_view"]
        )
