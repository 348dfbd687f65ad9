"""
Escenas sintéticas analíticas: especificación JSON, render de referencia exacto
(trazado de rayos contra primitivas), muestreo de superficie y evaluación de ejecuciones.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from scipy.spatial import cKDTree

from evoscene.errors import ConfigError
from evoscene.geometry import CameraIntrinsics, CameraPose, DepthMap, look_at, pixel_rays

logger = logging.getLogger(__name__)

SCENE_EXTENT_M = 10.0
LIGHT_DIRECTION = np.array([0.4, 0.8, 0.45]) / np.linalg.norm([0.4, 0.8, 0.45])
AMBIENT = 0.55
FACE_NAMES = ("-x", "+x", "-y", "+y", "-z", "+z")

Vec3 = Tuple[float, float, float]


# =====================================
# ESQUEMA DE ESCENA
# =====================================

class TextureSpec(BaseModel):
    """Textura evaluada en forma cerrada sobre coordenadas locales de la primitiva."""

    kind: Literal["solid", "checker", "gradient"] = Field("solid", description="Tipo de textura")
    color: Vec3 = Field((0.8, 0.8, 0.8), description="Color principal RGB en [0, 1]")
    color2: Vec3 = Field((0.2, 0.2, 0.2), description="Color secundario (checker / gradient)")
    cell: float = Field(0.25, gt=0, description="Lado de celda del checker en metros")
    axis: Literal[0, 1, 2] = Field(1, description="Eje local del gradiente")

    @field_validator("color", "color2")
    @classmethod
    def validate_color(cls, v):
        if any(c < 0 or c > 1 for c in v):
            raise ValueError("los colores deben estar en [0, 1]")
        return v


class PrimitiveSpec(BaseModel):
    kind: Literal["box", "sphere", "plane"] = Field(..., description="Tipo de primitiva")
    center: Vec3 = Field(..., description="Centro en metros (mundo)")
    rotation_deg: Vec3 = Field((0.0, 0.0, 0.0), description="Euler XYZ en grados (R = Rz·Ry·Rx)")
    dimensions: List[float] = Field(..., description="box: [sx, sy, sz]; sphere: [r]; plane: [sx, sz]")
    texture: TextureSpec = Field(default_factory=TextureSpec)
    open_faces: List[str] = Field(default=[], description="Caras de caja omitidas (-x, +x, -y, +y, -z, +z)")

    @model_validator(mode="after")
    def validate_dimensions(self):
        expected = {"box": 3, "sphere": 1, "plane": 2}[self.kind]
        if len(self.dimensions) != expected:
            raise ValueError(f"{self.kind} necesita {expected} dimensiones")
        if any(d <= 0 for d in self.dimensions):
            raise ValueError("las dimensiones deben ser positivas")
        unknown = set(self.open_faces) - set(FACE_NAMES)
        if unknown or (self.open_faces and self.kind != "box"):
            raise ValueError(f"caras abiertas inválidas: {sorted(unknown) or self.open_faces}")
        return self

    @property
    def rotation(self) -> np.ndarray:
        rx, ry, rz = (math.radians(a) for a in self.rotation_deg)
        cx, sx, cy, sy, cz, sz = math.cos(rx), math.sin(rx), math.cos(ry), math.sin(ry), math.cos(rz), math.sin(rz)
        Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return Rz @ Ry @ Rx

    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return self.dimensions[0]
        return 0.5 * float(np.linalg.norm(self.dimensions))


class CameraSpec(BaseModel):
    width: int = Field(64, ge=2, description="Ancho de imagen en píxeles")
    height: int = Field(64, ge=2, description="Alto de imagen en píxeles")
    hfov_deg: float = Field(60.0, gt=0, lt=180, description="Campo de visión horizontal")
    eye: Vec3 = Field(..., description="Posición de la cámara semilla")
    target: Vec3 = Field((0.0, 0.0, 0.0), description="Punto observado")

    def camera(self) -> Tuple[CameraIntrinsics, CameraPose]:
        K = CameraIntrinsics.from_fov(self.width, self.height, self.hfov_deg)
        return K, look_at(np.array(self.eye), np.array(self.target))


class SceneSpec(BaseModel):
    """Escena paramétrica con cámara semilla y semilla aleatoria."""

    name: str = Field(..., description="Nombre de la escena")
    description: str = Field("", description="Descripción libre")
    primitives: List[PrimitiveSpec] = Field(..., description="Primitivas (al menos una)")
    camera: CameraSpec = Field(..., description="Cámara semilla")
    seed: int = Field(0, description="Semilla para ruido y muestreo")
    shading: bool = Field(True, description="Sombreado lambertiano fijo por normal")

    @model_validator(mode="after")
    def validate_scene(self):
        if not self.primitives:
            raise ValueError("la escena necesita al menos una primitiva")
        centers = np.array([p.center for p in self.primitives])
        radii = np.array([p.bounding_radius() for p in self.primitives])
        span = (centers + radii[:, None]).max(axis=0) - (centers - radii[:, None]).min(axis=0)
        if np.any(span > SCENE_EXTENT_M):
            raise ValueError(f"las primitivas exceden la región de {SCENE_EXTENT_M} m")
        return self

    def seed_camera(self) -> Tuple[CameraIntrinsics, CameraPose]:
        return self.camera.camera()


def load_scene(path: Union[str, Path]) -> SceneSpec:
    try:
        return SceneSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "<scene>"
        raise ConfigError(f"escena inválida {path} en '{field}': {first['msg']}") from e


# =====================================
# GEOMETRÍA ANALÍTICA
# =====================================

@dataclass(frozen=True, eq=False)
class _Rect:
    center: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    v: np.ndarray
    hu: float
    hv: float
    primitive: int
    face: int


def _surfaces(spec: SceneSpec) -> Tuple[List[_Rect], List[int]]:
    rects, spheres = [], []
    for index, prim in enumerate(spec.primitives):
        R = prim.rotation
        c = np.asarray(prim.center, dtype=np.float64)
        if prim.kind == "sphere":
            spheres.append(index)
        elif prim.kind == "plane":
            sx, sz = prim.dimensions
            rects.append(_Rect(c, R[:, 1], R[:, 0], R[:, 2], sx / 2, sz / 2, index, 0))
        else:
            half = np.asarray(prim.dimensions) / 2.0
            for face, name in enumerate(FACE_NAMES):
                if name in prim.open_faces:
                    continue
                axis = "xyz".index(name[1])
                sign = 1.0 if name[0] == "+" else -1.0
                others = [a for a in range(3) if a != axis]
                rects.append(
                    _Rect(
                        c + sign * half[axis] * R[:, axis],
                        sign * R[:, axis],
                        R[:, others[0]],
                        R[:, others[1]],
                        half[others[0]],
                        half[others[1]],
                        index,
                        face,
                    )
                )
    return rects, spheres


def _intersect_rect(rect: _Rect, origin: np.ndarray, dirs: np.ndarray):
    denom = dirs @ rect.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.dot(rect.center - origin, rect.normal) / denom
        p = origin + t[:, None] * dirs - rect.center
        a = p @ rect.u
        b = p @ rect.v
        hit = (np.abs(denom) > 1e-15) & (t > 1e-9) & (np.abs(a) <= rect.hu) & (np.abs(b) <= rect.hv)
    return np.where(hit, t, np.inf), a, b


def _intersect_sphere(center: np.ndarray, radius: float, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    oc = origin - center
    qa = np.einsum("ij,ij->i", dirs, dirs)
    qb = dirs @ oc
    qc = float(oc @ oc) - radius * radius
    disc = qb * qb - qa * qc
    ok = disc >= 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    # raíces estables: q = -(b + sign(b)·√disc)
    q = -(qb + np.where(qb >= 0, root, -root))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = q / qa
        t2 = np.where(q != 0, qc / q, np.inf)
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    t = np.where(lo > 1e-9, lo, np.where(hi > 1e-9, hi, np.inf))
    return np.where(ok, t, np.inf)


def _texture(tex: TextureSpec, coords: np.ndarray, extent: np.ndarray, face: int) -> np.ndarray:
    """coords: (N, k) coordenadas locales centradas; extent: tamaño por coordenada."""
    c1 = np.asarray(tex.color, dtype=np.float64)
    c2 = np.asarray(tex.color2, dtype=np.float64)
    if tex.kind == "solid":
        return np.broadcast_to(c1, (len(coords), 3)).copy()
    if tex.kind == "checker":
        cells = np.floor((coords + extent / 2.0) / tex.cell).astype(np.int64).sum(axis=1) + face
        return np.where((cells % 2 == 0)[:, None], c1, c2)
    axis = min(tex.axis, coords.shape[1] - 1)
    s = np.clip(coords[:, axis] / extent[axis] + 0.5, 0.0, 1.0)
    return (1 - s)[:, None] * c1 + s[:, None] * c2


def _shade(normals: np.ndarray, to_eye: np.ndarray) -> np.ndarray:
    facing = np.where((np.einsum("ij,ij->i", normals, to_eye) < 0)[:, None], -normals, normals)
    return AMBIENT + (1 - AMBIENT) * np.clip(facing @ LIGHT_DIRECTION, 0.0, None)


def render_gt(
    spec: SceneSpec, K: CameraIntrinsics, E: CameraPose, size: Optional[Tuple[int, int]] = None
) -> Tuple[np.ndarray, DepthMap]:
    """
    Trazado de rayos exacto contra las primitivas (impacto más cercano).

    Retorna:
    - imagen RGB (H, W, 3) en [0, 1], fondo negro
    - profundidad exacta (Z de cámara); fondo inválido
    """
    if size is not None and tuple(size) != (K.width, K.height):
        K = K.scaled(*size)
    origin, dirs = pixel_rays(K, E)
    n = len(dirs)
    best_t = np.full(n, np.inf)
    rgb = np.zeros((n, 3))
    rects, spheres = _surfaces(spec)

    for rect in rects:
        t, a, b = _intersect_rect(rect, origin, dirs)
        closer = t < best_t
        if not closer.any():
            continue
        best_t[closer] = t[closer]
        prim = spec.primitives[rect.primitive]
        coords = np.stack([a[closer], b[closer]], axis=1)
        color = _texture(prim.texture, coords, np.array([2 * rect.hu, 2 * rect.hv]), rect.face)
        if spec.shading:
            normals = np.broadcast_to(rect.normal, (len(coords), 3))
            color = color * _shade(normals, -dirs[closer])[:, None]
        rgb[closer] = color

    for index in spheres:
        prim = spec.primitives[index]
        center = np.asarray(prim.center, dtype=np.float64)
        radius = prim.dimensions[0]
        t = _intersect_sphere(center, radius, origin, dirs)
        closer = t < best_t
        if not closer.any():
            continue
        best_t[closer] = t[closer]
        p = origin + t[closer, None] * dirs[closer]
        normal = (p - center) / radius
        local = normal @ prim.rotation
        if prim.texture.kind == "checker":
            lon = np.arctan2(local[:, 2], local[:, 0]) * radius
            lat = np.arcsin(np.clip(local[:, 1], -1.0, 1.0)) * radius
            coords = np.stack([lon, lat], axis=1)
            extent = np.array([2 * math.pi * radius, math.pi * radius])
        else:
            coords = local * radius
            extent = np.full(3, 2 * radius)
        color = _texture(prim.texture, coords, extent, 0)
        if spec.shading:
            color = color * _shade(normal, origin - p)[:, None]
        rgb[closer] = color

    image = np.clip(rgb, 0.0, 1.0).reshape(K.height, K.width, 3)
    return image, DepthMap.from_array(best_t.reshape(K.height, K.width))


def surface_distance(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Distancia analítica de cada punto a la superficie más cercana de la escena."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(points), np.inf)
    rects, spheres = _surfaces(spec)
    for rect in rects:
        p = points - rect.center
        da = np.maximum(np.abs(p @ rect.u) - rect.hu, 0.0)
        db = np.maximum(np.abs(p @ rect.v) - rect.hv, 0.0)
        dn = p @ rect.normal
        best = np.minimum(best, np.sqrt(da * da + db * db + dn * dn))
    for index in spheres:
        prim = spec.primitives[index]
        d = np.abs(np.linalg.norm(points - np.asarray(prim.center), axis=1) - prim.dimensions[0])
        best = np.minimum(best, d)
    return best


def surface_area(spec: SceneSpec) -> float:
    rects, spheres = _surfaces(spec)
    area = sum(4 * r.hu * r.hv for r in rects)
    area += sum(4 * math.pi * spec.primitives[i].dimensions[0] ** 2 for i in spheres)
    return float(area)


def sample_surface(spec: SceneSpec, n: int = 10000, seed: Optional[int] = None, oversample: int = 8) -> np.ndarray:
    """
    n puntos sobre la superficie de referencia con distribución tipo disco de
    Poisson: candidatos uniformes por área y eliminación voraz por radio.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    rects, spheres = _surfaces(spec)
    areas = [4 * r.hu * r.hv for r in rects] + [4 * math.pi * spec.primitives[i].dimensions[0] ** 2 for i in spheres]
    total = float(sum(areas))
    m = n * oversample
    counts = rng.multinomial(m, np.asarray(areas) / total)
    parts = []
    for rect, count in zip(rects, counts[: len(rects)]):
        a = rng.uniform(-rect.hu, rect.hu, count)
        b = rng.uniform(-rect.hv, rect.hv, count)
        parts.append(rect.center + a[:, None] * rect.u + b[:, None] * rect.v)
    for index, count in zip(spheres, counts[len(rects):]):
        prim = spec.primitives[index]
        g = rng.normal(size=(count, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        parts.append(np.asarray(prim.center) + prim.dimensions[0] * g)
    candidates = np.concatenate(parts)
    candidates = candidates[rng.permutation(len(candidates))]

    radius = 0.7 * math.sqrt(total / n)
    neighbors = cKDTree(candidates).query_ball_point(candidates, radius)
    removed = np.zeros(len(candidates), dtype=bool)
    accepted = []
    for i in range(len(candidates)):
        if removed[i]:
            continue
        accepted.append(i)
        removed[neighbors[i]] = True
        if len(accepted) == n:
            break
    if len(accepted) < n:
        rest = np.setdiff1d(np.arange(len(candidates)), accepted)[: n - len(accepted)]
        accepted.extend(rest.tolist())
    return candidates[np.asarray(accepted[:n])]


# =====================================
# EVALUACIÓN
# =====================================

def evaluate(run_dir: Union[str, Path], spec: SceneSpec, samples: int = 10000) -> Dict[str, Any]:
    """
    Reporte de una ejecución contra la escena analítica: cobertura por iteración,
    chamfer de la malla final, bandera de estanqueidad y curvas de pérdida.
    Se escribe en `evaluation.json` dentro del directorio de la ejecución.
    """
    from evoscene.checkpoints import RunLayout
    from evoscene.meshing import read_glb
    from evoscene.metrics import chamfer, coverage_fraction, sample_mesh

    layout = RunLayout(Path(run_dir))
    reference = sample_surface(spec, samples)
    report = layout.read_report()
    pitch = report.get("pitch")
    if pitch is None:
        raise ValueError("el reporte de la ejecución no tiene pitch")
    tolerance = 2.0 * pitch

    coverage = []
    for t in layout.iterations():
        points = layout.reconstruction_points(t)
        coverage.append(
            {"t": t, "coverage": coverage_fraction(points, reference, tolerance) if len(points) else 0.0}
        )

    mesh = read_glb(layout.glb_path.read_bytes())
    mesh_samples = sample_mesh(mesh, samples, seed=spec.seed)
    result = {
        "scene": spec.name,
        "coverage": coverage,
        "mesh_coverage": coverage_fraction(mesh_samples, reference, tolerance) if len(mesh_samples) else 0.0,
        "chamfer": chamfer(mesh_samples, reference) if len(mesh_samples) else None,
        "watertight": mesh.is_watertight(),
        "pitch": pitch,
        "loss_curves": report.get("loss_curves", {}),
    }
    (Path(run_dir) / "evaluation.json").write_text(json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("evaluación", extra={"scene": spec.name, "chamfer": result["chamfer"], "watertight": result["watertight"]})
    return result


# =====================================
# CRITERIOS PAREADOS
# =====================================

def inject_outliers(
    cloud,
    camera_center: np.ndarray,
    fraction: float = 0.2,
    displacement: Tuple[float, float] = (0.5, 0.6),
    seed: int = 0,
):
    """
    Acerca a la cámara, a lo largo de su rayo, una fracción de los puntos de la nube.
    El desplazamiento se sortea uniforme en [mínimo, máximo] metros.

    Retorna:
    - la nube con los outliers
    - máscara booleana de los puntos desplazados
    """
    if not 0 <= fraction <= 1:
        raise ConfigError(f"fracción de outliers fuera de [0, 1]: {fraction}")
    if not 0 < displacement[0] <= displacement[1]:
        raise ConfigError(f"desplazamiento inválido: {displacement}")
    rng = np.random.default_rng(seed)
    n = len(cloud)
    chosen = rng.choice(n, size=int(round(fraction * n)), replace=False)
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True

    noisy = cloud.select(np.arange(n))
    rays = noisy.positions[mask] - camera_center
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    noisy.positions[mask] -= rays * rng.uniform(displacement[0], displacement[1], size=(len(chosen), 1))
    return noisy, mask


def voting_efficacy(
    spec: SceneSpec,
    voting=None,
    outlier_fraction: float = 0.2,
    displacement: Tuple[float, float] = (0.5, 0.6),
    frames: int = 9,
    amplitude: float = 45.0,
) -> Dict[str, Any]:
    """
    Filtro de votación sobre los puntos de la vista semilla con outliers inyectados.
    Vota contra las dos órbitas [0, +A] y [0, -A] alrededor del objetivo de la
    cámara, sin los frames de azimut 0, con profundidades exactas.
    """
    from evoscene.prior import VotingConfig, candidates_from_view, tally_votes
    from evoscene.trajectory import OrbitSpec, orbital_trajectory
    from evoscene.views import ViewEntry, ViewSet

    voting = voting or VotingConfig()
    K, E = spec.seed_camera()
    image, depth = render_gt(spec, K, E)
    seed_view = ViewEntry("seed", image, K, E)
    views = [seed_view]
    depths = {"seed": depth}

    center = np.asarray(spec.camera.target, dtype=np.float64)
    radius = float(np.linalg.norm(E.center - center))
    for name, sign in (("pos", 1.0), ("neg", -1.0)):
        orbit = OrbitSpec(center, radius, E, K, (0.0, sign * amplitude), frames)
        for k, pose in enumerate(orbital_trajectory(orbit)[1:], start=1):
            view_id = f"{name}_f{k:03d}"
            frame, frame_depth = render_gt(spec, pose.K, pose.E)
            views.append(ViewEntry(view_id, frame, pose.K, pose.E))
            depths[view_id] = frame_depth

    candidates = candidates_from_view(seed_view, depth)
    noisy, outliers = inject_outliers(candidates, E.center, outlier_fraction, displacement, spec.seed)
    tally = tally_votes(noisy, ViewSet(views), depths, voting)
    kept = tally.votes >= voting.min_support

    result = {
        "scene": spec.name,
        "views": len(views),
        "candidates": len(noisy),
        "outliers": int(outliers.sum()),
        "outliers_removed": float(np.mean(~kept[outliers])) if outliers.any() else 1.0,
        "inliers_retained": float(np.mean(kept[~outliers])) if (~outliers).any() else 1.0,
    }
    logger.info("eficacia de la votación", extra=result)
    return result


def paired_ablation(
    spec: SceneSpec,
    cfg,
    out_dir: Union[str, Path],
    variants: Dict[str, Dict[str, Any]],
    seeds: Sequence[int] = (0,),
    samples: int = 10000,
) -> Dict[str, Any]:
    """
    Ejecuta cada variante de la configuración con las mismas semillas y evalúa el
    chamfer de la malla final. Una malla vacía cuenta como chamfer infinito.
    Cada ejecución queda en out_dir/{variante}_s{semilla}.
    """
    from evoscene.config import PipelineConfig
    from evoscene.pipeline import run

    base = cfg.model_dump(mode="json")
    chamfers: Dict[str, List[float]] = {name: [] for name in variants}
    for seed in seeds:
        for name, overrides in variants.items():
            variant_cfg = PipelineConfig(**{**base, **overrides, "seed": seed})
            run_dir = Path(out_dir) / f"{name}_s{seed}"
            run(variant_cfg, run_dir, spec=spec)
            value = evaluate(run_dir, spec, samples)["chamfer"]
            chamfers[name].append(float("inf") if value is None else value)
    return {
        name: {"seeds": list(seeds), "chamfer": values, "median": float(np.median(values))}
        for name, values in chamfers.items()
    }


def voting_ablation(
    spec: SceneSpec,
    cfg,
    out_dir: Union[str, Path],
    seeds: Sequence[int] = tuple(range(10)),
    depth_noise: float = 0.05,
    samples: int = 10000,
) -> Dict[str, Any]:
    """
    Votación activada frente a desactivada bajo ruido de profundidad, mismas semillas.
    `voting_wins`: la mediana del chamfer con votación es estrictamente menor.
    """
    variants = paired_ablation(
        spec,
        cfg,
        out_dir,
        {
            "voting_on": {"voting": True, "depth_noise": depth_noise},
            "voting_off": {"voting": False, "depth_noise": depth_noise},
        },
        seeds,
        samples,
    )
    wins = variants["voting_on"]["median"] < variants["voting_off"]["median"]
    logger.info("ablación de votación", extra={"scene": spec.name, "voting_wins": wins})
    return {"scene": spec.name, "depth_noise": depth_noise, "variants": variants, "voting_wins": wins}


def iteration_ablation(
    spec: SceneSpec,
    cfg,
    out_dir: Union[str, Path],
    iterations: int = 2,
    seeds: Sequence[int] = (0,),
    depth_noise: float = 0.0,
    samples: int = 10000,
) -> Dict[str, Any]:
    """
    T iteraciones frente a una sola, mismas semillas.
    `multi_wins`: la mediana del chamfer con T iteraciones no es mayor.
    """
    if iterations < 2:
        raise ConfigError(f"la ablación necesita al menos 2 iteraciones: {iterations}")
    variants = paired_ablation(
        spec,
        cfg,
        out_dir,
        {
            "multi": {"iterations": iterations, "depth_noise": depth_noise},
            "single": {"iterations": 1, "depth_noise": depth_noise},
        },
        seeds,
        samples,
    )
    wins = variants["multi"]["median"] <= variants["single"]["median"]
    logger.info("ablación de iteraciones", extra={"scene": spec.name, "multi_wins": wins})
    return {"scene": spec.name, "iterations": iterations, "variants": variants, "multi_wins": wins}
