"""
Etapa B, mitad generativa: completado de estructura con la restricción de
vóxeles observados, latentes de apariencia por vóxel, fusión de parches y la
optimización fotométrica en tiempo de prueba.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree
from skimage.transform import resize

from evoscene.backends.base import CompletionRequest, CompletionResponse, SceneCompleter
from evoscene.errors import BackendError, ConfigError, ContractError, EvoSceneError, GeometryError, NoDataError, OptimizationError
from evoscene.frames import sample_bilinear
from evoscene.occupancy import OccupancyGrid, PatchSet, VoxelState
from evoscene.prior import ConfidencePointCloud
from evoscene.rendering import (
    SplatRaster,
    color_gradient,
    compose,
    loss_l1,
    loss_ssim,
    opacity_gradient,
    photometric_gradient,
    rasterize,
)
from evoscene.views import ViewSet

logger = logging.getLogger(__name__)

GRAY = 0.5
MIN_OPACITY = 1e-3
MAX_HALVINGS = 10

PerceptualLoss = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


# =====================================
# LATENTE DE ESCENA
# =====================================

@dataclass(eq=False)
class SceneLatent:
    """
    Atributos explícitos por vóxel ocupado (color, opacidad, escala en metros),
    con la geometría de la rejilla de origen. `textured` marca los vóxeles cuyo
    color viene de alguna observación.
    """

    indices: np.ndarray
    colors: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    origin: np.ndarray
    pitch: float
    resolution: int
    textured: Optional[np.ndarray] = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        n = len(self.indices)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.textured = (
            np.ones(n, dtype=bool) if self.textured is None else np.asarray(self.textured, dtype=bool).reshape(n)
        )
        if not (np.all(np.isfinite(self.colors)) and np.all(np.isfinite(self.opacity)) and np.all(np.isfinite(self.scale))):
            raise GeometryError("atributos de latente no finitos")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise GeometryError("colores de latente fuera de [0, 1]")
        if np.any(self.opacity <= 0) or np.any(self.opacity > 1):
            raise GeometryError("opacidades de latente fuera de (0, 1]")
        if np.any(self.scale <= 0):
            raise GeometryError("escalas de latente deben ser positivas")
        if n and (self.indices.min() < 0 or self.indices.max() >= self.resolution):
            raise GeometryError("índices de latente fuera de la rejilla")

    def __len__(self) -> int:
        return len(self.indices)

    def centers(self) -> np.ndarray:
        return self.origin + (self.indices + 0.5) * self.pitch

    def copy(self) -> "SceneLatent":
        return SceneLatent(
            self.indices.copy(), self.colors.copy(), self.opacity.copy(), self.scale.copy(),
            self.origin.copy(), self.pitch, self.resolution, self.textured.copy(),
        )

    def with_attributes(self, colors: Optional[np.ndarray] = None, opacity: Optional[np.ndarray] = None) -> "SceneLatent":
        latent = self.copy()
        if colors is not None:
            latent.colors = np.asarray(colors, dtype=np.float64).reshape(len(self), 3)
        if opacity is not None:
            latent.opacity = np.asarray(opacity, dtype=np.float64).reshape(len(self))
        return latent

    def check_against(self, grid: OccupancyGrid) -> None:
        """Cada índice debe estar ocupado en la rejilla (Observed o completado)."""
        occ = grid.occupancy
        if len(self) and not np.all(occ[self.indices[:, 0], self.indices[:, 1], self.indices[:, 2]]):
            raise GeometryError("el latente contiene vóxeles no ocupados en la rejilla")

    @classmethod
    def from_grid(cls, grid: OccupancyGrid, color: float = GRAY) -> "SceneLatent":
        """Latente uniforme sobre la ocupación de la rejilla."""
        indices = np.argwhere(grid.occupancy)
        n = len(indices)
        return cls(
            indices, np.full((n, 3), color), np.ones(n), np.full(n, grid.pitch),
            grid.origin, grid.pitch, grid.resolution, np.zeros(n, dtype=bool),
        )


def save_latent(path: Union[str, Path], latent: SceneLatent) -> None:
    with open(Path(path), "wb") as handle:
        np.savez(
            handle,
            indices=latent.indices,
            colors=latent.colors,
            opacity=latent.opacity,
            scale=latent.scale,
            origin=latent.origin,
            pitch=np.array(latent.pitch),
            resolution=np.array(latent.resolution),
            textured=latent.textured,
        )


def load_latent(path: Union[str, Path]) -> SceneLatent:
    with np.load(Path(path)) as data:
        return SceneLatent(
            data["indices"], data["colors"], data["opacity"], data["scale"],
            data["origin"], float(data["pitch"]), int(data["resolution"]), data["textured"],
        )


# =====================================
# COMPLETADO DE ESTRUCTURA
# =====================================

@dataclass(eq=False)
class PatchLatent:
    """Respuesta validada de un parche: ocupación y atributos densos P³."""

    index: int
    corner: Tuple[int, int, int]
    occupancy: np.ndarray
    colors: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    textured: np.ndarray

    def slices(self) -> Tuple[slice, slice, slice]:
        size = self.occupancy.shape[0]
        return tuple(slice(c, c + size) for c in self.corner)


def voxel_colors(grid: OccupancyGrid, cloud: ConfidencePointCloud) -> np.ndarray:
    """Color medio ponderado por confianza de los puntos de cada vóxel; NaN sin puntos."""
    S = grid.resolution
    out = np.full((S, S, S, 3), np.nan)
    if len(cloud) == 0:
        return out
    idx = grid.index_of(cloud.positions)
    inside = np.all((idx >= 0) & (idx < S), axis=1)
    idx = idx[inside]
    flat = np.ravel_multi_index(idx.T, (S, S, S))
    weights = np.maximum(cloud.confidence[inside], 1e-12)
    den = np.bincount(flat, weights=weights, minlength=S**3)
    colors = out.reshape(-1, 3)
    hit = den > 0
    for c in range(3):
        num = np.bincount(flat, weights=weights * cloud.colors[inside, c], minlength=S**3)
        colors[hit, c] = num[hit] / den[hit]
    return out


def _validate_response(request: CompletionRequest, response: CompletionResponse, pitch: float) -> PatchLatent:
    size = request.states.shape
    occupancy = np.asarray(response.occupancy)
    if occupancy.shape != size:
        raise ContractError(
            f"parche {request.patch_index}: ocupación con forma {occupancy.shape}, se esperaba {size}",
            field="occupancy", patch_index=request.patch_index,
        )
    if not np.all((occupancy == 0) | (occupancy == 1)):
        raise ContractError(
            f"parche {request.patch_index}: ocupación no binaria",
            field="occupancy", patch_index=request.patch_index,
        )
    occupancy = occupancy.astype(bool)
    if not np.all(occupancy[request.clamp_mask]):
        lost = int(np.count_nonzero(request.clamp_mask & ~occupancy))
        raise ContractError(
            f"parche {request.patch_index}: {lost} vóxeles observados vaciados por el backend",
            field="occupancy", patch_index=request.patch_index,
        )

    def attribute(name: str, value, shape, default: float) -> np.ndarray:
        if value is None:
            return np.full(shape, default)
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != shape or not np.all(np.isfinite(arr)):
            raise ContractError(
                f"parche {request.patch_index}: atributo {name} inválido",
                field=name, patch_index=request.patch_index,
            )
        return arr

    colors = np.clip(attribute("colors", response.colors, size + (3,), GRAY), 0.0, 1.0)
    opacity = np.clip(attribute("opacity", response.opacity, size, 1.0), MIN_OPACITY, 1.0)
    scale = attribute("scale", response.scale, size, pitch)
    if np.any(scale[occupancy] <= 0):
        raise ContractError(f"parche {request.patch_index}: escala no positiva", field="scale", patch_index=request.patch_index)
    textured = np.ones(size, dtype=bool) if response.colors is not None else np.zeros(size, dtype=bool)
    return PatchLatent(request.patch_index, request.corner, occupancy, colors, opacity, scale, textured)


def build_requests(
    grid: OccupancyGrid, patches: PatchSet, prior_colors: Optional[np.ndarray] = None
) -> List[CompletionRequest]:
    requests = []
    for patch in patches:
        colors = None if prior_colors is None else prior_colors[patch.slices()].copy()
        requests.append(
            CompletionRequest(
                patch_index=patch.index,
                corner=patch.corner,
                states=patch.states,
                crops=patch.crops,
                origin=grid.origin,
                pitch=grid.pitch,
                prior_colors=colors,
            )
        )
    return requests


def complete_structure(
    grid: OccupancyGrid,
    patches: PatchSet,
    backend: SceneCompleter,
    cloud: Optional[ConfidencePointCloud] = None,
    workers: int = 1,
) -> Tuple[OccupancyGrid, List[PatchLatent]]:
    """
    Envía cada parche al backend, valida la restricción de vóxeles observados y
    fusiona las ocupaciones por mayoría (empates → ocupado).

    Retorna:
    - la rejilla con `occupied` = Ô₀ (Free nunca ocupado, Observed siempre ocupado)
    - los latentes validados de cada parche, en orden de parche
    """
    requests = build_requests(grid, patches, None if cloud is None else voxel_colors(grid, cloud))

    def call(request: CompletionRequest) -> PatchLatent:
        try:
            response = backend.complete(request)
        except EvoSceneError as exc:
            if isinstance(exc, ContractError) and exc.patch_index is None:
                exc.patch_index = request.patch_index
            raise
        except Exception as exc:
            raise BackendError(f"parche {request.patch_index}: fallo del completador: {exc}") from exc
        return _validate_response(request, response, grid.pitch)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(call, requests))
    else:
        results = [call(r) for r in requests]

    S = grid.resolution
    votes = np.zeros((S, S, S), dtype=np.int64)
    for result in results:
        votes[result.slices()] += result.occupancy
    counts = patches.coverage_counts()
    occupied = (2 * votes >= counts) & (counts > 0)
    occupied &= grid.states != VoxelState.FREE
    occupied |= grid.states == VoxelState.OBSERVED

    completed = grid.copy()
    completed.occupied = occupied
    logger.info(
        "estructura completada",
        extra={
            "patches": len(results),
            "observed": grid.count(VoxelState.OBSERVED),
            "occupied": int(np.count_nonzero(occupied)),
        },
    )
    return completed, results


def oracle_complete(
    request: CompletionRequest,
    radius: int = 2,
    depth_tolerance: Optional[float] = None,
) -> CompletionResponse:
    """
    Completador local determinista: cierre morfológico 6-conexo de radio r sobre
    el conjunto observado, restringido a vóxeles Unknown (Free no se mueve).

    Color de cada vóxel ocupado: color del prior si existe; si no, media ponderada
    por confianza de los recortes que pasan el test de profundidad; gris 0.5 si
    ninguno lo ve. Opacidad 1 y escala = pitch.
    """
    states = request.states
    observed = states == VoxelState.OBSERVED
    free = states == VoxelState.FREE
    structure = generate_binary_structure(3, 1)
    grown = observed.copy()
    for _ in range(radius):
        grown = binary_dilation(grown, structure) & ~free
    closed = binary_erosion(grown, structure, iterations=radius, border_value=1) if radius > 0 else grown
    occupancy = observed | (closed & (states == VoxelState.UNKNOWN))

    tolerance = 2.0 * request.pitch if depth_tolerance is None else depth_tolerance
    centers = request.voxel_centers()
    colors, seen = _sample_crop_colors(request, centers, tolerance)
    colors = colors.reshape(states.shape + (3,))
    seen = seen.reshape(states.shape)
    if request.prior_colors is not None:
        prior = np.asarray(request.prior_colors, dtype=np.float64)
        known = np.all(np.isfinite(prior), axis=-1)
        colors[known] = prior[known]
        seen |= known
    colors[~seen] = GRAY
    return CompletionResponse(
        occupancy=occupancy.astype(np.uint8),
        colors=np.clip(colors, 0.0, 1.0),
        opacity=np.ones(states.shape),
        scale=np.full(states.shape, request.pitch),
    )


def _sample_crop_colors(request: CompletionRequest, centers: np.ndarray, tolerance: float) -> Tuple[np.ndarray, np.ndarray]:
    num = np.zeros((len(centers), 3))
    den = np.zeros(len(centers))
    for crop in request.crops:
        u, v, z = crop.project(centers)
        h, w = crop.image.shape[:2]
        with np.errstate(invalid="ignore"):
            inside = (z > 0) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        if not inside.any():
            continue
        ui = np.rint(u[inside]).astype(np.int64)
        vi = np.rint(v[inside]).astype(np.int64)
        stored = crop.depth[vi, ui]
        with np.errstate(invalid="ignore"):
            visible = np.abs(z[inside] - stored) <= tolerance
        if not visible.any():
            continue
        rows = np.flatnonzero(inside)[visible]
        weight = np.ones(len(rows)) if crop.confidence is None else crop.confidence[vi[visible], ui[visible]]
        num[rows] += weight[:, None] * sample_bilinear(crop.image, u[rows], v[rows])
        den[rows] += weight
    seen = den > 0
    colors = np.full((len(centers), 3), GRAY)
    colors[seen] = num[seen] / den[seen, None]
    return colors, seen


# =====================================
# FUSIÓN DE PARCHES
# =====================================

def hat_window(size: int) -> np.ndarray:
    """Ventana trilineal P³: producto de tres sombreros 1D, positiva en todo el parche."""
    i = np.arange(size)
    hat = np.minimum(i + 1, size - i).astype(np.float64)
    return hat[:, None, None] * hat[None, :, None] * hat[None, None, :]


def blend_weight_sums(patches: Sequence[PatchLatent], S: int) -> np.ndarray:
    """Suma de pesos de ventana sin normalizar por vóxel (todas las contribuciones)."""
    total = np.zeros((S, S, S))
    for patch in patches:
        total[patch.slices()] += hat_window(patch.occupancy.shape[0])
    return total


def blend_patch_latents(patches: Sequence[PatchLatent], grid: OccupancyGrid) -> SceneLatent:
    """
    Atributos por vóxel ocupado: media de los parches que lo declaran ocupado,
    ponderada por la ventana trilineal y normalizada.
    """
    S = grid.resolution
    den = np.zeros((S, S, S))
    num_colors = np.zeros((S, S, S, 3))
    num_opacity = np.zeros((S, S, S))
    num_scale = np.zeros((S, S, S))
    textured = np.zeros((S, S, S), dtype=bool)
    for patch in patches:
        window = hat_window(patch.occupancy.shape[0]) * patch.occupancy
        sl = patch.slices()
        den[sl] += window
        num_colors[sl] += window[..., None] * patch.colors
        num_opacity[sl] += window * patch.opacity
        num_scale[sl] += window * patch.scale
        textured[sl] |= patch.textured & patch.occupancy

    occupied = grid.occupancy
    indices = np.argwhere(occupied)
    x, y, z = indices.T
    d = den[x, y, z]
    covered = d > 0
    colors = np.full((len(indices), 3), GRAY)
    opacity = np.ones(len(indices))
    scale = np.full(len(indices), grid.pitch)
    colors[covered] = num_colors[x, y, z][covered] / d[covered, None]
    opacity[covered] = num_opacity[x, y, z][covered] / d[covered]
    scale[covered] = num_scale[x, y, z][covered] / d[covered]
    return SceneLatent(
        indices,
        np.clip(colors, 0.0, 1.0),
        np.clip(opacity, MIN_OPACITY, 1.0),
        scale,
        grid.origin,
        grid.pitch,
        S,
        textured[x, y, z],
    )


def transfer_colors(latent: SceneLatent, previous: Optional[SceneLatent]) -> SceneLatent:
    """
    Vóxeles sin observación toman el color del vóxel más cercano del latente
    anterior, si está a menos de un pitch.
    """
    if previous is None or len(previous) == 0 or len(latent) == 0:
        return latent
    target = np.flatnonzero(~latent.textured)
    if len(target) == 0:
        return latent
    tree = cKDTree(previous.centers())
    dist, idx = tree.query(latent.centers()[target], distance_upper_bound=latent.pitch)
    found = np.isfinite(dist)
    out = latent.copy()
    out.colors[target[found]] = previous.colors[idx[found]]
    out.textured[target[found]] = True
    logger.info("colores transferidos del latente anterior", extra={"voxels": int(found.sum())})
    return out


# =====================================
# OPTIMIZACIÓN EN TIEMPO DE PRUEBA
# =====================================

@dataclass(eq=False)
class OptimizationResult:
    latent: SceneLatent
    losses: List[float] = field(default_factory=list)


@dataclass(eq=False)
class _Target:
    view_id: str
    image: np.ndarray
    K: object
    E: object
    raster: Optional[SplatRaster] = None


def _prepare_targets(latent: SceneLatent, views: ViewSet, render_size: Optional[Tuple[int, int]]) -> List[_Target]:
    targets = []
    for view in views:
        size = render_size or (view.K.width, view.K.height)
        image = view.image
        if image.shape[:2] != (size[1], size[0]):
            image = resize(image, (size[1], size[0], 3), order=1, anti_aliasing=True, mode="edge")
        targets.append(_Target(view.view_id, image, view.K, view.E))
    return targets


def _rasterize_all(latent: SceneLatent, targets: List[_Target]) -> None:
    for target in targets:
        h, w = target.image.shape[:2]
        target.raster = rasterize(latent, target.K, target.E, (w, h))


def _evaluate(
    latent: SceneLatent,
    targets: List[_Target],
    weights: Tuple[float, float, float],
    perceptual: Optional[PerceptualLoss],
    step: int,
) -> Tuple[float, List[np.ndarray], List[Optional[np.ndarray]]]:
    l1_w, lpips_w, ssim_w = weights
    total = 0.0
    frames, perceptual_grads = [], []
    for target in targets:
        frame = compose(target.raster, latent).rgb
        loss = l1_w * loss_l1(frame, target.image) + ssim_w * (1.0 - loss_ssim(frame, target.image))
        grad = None
        if lpips_w and perceptual is not None:
            value, grad = perceptual(frame, target.image)
            loss += lpips_w * value
        if not np.isfinite(loss):
            raise OptimizationError("pérdida no finita en la optimización", step=step, view_id=target.view_id)
        total += loss
        frames.append(frame)
        perceptual_grads.append(grad)
    return total, frames, perceptual_grads


def loss_and_gradient(
    latent: SceneLatent,
    targets: List[_Target],
    weights: Tuple[float, float, float],
    perceptual: Optional[PerceptualLoss] = None,
    with_opacity: bool = False,
    step: int = 0,
) -> Tuple[float, np.ndarray, Optional[np.ndarray]]:
    """Pérdida multivista y su gradiente analítico respecto a colores (y opacidad)."""
    loss, frames, extra = _evaluate(latent, targets, weights, perceptual, step)
    grad_colors = np.zeros_like(latent.colors)
    grad_opacity = np.zeros(len(latent)) if with_opacity else None
    for target, frame, perceptual_grad in zip(targets, frames, extra):
        g = photometric_gradient(frame, target.image, weights)
        if perceptual_grad is not None:
            g = g + weights[1] * perceptual_grad
        grad_colors += color_gradient(target.raster, g)
        if with_opacity:
            grad_opacity += opacity_gradient(target.raster, latent, g)
    return loss, grad_colors, grad_opacity


def _preconditioner(latent: SceneLatent, targets: List[_Target]) -> np.ndarray:
    """Peso de composición acumulado por vóxel, escalado por el tamaño de cada imagen."""
    diag = np.zeros(len(latent))
    for target in targets:
        diag += np.asarray(target.raster.weights.sum(axis=0)).ravel() / target.image.size
    return diag


def test_time_optimize(
    latent: SceneLatent,
    views: ViewSet,
    steps: int = 5,
    lr: float = 1.0,
    weights: Tuple[float, float, float] = (1.0, 0.0, 1.0),
    optimize_opacity: bool = False,
    render_size: Optional[Tuple[int, int]] = None,
    perceptual: Optional[PerceptualLoss] = None,
) -> OptimizationResult:
    """
    Descenso de gradiente sobre el color por vóxel (y opcionalmente la opacidad)
    minimizando Σ_k λ1·L1 + λ3·(1 − SSIM) entre render(latente, C_k) e I_k.

    Cada paso divide el gradiente por el peso de composición acumulado del vóxel
    y reduce el paso a la mitad mientras la pérdida suba (hasta 10 veces); si no
    baja, el paso se descarta. `losses` incluye la pérdida inicial.
    """
    if len(views) == 0:
        raise NoDataError("no views: la optimización necesita vistas")
    if weights[1] != 0 and perceptual is None:
        raise ConfigError("λ2 > 0 requiere un backend de pérdida perceptual")
    if steps < 0 or not lr > 0:
        raise ConfigError(f"parámetros de optimización inválidos: steps={steps}, lr={lr}")
    current = latent.copy()
    if len(current) == 0:
        return OptimizationResult(current, [])

    targets = _prepare_targets(current, views, render_size)
    _rasterize_all(current, targets)
    loss, grad_c, grad_o = loss_and_gradient(current, targets, weights, perceptual, optimize_opacity, step=0)
    losses = [loss]
    for step in range(1, steps + 1):
        diag = _preconditioner(current, targets)
        active = diag > 1e-12
        direction_c = np.zeros_like(grad_c)
        direction_c[active] = grad_c[active] / diag[active, None]
        direction_o = None
        if optimize_opacity:
            direction_o = np.zeros_like(grad_o)
            direction_o[active] = grad_o[active] / diag[active]

        rate = lr
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            candidate = current.with_attributes(
                colors=np.clip(current.colors - rate * direction_c, 0.0, 1.0),
                opacity=(
                    np.clip(current.opacity - rate * direction_o, MIN_OPACITY, 1.0)
                    if optimize_opacity else None
                ),
            )
            if optimize_opacity:
                _rasterize_all(candidate, targets)
            trial, _, _ = _evaluate(candidate, targets, weights, perceptual, step)
            if trial <= loss:
                accepted = True
                break
            rate *= 0.5
        if accepted:
            current = candidate
            loss, grad_c, grad_o = loss_and_gradient(current, targets, weights, perceptual, optimize_opacity, step)
        elif optimize_opacity:
            _rasterize_all(current, targets)
        losses.append(loss)
        logger.debug("paso de optimización", extra={"step": step, "loss": loss, "rate": rate, "accepted": accepted})
    logger.info("optimización en tiempo de prueba", extra={"steps": steps, "initial": losses[0], "final": losses[-1]})
    return OptimizationResult(current, losses)
