"""
Ciclo de auto-evolución: etapa A (prior espacial), etapa B (estructura, completado,
optimización) y etapa C (trayectoria, disparidad, síntesis de vistas nuevas).

La iteración t ≥ 1 ejecuta A → B → C; la etapa C se omite en t = T. Tras cada etapa
el estado se escribe en iter_{t}/ con su checksum, y `resume` continúa desde el
último checkpoint con la etapa siguiente.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from evoscene import completion
from evoscene.backends.base import (
    DEFAULT_PROMPT_TEMPLATE,
    Backends,
    DepthEstimate,
    DepthEstimator,
    SynthesisRequest,
)
from evoscene.checkpoints import STAGES, RunLayout, collect_views
from evoscene.completion import PerceptualLoss, SceneLatent, blend_patch_latents, complete_structure, transfer_colors
from evoscene.config import PipelineConfig, RunManifest, resolve_backends
from evoscene.errors import ContractError, GeometryError, IntegrityError, NoDataError, UsageError
from evoscene.frames import quantize
from evoscene.geometry import DepthMap
from evoscene.meshing import TexturedMesh, bake_textures, marching_cubes, write_glb, write_splats
from evoscene.metrics import MetricRecord, coverage_fraction
from evoscene.occupancy import (
    OccupancyGrid,
    carve_free_space,
    decompose_patches,
    fit_bounds,
    state_counts,
    voxelize,
)
from evoscene.prior import (
    ConfidencePointCloud,
    VotingConfig,
    candidates_from_view,
    initial_prior,
    merge_point_clouds,
    select_supported,
    tally_votes,
)
from evoscene.rendering import DisparityMap, psnr, render_depth, resize_disparity, to_disparity
from evoscene.trajectory import OrbitSpec, iteration_schedule, orbital_trajectory
from evoscene.views import ViewEntry, ViewSet

logger = logging.getLogger(__name__)

SEED_VIEW_ID = "seed"


# =====================================
# ESTADO
# =====================================

@dataclass(eq=False)
class IterationState:
    """
    Estado tras la última etapa completada (`stage`) de la iteración `t`.
    t = 0 con stage "init" es 𝒱₀ = {semilla} con 𝒫₀ como prior.
    """

    t: int
    stage: str
    views: ViewSet
    depths: Dict[str, DepthMap] = field(default_factory=dict)
    prior: ConfidencePointCloud = field(default_factory=ConfidencePointCloud)
    grid: Optional[OccupancyGrid] = None
    latent: Optional[SceneLatent] = None
    records: List[MetricRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.t < 0:
            raise GeometryError(f"iteración negativa: {self.t}")
        if self.stage not in STAGES:
            raise GeometryError(f"etapa desconocida: {self.stage}")
        latest = self.views.latest_iteration()
        if latest is not None and latest > self.t:
            raise GeometryError(f"vista de la iteración {latest} en el estado t={self.t}")

    @property
    def seed(self) -> ViewEntry:
        return self.views.get(SEED_VIEW_ID)

    def records_for(self, t: int) -> List[MetricRecord]:
        return [r for r in self.records if r.t == t]


@dataclass
class RunContext:
    """Colaboradores opcionales de una ejecución: checkpoints, referencia y tiempos."""

    layout: Optional[RunLayout] = None
    perceptual: Optional[PerceptualLoss] = None
    reference: Optional[np.ndarray] = None
    timings: Dict[str, float] = field(default_factory=dict)


def _next_step(state: IterationState, cfg: PipelineConfig) -> Optional[Tuple[int, str]]:
    t, stage = state.t, state.stage
    if stage in ("init", "C"):
        return (t + 1, "A") if t < cfg.iterations else None
    if stage == "A":
        return t, "B"
    # stage == "B"
    return (t, "C") if t < cfg.iterations else None


def is_finished(state: IterationState, cfg: PipelineConfig) -> bool:
    return _next_step(state, cfg) is None


def _checkpoint(state: IterationState, ctx: RunContext, new_views=None, new_depths=None) -> None:
    if ctx.layout is None:
        return
    t = state.t
    if new_views:
        ctx.layout.write_views(t, new_views)
    if new_depths:
        ctx.layout.write_depths(t, new_depths)
    if state.stage == "A":
        ctx.layout.write_prior(t, state.prior)
    if state.stage == "B":
        ctx.layout.write_structure(t, state.grid, state.latent)
    ctx.layout.write_state(t, state.stage, [r.model_dump() for r in state.records_for(t)])


# =====================================
# ETAPAS
# =====================================

def _estimate_depth(backends: Backends, view: ViewEntry, with_hint: bool) -> DepthMap:
    hint = (view.K, view.E) if with_hint else None
    estimate = backends.depth.estimate(view.image, view_id=view.view_id, camera_hint=hint)
    if estimate.depth.values.shape != view.image.shape[:2]:
        raise ContractError(
            f"profundidad {estimate.depth.values.shape} para la vista {view.view_id}", field="depth.shape"
        )
    return estimate.depth


def stage_a(state: IterationState, cfg: PipelineConfig, backends: Backends, t: int) -> Tuple[IterationState, Dict[str, DepthMap]]:
    """
    Prior espacial. En t = 1 es 𝒫₀, la retroproyección de la semilla; después,
    los candidatos de las vistas de la iteración anterior filtrados por votación
    y fusionados con el prior por binning.
    """
    if t == 1:
        prior = state.prior
        record = MetricRecord(t=t, stage="A", counts={"points": len(prior), "views": len(state.views)})
        new_depths = {}
    else:
        new_views = state.views.from_iteration(t - 1)
        if len(new_views) == 0:
            raise NoDataError(f"no views: la iteración {t - 1} no produjo vistas")
        new_depths = {v.view_id: _estimate_depth(backends, v, with_hint=True) for v in new_views}
        depths = {**state.depths, **new_depths}
        candidates = ConfidencePointCloud.concatenate(
            *[candidates_from_view(v, new_depths[v.view_id], cfg.confidence_sigma) for v in new_views]
        )
        summary = None
        if cfg.voting:
            voting = VotingConfig(cfg.depth_tolerance, cfg.min_support, cfg.occlusion_margin, cfg.confidence_mode)
            tally = tally_votes(candidates, state.views, depths, voting)
            kept = select_supported(candidates, tally, voting)
            summary = tally.summary(len(kept))
        else:
            kept = candidates
        prior = merge_point_clouds(state.prior, kept, cfg.bin_size)
        record = MetricRecord(
            t=t,
            stage="A",
            counts={"points": len(prior), "candidates": len(candidates), "retained": len(kept), "views": len(state.views)},
            filter=summary,
        )
        state.depths.update(new_depths)
    if len(prior) == 0:
        raise NoDataError("no prior: la etapa A no produjo puntos")
    logger.info("etapa A", extra={"t": t, "points": len(prior)})
    state.prior = prior
    state.records.append(record)
    state.t, state.stage = t, "A"
    return state, new_depths


def _carve_views(state: IterationState, cfg: PipelineConfig) -> ViewSet:
    if cfg.carve_views == "latest":
        latest = state.views.latest_iteration()
        return state.views.from_iteration(latest)
    return state.views


def stage_b(state: IterationState, cfg: PipelineConfig, backends: Backends, ctx: RunContext) -> IterationState:
    """Voxeliza, talla, completa por parches, mezcla y optimiza el latente."""
    t = state.t
    origin, pitch = fit_bounds(state.prior, cfg.resolution, cfg.bounds_margin)
    grid = voxelize(state.prior, origin, pitch, cfg.resolution)
    grid = carve_free_space(grid, _carve_views(state, cfg), state.depths, cfg.carve_epsilon)
    patches = decompose_patches(grid, cfg.patch_size, cfg.overlap, state.views, state.depths)
    completed, results = complete_structure(grid, patches, backends.completer, cloud=state.prior, workers=cfg.completion_workers)

    latent = blend_patch_latents(results, completed)
    latent = transfer_colors(latent, state.latent)
    losses: List[float] = []
    if cfg.tto_steps > 0 and len(latent):
        result = completion.test_time_optimize(
            latent,
            state.views,
            steps=cfg.tto_steps,
            lr=cfg.tto_lr,
            weights=cfg.weights,
            optimize_opacity=cfg.optimize_opacity,
            render_size=cfg.render_size,
            perceptual=ctx.perceptual,
        )
        latent, losses = result.latent, result.losses
    latent.check_against(completed)

    counts = state_counts(grid)
    counts.update({"occupied": int(completed.occupancy.sum()), "latent_voxels": len(latent), "patches": len(patches)})
    coverage = None
    if ctx.reference is not None:
        coverage = coverage_fraction(latent.centers(), ctx.reference, 2.0 * pitch) if len(latent) else 0.0
    state.records.append(
        MetricRecord(t=t, stage="B", counts=counts, losses=losses, coverage=coverage, extra={"pitch": pitch})
    )
    logger.info("etapa B", extra={"t": t, "occupied": counts["occupied"], "coverage": coverage})
    state.grid, state.latent, state.stage = completed, latent, "B"
    return state


def _disparity_for(mesh: TexturedMesh, pose, size: Tuple[int, int]) -> DisparityMap:
    depth = render_depth(mesh, pose.K, pose.E)
    try:
        disparity = to_disparity(depth)
    except GeometryError:
        shape = (pose.K.height, pose.K.width)
        disparity = DisparityMap(normalized=np.zeros(shape), raw=np.full(shape, np.nan))
    return resize_disparity(disparity, size)


def stage_c(state: IterationState, cfg: PipelineConfig, backends: Backends) -> Tuple[IterationState, List[ViewEntry]]:
    """
    Órbita de la iteración alrededor del centroide del prior, disparidad de la
    malla actual por pose y síntesis de N vistas nuevas.
    """
    t = state.t
    seed = state.seed
    size = tuple(cfg.synthesis_size) if cfg.synthesis_size else (seed.K.width, seed.K.height)
    K = seed.K if size == (seed.K.width, seed.K.height) else seed.K.scaled(*size)
    center = state.prior.weighted_centroid()
    radius = float(np.linalg.norm(seed.E.center - center))
    orbit = OrbitSpec(
        center=center,
        radius=radius,
        base_pose=seed.E,
        intrinsics=K,
        azimuth_range=iteration_schedule(t, cfg.azimuth_amplitude, cfg.schedule_table),
        frame_count=cfg.frames,
    )
    poses = orbital_trajectory(orbit)
    mesh = marching_cubes(state.grid)
    disparity = [_disparity_for(mesh, pose, size) for pose in poses]
    view_ids = [f"t{t}_f{k:03d}" for k in range(len(poses))]

    request = SynthesisRequest(
        seed_image=seed.image,
        disparity=disparity,
        trajectory=poses,
        view_ids=view_ids,
        size=size,
        prompt=DEFAULT_PROMPT_TEMPLATE.format(caption=cfg.caption),
        first_frame_injection=cfg.first_frame_injection,
        conditioning_scale=cfg.conditioning_scale,
        sampling_steps=cfg.sampling_steps,
        guidance_scale=cfg.guidance_scale,
    )
    response = backends.synthesizer.synthesize(request)
    if len(response.frames) != len(poses):
        raise ContractError(f"{len(response.frames)} frames para {len(poses)} poses", field="frames")
    use_backend_poses = cfg.trust_backend_poses and response.poses is not None
    if use_backend_poses and len(response.poses) != len(poses):
        raise ContractError(f"{len(response.poses)} poses para {len(poses)} frames", field="poses")

    new_views = []
    for k, (pose, frame) in enumerate(zip(poses, response.frames)):
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (size[1], size[0], 3):
            raise ContractError(f"frame {k} con forma {frame.shape}", field=f"frames.{k}")
        E = response.poses[k] if use_backend_poses else pose.E
        new_views.append(ViewEntry(view_ids[k], quantize(frame), pose.K, E, iteration_of_origin=t))
    for view in new_views:
        state.views.add(view)

    extra: Dict[str, Any] = {"azimuth_range": list(orbit.azimuth_range), "radius": radius}
    if cfg.first_frame_injection and new_views[0].image.shape == seed.image.shape:
        extra["first_frame_psnr"] = min(psnr(new_views[0].image, seed.image), 100.0)
    state.records.append(
        MetricRecord(t=t, stage="C", counts={"new_views": len(new_views), "views": len(state.views)}, extra=extra)
    )
    logger.info("etapa C", extra={"t": t, "views": len(state.views)})
    state.stage = "C"
    return state, new_views


# =====================================
# ORQUESTACIÓN
# =====================================

def _timed(ctx: RunContext, key: str):
    class _Timer:
        def __enter__(self):
            self.start = time.perf_counter()

        def __exit__(self, *exc):
            ctx.timings[key] = time.perf_counter() - self.start
            return False

    return _Timer()


def run_stage(state: IterationState, cfg: PipelineConfig, backends: Backends, ctx: Optional[RunContext] = None) -> IterationState:
    """Ejecuta la siguiente etapa pendiente y la checkpointea."""
    ctx = ctx or RunContext()
    step = _next_step(state, cfg)
    if step is None:
        return state
    t, stage = step
    logger.info("inicio de etapa", extra={"t": t, "stage": stage})
    with _timed(ctx, f"t{t}.{stage}"):
        if stage == "A":
            state, new_depths = stage_a(state, cfg, backends, t)
            _checkpoint(state, ctx, new_depths=new_depths)
        elif stage == "B":
            state = stage_b(state, cfg, backends, ctx)
            _checkpoint(state, ctx)
        else:
            state, new_views = stage_c(state, cfg, backends)
            _checkpoint(state, ctx, new_views=new_views)
    if stage == "B" and t == cfg.iterations:
        logger.info("etapa C omitida en la última iteración", extra={"t": t})
    return state


def run_iteration(state: IterationState, cfg: PipelineConfig, backends: Backends, ctx: Optional[RunContext] = None) -> IterationState:
    """
    Completa la iteración en curso (o la siguiente si la actual terminó):
    A → B → C, sin C en t = T.
    """
    ctx = ctx or RunContext()
    step = _next_step(state, cfg)
    if step is None:
        return state
    target = step[0]
    while True:
        step = _next_step(state, cfg)
        if step is None or step[0] != target:
            return state
        state = run_stage(state, cfg, backends, ctx)


class _KeepDepth(DepthEstimator):
    """Delega en el estimador real y guarda la última estimación."""

    def __init__(self, inner: DepthEstimator):
        self.inner = inner
        self.returns_intrinsics = inner.returns_intrinsics
        self.returns_pose = inner.returns_pose
        self.last: Optional[DepthEstimate] = None

    def estimate(self, image, view_id=None, camera_hint=None) -> DepthEstimate:
        self.last = self.inner.estimate(image, view_id=view_id, camera_hint=camera_hint)
        return self.last


def initial_state(image: np.ndarray, cfg: PipelineConfig, backends: Backends, ctx: Optional[RunContext] = None) -> IterationState:
    """𝒱₀ y 𝒫₀: la imagen semilla con la cámara y profundidad del estimador y su retroproyección."""
    ctx = ctx or RunContext()
    image = quantize(np.asarray(image, dtype=np.float64))
    depth_backend = _KeepDepth(backends.depth)
    prior, K, E = initial_prior(image, depth_backend, SEED_VIEW_ID, cfg.confidence_sigma, cfg.fallback_hfov_deg)
    seed = ViewEntry(SEED_VIEW_ID, image, K, E, iteration_of_origin=0)
    state = IterationState(
        t=0, stage="init", views=ViewSet([seed]), depths={SEED_VIEW_ID: depth_backend.last.depth}, prior=prior
    )
    if ctx.layout is not None:
        ctx.layout.write_views(0, [seed])
        ctx.layout.write_depths(0, state.depths)
        ctx.layout.write_prior(0, prior)
        ctx.layout.write_state(0, "init", [])
    return state


@dataclass
class RunArtifacts:
    run_dir: Path
    mesh: TexturedMesh
    latent: SceneLatent
    report: Dict[str, Any]
    state: IterationState

    @property
    def glb_path(self) -> Path:
        return RunLayout(self.run_dir).glb_path


def build_report(state: IterationState, cfg: PipelineConfig, mesh: TexturedMesh, source: Dict[str, Any]) -> Dict[str, Any]:
    iterations = []
    loss_curves: Dict[str, List[float]] = {}
    coverage: Dict[str, Optional[float]] = {}
    for t in range(1, state.t + 1):
        records = state.records_for(t)
        iterations.append({"t": t, "records": [r.model_dump() for r in records]})
        for r in records:
            if r.stage == "B":
                loss_curves[str(t)] = r.losses
                coverage[str(t)] = r.coverage
    return {
        "source": source,
        "config": cfg.model_dump(mode="json"),
        "iterations": iterations,
        "loss_curves": loss_curves,
        "coverage": coverage,
        "pitch": state.grid.pitch,
        "views": len(state.views),
        "prior_points": len(state.prior),
        "mesh": {
            "vertices": len(mesh.vertices),
            "faces": len(mesh.faces),
            "watertight": mesh.is_watertight(),
        },
    }


def finalize(state: IterationState, cfg: PipelineConfig, ctx: RunContext, source: Dict[str, Any]) -> Tuple[TexturedMesh, Dict[str, Any]]:
    """Malla final: Marching Cubes, horneado de colores y exportación GLB + splats + reporte."""
    with _timed(ctx, "export"):
        mesh = marching_cubes(state.grid)
        mesh = bake_textures(mesh, state.views, state.grid.pitch)
        mesh.validate()
        report = build_report(state, cfg, mesh, source)
        if ctx.layout is not None:
            write_glb(ctx.layout.glb_path, mesh)
            write_splats(ctx.layout.splats_path, state.latent)
            ctx.layout.write_json("report.json", report)
    if ctx.layout is not None:
        ctx.layout.write_json("timings.json", ctx.timings)
    logger.info("ejecución terminada", extra={"views": len(state.views), "faces": len(mesh.faces)})
    return mesh, report


def _reference_samples(spec) -> Optional[np.ndarray]:
    if spec is None:
        return None
    from evoscene.synthbench import sample_surface

    return sample_surface(spec, seed=spec.seed)


def _source(image_path: Optional[str], spec) -> Dict[str, Any]:
    if spec is not None:
        return {"scene": spec.name}
    return {"image": Path(image_path).name if image_path else None}


def run(
    cfg: PipelineConfig,
    out_dir: Union[str, Path],
    image: Optional[np.ndarray] = None,
    spec=None,
    backends: Optional[Backends] = None,
    perceptual: Optional[PerceptualLoss] = None,
    manifest: Optional[RunManifest] = None,
) -> RunArtifacts:
    """
    Ejecución completa desde una imagen semilla o una escena de referencia
    (exactamente una). Los backends se resuelven antes de cualquier cómputo.
    """
    if (image is None) == (spec is None):
        raise UsageError("se requiere exactamente una entrada: imagen o escena")
    if backends is None:
        backends, perceptual = resolve_backends(cfg, spec)
    if cfg.lambda_lpips > 0 and perceptual is None:
        raise UsageError("lambda_lpips > 0 sin backend de pérdida perceptual")
    if image is None:
        from evoscene.backends.oracle import OracleScene

        image = OracleScene(spec).seed_image()

    layout = RunLayout(out_dir)
    layout.root.mkdir(parents=True, exist_ok=True)
    layout.write_json("config.json", cfg.model_dump(mode="json"))
    if manifest is not None:
        layout.write_json("manifest.json", manifest.model_dump(mode="json"))
    ctx = RunContext(layout=layout, perceptual=perceptual, reference=_reference_samples(spec))

    with _timed(ctx, "init"):
        state = initial_state(image, cfg, backends, ctx)
    while not is_finished(state, cfg):
        state = run_iteration(state, cfg, backends, ctx)
    mesh, report = finalize(state, cfg, ctx, _source(manifest.image if manifest else None, spec))
    return RunArtifacts(layout.root, mesh, state.latent, report, state)


# =====================================
# REANUDACIÓN
# =====================================

def load_state(layout: RunLayout) -> IterationState:
    """
    Reconstruye el estado del último checkpoint. Verifica el checksum de todos los
    directorios de iteración: uno corrupto impide reanudar.
    """
    dirs = [(t, path) for t, path in layout.checkpoint_dirs() if (path / "state.json").exists()]
    if not dirs:
        raise NoDataError(f"no hay checkpoints en {layout.root}")
    for t, _ in dirs:
        layout.verify(t)
    t = dirs[-1][0]
    stage = layout.read_state(t)["stage"]

    views = collect_views(layout, t)
    depths: Dict[str, DepthMap] = {}
    records: List[MetricRecord] = []
    prior = ConfidencePointCloud()
    grid = latent = None
    for k, _ in dirs:
        depths.update(layout.read_depths(k))
        records.extend(MetricRecord(**r) for r in layout.read_records(k))
        cloud = layout.read_prior(k)
        if cloud is not None:
            prior = cloud
        g, lat = layout.read_structure(k)
        if lat is not None:
            grid, latent = g, lat
    logger.info("checkpoint cargado", extra={"t": t, "stage": stage, "views": len(views)})
    return IterationState(t=t, stage=stage, views=views, depths=depths, prior=prior, grid=grid, latent=latent, records=records)


def resume(
    run_dir: Union[str, Path],
    cfg: Optional[PipelineConfig] = None,
    backends: Optional[Backends] = None,
    perceptual: Optional[PerceptualLoss] = None,
) -> RunArtifacts:
    """Continúa una ejecución interrumpida desde la etapa siguiente a su último checkpoint."""
    layout = RunLayout(run_dir)
    if not layout.root.is_dir():
        raise UsageError(f"directorio de ejecución inexistente: {layout.root}")
    if cfg is None:
        config_path = layout.root / "config.json"
        if not config_path.exists():
            raise UsageError(f"{layout.root} no tiene config.json")
        cfg = PipelineConfig(**json.loads(config_path.read_text(encoding="utf-8")))

    spec = None
    manifest = None
    manifest_path = layout.root / "manifest.json"
    if manifest_path.exists():
        manifest = RunManifest(**json.loads(manifest_path.read_text(encoding="utf-8")))
        if manifest.scene is not None:
            from evoscene.synthbench import load_scene

            spec = load_scene(manifest.scene)
    if backends is None:
        backends, perceptual = resolve_backends(cfg, spec)

    state = load_state(layout)
    _register_views(backends, state.views)
    if state.stage in ("B", "C") and state.grid is None:
        raise IntegrityError("checkpoint de etapa B sin rejilla ni latente")

    timings: Dict[str, float] = {}
    if layout.timings_path.exists():
        timings = json.loads(layout.timings_path.read_text(encoding="utf-8"))
    ctx = RunContext(layout=layout, perceptual=perceptual, reference=_reference_samples(spec), timings=timings)
    while not is_finished(state, cfg):
        state = run_iteration(state, cfg, backends, ctx)
    mesh, report = finalize(state, cfg, ctx, _source(manifest.image if manifest else None, spec))
    return RunArtifacts(layout.root, mesh, state.latent, report, state)


def _register_views(backends: Backends, views: ViewSet) -> None:
    scene = getattr(backends.depth, "scene", None)
    if scene is None:
        return
    for view in views:
        scene.register(view.view_id, view.K, view.E)
