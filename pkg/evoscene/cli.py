"""
Línea de comandos: evolve, resume, eval, export y serve-mock.

Códigos de salida: 0 éxito, 1 error de ejecución, 2 uso/configuración,
3 violación de contrato de un backend. Los errores salen como un objeto JSON en stderr.
"""

import functools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click

from evoscene.errors import EvoSceneError, UsageError
from evoscene.events import configure_logging

logger = logging.getLogger(__name__)

BACKEND_HELP = "oracle | remote | remote:URL"


def _emit(data: Dict[str, Any]) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False))


def handle_errors(func):
    """Convierte EvoSceneError en JSON por stderr y el código de salida documentado."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except EvoSceneError as e:
            logger.error("comando fallido", extra={"error_code": e.error_code})
            click.echo(json.dumps(e.to_dict(), ensure_ascii=False), err=True)
            sys.exit(e.exit_code)

    return wrapper


@click.group()
@click.option("--human-logs", is_flag=True, help="Logs en texto legible en vez de JSON")
@click.option("--verbose", "-v", is_flag=True, help="Nivel DEBUG")
def cli(human_logs: bool, verbose: bool):
    """Motor de auto-evolución de una imagen a escena 3D."""
    configure_logging(human=human_logs, level=logging.DEBUG if verbose else logging.INFO)


# =====================================
# EVOLVE / RESUME
# =====================================

@cli.command()
@click.option("--scene", type=click.Path(exists=True, dir_okay=False), help="SceneSpec JSON (synthbench)")
@click.option("--image", type=click.Path(exists=True, dir_okay=False), help="Imagen semilla")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directorio de salida")
@click.option("--preset", type=str, default=None, help="Preset de data/presets (full, desk)")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--iters", type=int, default=None, help="Número T de iteraciones")
@click.option("--frames", type=int, default=None, help="Frames N por trayectoria")
@click.option("--resolution", type=int, default=None, help="Resolución S de la rejilla")
@click.option("--patch-size", type=int, default=None)
@click.option("--overlap", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--backends", "all_backends", type=str, default=None, help=f"Binding para las tres interfaces: {BACKEND_HELP}")
@click.option("--depth-backend", type=str, default=None, help=BACKEND_HELP)
@click.option("--complete-backend", type=str, default=None, help=BACKEND_HELP)
@click.option("--synthesize-backend", type=str, default=None, help=BACKEND_HELP)
@click.option("--noise-depth", type=float, default=None, help="σ del ruido del oráculo de profundidad")
@click.option("--no-voting", is_flag=True, help="Desactiva la votación multivista (ablación)")
@handle_errors
def evolve(scene, image, out, preset, config_path, iters, frames, resolution, patch_size, overlap, seed,
           all_backends, depth_backend, complete_backend, synthesize_backend, noise_depth, no_voting):
    """Ejecuta el ciclo completo y escribe scene.glb, scene_splats.ply y report.json."""
    from evoscene.config import RunManifest, load_config
    from evoscene.frames import read_png
    from evoscene.pipeline import run
    from evoscene.synthbench import load_scene

    if (scene is None) == (image is None):
        raise UsageError("se requiere exactamente una entrada: --scene o --image")
    overrides = {
        "iterations": iters,
        "frames": frames,
        "resolution": resolution,
        "patch_size": patch_size,
        "overlap": overlap,
        "seed": seed,
        "depth_backend": depth_backend or all_backends,
        "complete_backend": complete_backend or all_backends,
        "synthesize_backend": synthesize_backend or all_backends,
        "depth_noise": noise_depth,
        "voting": False if no_voting else None,
    }
    cfg = load_config(preset=preset, config_path=config_path, overrides=overrides)
    try:
        manifest = RunManifest(
            config_path=config_path,
            preset=preset,
            image=None if image is None else str(Path(image).resolve()),
            scene=None if scene is None else str(Path(scene).resolve()),
            output=str(out),
            bindings=cfg.bindings(),
            seed=cfg.seed,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e

    spec = load_scene(scene) if scene else None
    seed_image = read_png(image) if image else None
    artifacts = run(cfg, out, image=seed_image, spec=spec, manifest=manifest)
    _emit(
        {
            "success": True,
            "run_dir": str(artifacts.run_dir),
            "glb": str(artifacts.glb_path),
            "views": artifacts.report["views"],
            "iterations": len(artifacts.report["iterations"]),
        }
    )


@cli.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@handle_errors
def resume(run_dir):
    """Continúa una ejecución interrumpida desde su último checkpoint."""
    from evoscene.pipeline import resume as resume_run

    artifacts = resume_run(run_dir)
    _emit({"success": True, "run_dir": str(artifacts.run_dir), "glb": str(artifacts.glb_path)})


# =====================================
# EVAL / EXPORT
# =====================================

@cli.command(name="eval")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scene", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--samples", type=int, default=10000, show_default=True)
@handle_errors
def eval_cmd(run_dir, scene, samples):
    """Cobertura por iteración, chamfer y estanqueidad contra la escena analítica."""
    from evoscene.synthbench import evaluate, load_scene

    report = evaluate(run_dir, load_scene(scene), samples)
    _emit({"success": True, "data": report})


@cli.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--iter", "iteration", type=int, default=None, help="Iteración del checkpoint (por defecto la última)")
@click.option("--format", "fmt", type=click.Choice(["glb", "ply", "obj"]), default="glb", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@handle_errors
def export(run_dir, iteration, fmt, out):
    """Re-exporta la malla (GLB/OBJ) o los splats (PLY) de un checkpoint."""
    from evoscene.checkpoints import RunLayout, collect_views
    from evoscene.errors import NoDataError
    from evoscene.meshing import bake_textures, export_glb, export_obj, encode_splats_ply, marching_cubes

    layout = RunLayout(run_dir)
    available = layout.iterations()
    if not available:
        raise NoDataError(f"no hay checkpoints con latente en {run_dir}")
    t = available[-1] if iteration is None else iteration
    if t not in available:
        raise UsageError(f"iteración {t} no disponible; hay {available}")
    layout.verify(t)
    grid, latent = layout.read_structure(t)

    target = Path(out)
    target.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "ply":
        target.write_bytes(encode_splats_ply(latent))
    else:
        mesh = bake_textures(marching_cubes(grid), collect_views(layout, t), grid.pitch)
        if fmt == "glb":
            mesh.validate()
            target.write_bytes(export_glb(mesh))
        else:
            target.write_text(export_obj(mesh), encoding="utf-8")
    _emit({"success": True, "iteration": t, "format": fmt, "path": str(target)})


# =====================================
# SERVE-MOCK
# =====================================

@cli.command(name="serve-mock")
@click.option("--scene", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--host", default=lambda: os.getenv("HOST", "localhost"), show_default="$HOST o localhost")
@click.option("--port", type=int, default=lambda: int(os.getenv("PORT", 8000)), show_default="$PORT o 8000")
@click.option("--noise-depth", type=float, default=0.0)
@click.option("--session-dir", type=click.Path(file_okay=False), default=None, help="Directorio de sesión (o EVOSCENE_SESSION_DIR)")
@handle_errors
def serve_mock(scene, host, port, noise_depth, session_dir):
    """Sirve los backends oráculo de una escena con el protocolo JSON."""
    import uvicorn

    from evoscene.main import create_app
    from evoscene.synthbench import load_scene

    app = create_app(load_scene(scene), Path(session_dir) if session_dir else None, depth_noise=noise_depth)
    click.echo(f"🚀 Iniciando servidor en http://{host}:{port}", err=True)
    uvicorn.run(app, host=host, port=port, access_log=os.getenv("DEBUG", "true").lower() == "true")


def main(argv: Optional[list] = None) -> None:
    cli.main(args=argv, prog_name="evoscene")


if __name__ == "__main__":
    main()
