"""
Layout en disco de una ejecución y checkpoints por etapa.

    run_dir/
      manifest.json  config.json  report.json  timings.json
      scene.glb  scene_splats.ply
      iter_{t}/
        state.json  metrics.json  checksum
        prior.ply  prior.npz                 (𝒫₀ en iter_0, luego tras la etapa A)
        depths/{view_id}.evdm                (profundidades estimadas en la etapa A)
        grid.evog  occupied.npy  latent.npz  (tras la etapa B)
        views/{view_id}.png + .json          (vistas nuevas: semilla en iter_0, etapa C en iter_t)

`checksum` es el sha256 del resto de archivos del directorio (ruta relativa + contenido).
"""

import hashlib
import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from evoscene.completion import SceneLatent, load_latent, save_latent
from evoscene.errors import IntegrityError, NoDataError
from evoscene.frames import read_png, write_png
from evoscene.geometry import DepthMap, camera_from_json, read_depth, write_depth
from evoscene.occupancy import OccupancyGrid, read_grid, write_grid
from evoscene.prior import ConfidencePointCloud, load_exact, save_exact, write_ply
from evoscene.views import ViewEntry, ViewSet

logger = logging.getLogger(__name__)

CHECKSUM_FILE = "checksum"
STAGES = ("init", "A", "B", "C")
_ITER_DIR = re.compile(r"^iter_(\d+)$")


def _dump(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False)


def directory_digest(path: Path) -> str:
    digest = hashlib.sha256()
    for file in sorted(p for p in path.rglob("*") if p.is_file() and p.name != CHECKSUM_FILE):
        digest.update(file.relative_to(path).as_posix().encode("utf-8"))
        digest.update(b"\0")
        digest.update(file.read_bytes())
        digest.update(b"\0")
    return digest.hexdigest()


class RunLayout:
    """Rutas y lectura/escritura de los artefactos de una ejecución."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    # ----- rutas -----

    def iter_dir(self, t: int) -> Path:
        return self.root / f"iter_{t}"

    @property
    def glb_path(self) -> Path:
        return self.root / "scene.glb"

    @property
    def splats_path(self) -> Path:
        return self.root / "scene_splats.ply"

    @property
    def report_path(self) -> Path:
        return self.root / "report.json"

    @property
    def timings_path(self) -> Path:
        return self.root / "timings.json"

    def checkpoint_dirs(self) -> List[Tuple[int, Path]]:
        found = []
        if self.root.is_dir():
            for child in self.root.iterdir():
                match = _ITER_DIR.match(child.name)
                if match and child.is_dir():
                    found.append((int(match.group(1)), child))
        return sorted(found)

    def iterations(self) -> List[int]:
        """Iteraciones con latente (etapa B completada)."""
        return [t for t, path in self.checkpoint_dirs() if (path / "latent.npz").exists()]

    # ----- integridad -----

    def seal(self, t: int) -> str:
        path = self.iter_dir(t)
        value = directory_digest(path)
        (path / CHECKSUM_FILE).write_text(value + "\n", encoding="utf-8")
        return value

    def verify(self, t: int) -> None:
        path = self.iter_dir(t)
        stored = path / CHECKSUM_FILE
        if not stored.exists():
            raise IntegrityError(f"checkpoint {path.name} sin checksum")
        if stored.read_text(encoding="utf-8").strip() != directory_digest(path):
            raise IntegrityError(f"checksum inválido en {path.name}")

    # ----- escritura -----

    def write_json(self, name: str, data: Any) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / name).write_text(_dump(data), encoding="utf-8")

    def read_report(self) -> Dict[str, Any]:
        if not self.report_path.exists():
            raise NoDataError(f"no hay report.json en {self.root}")
        return json.loads(self.report_path.read_text(encoding="utf-8"))

    def write_views(self, t: int, views: List[ViewEntry]) -> None:
        folder = self.iter_dir(t) / "views"
        folder.mkdir(parents=True, exist_ok=True)
        for view in views:
            write_png(folder / f"{view.view_id}.png", view.image)
            meta = {
                "view_id": view.view_id,
                "iteration_of_origin": view.iteration_of_origin,
                "intrinsics": view.K.to_dict(),
                "pose": view.E.to_dict(),
            }
            (folder / f"{view.view_id}.json").write_text(_dump(meta), encoding="utf-8")

    def write_depths(self, t: int, depths: Dict[str, DepthMap]) -> None:
        folder = self.iter_dir(t) / "depths"
        folder.mkdir(parents=True, exist_ok=True)
        for view_id, depth in depths.items():
            write_depth(folder / f"{view_id}.evdm", depth)

    def write_prior(self, t: int, cloud: ConfidencePointCloud) -> None:
        folder = self.iter_dir(t)
        folder.mkdir(parents=True, exist_ok=True)
        write_ply(folder / "prior.ply", cloud)
        save_exact(folder / "prior.npz", cloud)

    def write_structure(self, t: int, grid: OccupancyGrid, latent: SceneLatent) -> None:
        folder = self.iter_dir(t)
        folder.mkdir(parents=True, exist_ok=True)
        write_grid(folder / "grid.evog", grid)
        if grid.occupied is not None:
            with open(folder / "occupied.npy", "wb") as handle:
                np.save(handle, grid.occupied, allow_pickle=False)
        save_latent(folder / "latent.npz", latent)

    def write_state(self, t: int, stage: str, records: List[Dict[str, Any]]) -> None:
        folder = self.iter_dir(t)
        folder.mkdir(parents=True, exist_ok=True)
        (folder / "state.json").write_text(_dump({"t": t, "stage": stage}), encoding="utf-8")
        (folder / "metrics.json").write_text(_dump(records), encoding="utf-8")
        self.seal(t)

    # ----- lectura -----

    def read_state(self, t: int) -> Dict[str, Any]:
        return json.loads((self.iter_dir(t) / "state.json").read_text(encoding="utf-8"))

    def read_records(self, t: int) -> List[Dict[str, Any]]:
        path = self.iter_dir(t) / "metrics.json"
        return json.loads(path.read_text(encoding="utf-8")) if path.exists() else []

    def read_views(self, t: int) -> List[ViewEntry]:
        folder = self.iter_dir(t) / "views"
        if not folder.is_dir():
            return []
        views = []
        for meta_path in sorted(folder.glob("*.json")):
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            K, E = camera_from_json(json.dumps({"intrinsics": meta["intrinsics"], "pose": meta["pose"]}))
            image = read_png(folder / f"{meta['view_id']}.png")
            views.append(ViewEntry(meta["view_id"], image, K, E, meta["iteration_of_origin"]))
        return views

    def read_depths(self, t: int) -> Dict[str, DepthMap]:
        folder = self.iter_dir(t) / "depths"
        if not folder.is_dir():
            return {}
        return {p.stem: read_depth(p) for p in sorted(folder.glob("*.evdm"))}

    def read_prior(self, t: int) -> Optional[ConfidencePointCloud]:
        path = self.iter_dir(t) / "prior.npz"
        return load_exact(path) if path.exists() else None

    def read_structure(self, t: int) -> Tuple[Optional[OccupancyGrid], Optional[SceneLatent]]:
        folder = self.iter_dir(t)
        if not (folder / "latent.npz").exists():
            return None, None
        grid = read_grid(folder / "grid.evog")
        occupied_path = folder / "occupied.npy"
        if occupied_path.exists():
            grid = OccupancyGrid(grid.origin, grid.pitch, grid.states, np.load(occupied_path, allow_pickle=False))
        return grid, load_latent(folder / "latent.npz")

    def reconstruction_points(self, t: int) -> np.ndarray:
        """Centros de los vóxeles del latente de la iteración t."""
        _, latent = self.read_structure(t)
        if latent is None:
            raise NoDataError(f"iteración {t} sin latente")
        return latent.centers()


def ordered_views(views: List[ViewEntry]) -> List[ViewEntry]:
    """Orden canónico de carga: iteración de origen y luego id."""
    return sorted(views, key=lambda v: (v.iteration_of_origin, v.view_id))


def collect_views(layout: RunLayout, upto: int) -> ViewSet:
    entries: List[ViewEntry] = []
    for t, _ in layout.checkpoint_dirs():
        if t <= upto:
            entries.extend(layout.read_views(t))
    return ViewSet(ordered_views(entries))
