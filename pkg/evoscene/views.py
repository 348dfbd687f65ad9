from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional

import numpy as np

from evoscene.errors import GeometryError
from evoscene.geometry import CameraIntrinsics, CameraPose


@dataclass(eq=False)
class ViewEntry:
    """Observación posada: imagen RGB [0,1] (H, W, 3), cámara e iteración de origen."""

    view_id: str
    image: np.ndarray
    K: CameraIntrinsics
    E: CameraPose
    iteration_of_origin: int = 0

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise GeometryError(f"vista {self.view_id}: se esperaba imagen (H, W, 3), llegó {image.shape}")
        if image.shape[:2] != (self.K.height, self.K.width):
            raise GeometryError(
                f"vista {self.view_id}: imagen {image.shape[1]}x{image.shape[0]} "
                f"no coincide con la cámara {self.K.width}x{self.K.height}"
            )
        self.image = image


@dataclass(eq=False)
class ViewSet:
    """
    Conjunto acumulado de observaciones 𝒱_t.
    Los ids son únicos y el orden de inserción se conserva.
    """

    entries: List[ViewEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.view_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise GeometryError("ids de vista duplicados")
        self._index: Dict[str, int] = {vid: i for i, vid in enumerate(ids)}

    def add(self, entry: ViewEntry) -> None:
        if entry.view_id in self._index:
            raise GeometryError(f"id de vista duplicado: {entry.view_id}")
        self._index[entry.view_id] = len(self.entries)
        self.entries.append(entry)

    def get(self, view_id: str) -> ViewEntry:
        return self.entries[self._index[view_id]]

    def __contains__(self, view_id: object) -> bool:
        return view_id in self._index

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ViewEntry]:
        return iter(self.entries)

    @property
    def ids(self) -> List[str]:
        return [e.view_id for e in self.entries]

    def subset(self, view_ids: List[str]) -> "ViewSet":
        return ViewSet([self.get(vid) for vid in view_ids])

    def from_iteration(self, t: int) -> "ViewSet":
        """Vistas cuyo origen es exactamente la iteración t."""
        return ViewSet([e for e in self.entries if e.iteration_of_origin == t])

    def latest_iteration(self) -> Optional[int]:
        return max((e.iteration_of_origin for e in self.entries), default=None)
