"""Utilidades de imagen RGB: cuantización a 8 bits, PNG y muestreo bilineal."""

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates


def quantize(image: np.ndarray) -> np.ndarray:
    """Redondea un frame float [0,1] a la rejilla de 8 bits (sigue siendo float)."""
    return to_uint8(image).astype(np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: Union[str, Path], image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(Path(path), format="PNG")


def read_png(path: Union[str, Path]) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def sample_bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    Muestra colores (N, 3) en coordenadas de píxel continuas; fuera de la imagen
    se extiende el borde.
    """
    coords = np.stack([np.asarray(v, dtype=np.float64), np.asarray(u, dtype=np.float64)])
    return np.stack(
        [map_coordinates(image[..., c], coords, order=1, mode="nearest") for c in range(image.shape[2])],
        axis=-1,
    )
