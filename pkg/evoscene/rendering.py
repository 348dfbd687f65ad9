"""
Renderizado: splats diferenciables (operador Π), profundidad de malla por
intersección exacta rayo-triángulo, disparidad normalizada y pérdidas fotométricas.
"""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.ndimage import gaussian_filter
from skimage.transform import resize

from evoscene.errors import ConfigError, GeometryError
from evoscene.geometry import CameraIntrinsics, CameraPose, DepthMap, pixel_rays

if TYPE_CHECKING:
    from evoscene.completion import SceneLatent
    from evoscene.meshing import TexturedMesh

BACKGROUND = (0.0, 0.0, 0.0)
ALPHA_THRESHOLD = 1e-6
NEAR_PLANE = 1e-6
SPLAT_CUTOFF_SIGMAS = 3.0
MIN_SPLAT_SIGMA_PX = 0.5

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # ventana 11×11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# =====================================
# TIPOS
# =====================================

@dataclass(eq=False)
class SplatRaster:
    """
    Fragmentos de un render ordenados por (píxel, profundidad, índice de vóxel)
    y la matriz dispersa de pesos de composición W (píxeles × vóxeles):
    rgb = W · colores + fondo · T_final.
    """

    width: int
    height: int
    pixel: np.ndarray
    splat: np.ndarray
    alpha: np.ndarray
    falloff: np.ndarray
    weight: np.ndarray
    final_transmittance: np.ndarray
    weights: sparse.csr_matrix
    splat_depth: np.ndarray


@dataclass(eq=False)
class RenderedFrame:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    raster: Optional[SplatRaster] = None


@dataclass(eq=False)
class DisparityMap:
    """Disparidad normalizada a [0, 1] (fondo 0) y la inversa de profundidad cruda (NaN = inválida)."""

    normalized: np.ndarray
    raw: np.ndarray

    @property
    def width(self) -> int:
        return self.normalized.shape[1]

    @property
    def height(self) -> int:
        return self.normalized.shape[0]


def _target_intrinsics(K: CameraIntrinsics, size: Tuple[int, int]) -> CameraIntrinsics:
    width, height = size
    if width < 1 or height < 1:
        raise GeometryError(f"tamaño de imagen inválido: {width}x{height}")
    if (width, height) == (K.width, K.height):
        return K
    return K.scaled(width, height)


# =====================================
# SPLATS
# =====================================

def rasterize(latent: "SceneLatent", K: CameraIntrinsics, E: CameraPose, size: Tuple[int, int]) -> SplatRaster:
    """
    Cada vóxel es una gaussiana 2D isótropa (sigma en píxeles = medio ancho proyectado
    del vóxel, corte a 3 sigma), compuesta de adelante hacia atrás.
    """
    K = _target_intrinsics(K, size)
    width, height = K.width, K.height
    n_pixels = width * height

    cam = E.transform(latent.centers())
    z = cam[:, 2]
    visible = np.flatnonzero(z > NEAR_PLANE)
    focal = 0.5 * (K.fx + K.fy)
    zv = z[visible]
    u = K.fx * cam[visible, 0] / zv + K.cx
    v = K.fy * cam[visible, 1] / zv + K.cy
    sigma = np.maximum(MIN_SPLAT_SIGMA_PX, 0.5 * focal * latent.scale[visible] / zv)
    radius = np.ceil(SPLAT_CUTOFF_SIGMAS * sigma).astype(np.int64) + 1

    pix_parts, spl_parts, g_parts, z_parts = [], [], [], []
    for r in np.unique(radius):
        group = np.flatnonzero(radius == r)
        offsets = np.arange(-r, r + 1)
        dx, dy = np.meshgrid(offsets, offsets, indexing="xy")
        px = np.rint(u[group])[:, None] + dx.ravel()[None, :]
        py = np.rint(v[group])[:, None] + dy.ravel()[None, :]
        d2 = (px - u[group][:, None]) ** 2 + (py - v[group][:, None]) ** 2
        s2 = sigma[group][:, None] ** 2
        keep = (d2 <= (SPLAT_CUTOFF_SIGMAS**2) * s2) & (px >= 0) & (px < width) & (py >= 0) & (py < height)
        rows, cols = np.nonzero(keep)
        pix_parts.append((py[rows, cols] * width + px[rows, cols]).astype(np.int64))
        spl_parts.append(visible[group[rows]])
        g_parts.append(np.exp(-d2[rows, cols] / (2.0 * s2[rows, 0])))
        z_parts.append(zv[group[rows]])

    if pix_parts:
        pixel = np.concatenate(pix_parts)
        splat = np.concatenate(spl_parts)
        falloff = np.concatenate(g_parts)
        frag_z = np.concatenate(z_parts)
    else:
        pixel = np.zeros(0, dtype=np.int64)
        splat = np.zeros(0, dtype=np.int64)
        falloff = np.zeros(0)
        frag_z = np.zeros(0)

    order = np.lexsort((splat, frag_z, pixel))
    pixel, splat, falloff = pixel[order], splat[order], falloff[order]
    alpha = np.clip(latent.opacity[splat] * falloff, 0.0, 1.0)

    # transmitancia exclusiva por píxel: suma de logs por grupo, contando alfas = 1 aparte
    opaque = alpha >= 1.0
    log_keep = np.log(np.where(opaque, 1.0, 1.0 - alpha))
    starts = np.ones(len(pixel), dtype=bool)
    starts[1:] = pixel[1:] != pixel[:-1]
    start_pos = np.flatnonzero(starts)[np.cumsum(starts) - 1] if len(pixel) else np.zeros(0, dtype=np.int64)
    cum_log = np.cumsum(log_keep)
    cum_opaque = np.cumsum(opaque)
    excl_log = cum_log - log_keep - (cum_log[start_pos] - log_keep[start_pos])
    excl_opaque = cum_opaque - opaque - (cum_opaque[start_pos] - opaque[start_pos])
    transmittance = np.where(excl_opaque > 0, 0.0, np.exp(excl_log))
    weight = alpha * transmittance

    final = np.ones(n_pixels)
    if len(pixel):
        ends = np.ones(len(pixel), dtype=bool)
        ends[:-1] = starts[1:]
        final[pixel[ends]] = transmittance[ends] * (1.0 - alpha[ends])

    weights = sparse.csr_matrix((weight, (pixel, splat)), shape=(n_pixels, len(latent)))
    return SplatRaster(width, height, pixel, splat, alpha, falloff, weight, final, weights, z)


def compose(raster: SplatRaster, latent: "SceneLatent", background: Sequence[float] = BACKGROUND) -> RenderedFrame:
    """Compone colores y profundidad esperada a partir de un raster ya calculado."""
    h, w = raster.height, raster.width
    rgb = raster.weights @ latent.colors + raster.final_transmittance[:, None] * np.asarray(background)[None, :]
    coverage = 1.0 - raster.final_transmittance
    weighted = np.bincount(raster.pixel, weights=raster.weight, minlength=h * w)
    depth_sum = np.bincount(raster.pixel, weights=raster.weight * raster.splat_depth[raster.splat], minlength=h * w)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(weighted > ALPHA_THRESHOLD, depth_sum / weighted, np.inf)
    return RenderedFrame(
        rgb=rgb.reshape(h, w, 3),
        alpha=coverage.reshape(h, w),
        depth=depth.reshape(h, w),
        raster=raster,
    )


def render(
    latent: "SceneLatent",
    K: CameraIntrinsics,
    E: CameraPose,
    size: Optional[Tuple[int, int]] = None,
    background: Sequence[float] = BACKGROUND,
) -> RenderedFrame:
    """
    Renderiza el latente desde la cámara (K, E) al tamaño (ancho, alto).
    Determinista: empates de profundidad por índice de vóxel.
    """
    size = size or (K.width, K.height)
    return compose(rasterize(latent, K, E, size), latent, background)


def color_gradient(raster: SplatRaster, grad_rgb: np.ndarray) -> np.ndarray:
    """∂L/∂color por vóxel = Wᵀ · ∂L/∂rgb (el render es afín en los colores)."""
    return raster.weights.T @ grad_rgb.reshape(-1, 3)


def opacity_gradient(
    raster: SplatRaster, latent: "SceneLatent", grad_rgb: np.ndarray, background: Sequence[float] = BACKGROUND
) -> np.ndarray:
    """
    ∂L/∂opacidad por vóxel. Para el fragmento f del píxel p:
    ∂C_p/∂α_f = T_f·c_f − (color compuesto detrás de f) / (1 − α_f).
    """
    g = grad_rgb.reshape(-1, 3)
    if len(raster.pixel) == 0:
        return np.zeros(len(latent))
    contrib = raster.weight[:, None] * latent.colors[raster.splat]
    starts = np.ones(len(raster.pixel), dtype=bool)
    starts[1:] = raster.pixel[1:] != raster.pixel[:-1]
    start_pos = np.flatnonzero(starts)[np.cumsum(starts) - 1]
    cum = np.cumsum(contrib, axis=0)
    inclusive = cum - cum[start_pos] + contrib[start_pos]
    total = np.zeros((raster.width * raster.height, 3))
    np.add.at(total, raster.pixel, contrib)
    total += raster.final_transmittance[:, None] * np.asarray(background)[None, :]
    behind = total[raster.pixel] - inclusive
    keep = 1.0 - raster.alpha
    ratio = np.divide(behind, keep[:, None], out=np.zeros_like(behind), where=keep[:, None] > 1e-12)
    transmittance = np.divide(raster.weight, raster.alpha, out=np.zeros_like(raster.weight), where=raster.alpha > 0)
    d_alpha = transmittance[:, None] * latent.colors[raster.splat] - ratio
    per_fragment = (d_alpha * g[raster.pixel]).sum(axis=1) * raster.falloff
    per_fragment = np.where(latent.opacity[raster.splat] * raster.falloff < 1.0, per_fragment, 0.0)
    return np.bincount(raster.splat, weights=per_fragment, minlength=len(latent))


# =====================================
# PROFUNDIDAD DE MALLA
# =====================================

def render_depth(
    mesh: "TexturedMesh",
    K: CameraIntrinsics,
    E: CameraPose,
    size: Optional[Tuple[int, int]] = None,
    chunk: int = 1 << 21,
) -> DepthMap:
    """
    Profundidad del triángulo más cercano por píxel (Möller–Trumbore exacto).
    Los píxeles sin intersección quedan inválidos.
    """
    K = _target_intrinsics(K, size or (K.width, K.height))
    width, height = K.width, K.height
    depth = np.full(width * height, np.inf)
    if len(mesh.faces) == 0:
        return DepthMap.from_array(depth.reshape(height, width))

    tris = mesh.vertices[mesh.faces]
    cam = E.transform(tris.reshape(-1, 3)).reshape(-1, 3, 3)
    z = cam[..., 2]
    in_front = np.all(z > NEAR_PLANE, axis=1)
    partial = ~in_front & np.any(z > NEAR_PLANE, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[..., 0] / z + K.cx
        v = K.fy * cam[..., 1] / z + K.cy
    x0 = np.where(in_front, np.floor(np.nan_to_num(u.min(axis=1), nan=0.0)), 0)
    x1 = np.where(in_front, np.ceil(np.nan_to_num(u.max(axis=1), nan=0.0)), width - 1)
    y0 = np.where(in_front, np.floor(np.nan_to_num(v.min(axis=1), nan=0.0)), 0)
    y1 = np.where(in_front, np.ceil(np.nan_to_num(v.max(axis=1), nan=0.0)), height - 1)
    x0 = np.clip(x0, 0, width - 1).astype(np.int64)
    x1 = np.clip(x1, -1, width - 1).astype(np.int64)
    y0 = np.clip(y0, 0, height - 1).astype(np.int64)
    y1 = np.clip(y1, -1, height - 1).astype(np.int64)
    active = np.flatnonzero((in_front | partial) & (x1 >= x0) & (y1 >= y0))
    nx = x1[active] - x0[active] + 1
    counts = nx * (y1[active] - y0[active] + 1)

    origin = E.center
    start = 0
    while start < len(active):
        stop = start + 1
        budget = counts[start]
        while stop < len(active) and budget + counts[stop] <= chunk:
            budget += counts[stop]
            stop += 1
        sel = active[start:stop]
        cnt = counts[start:stop]
        tri = np.repeat(sel, cnt)
        offsets = np.repeat(np.cumsum(cnt) - cnt, cnt)
        local = np.arange(cnt.sum()) - offsets
        row_len = np.repeat(nx[start:stop], cnt)
        px = np.repeat(x0[sel], cnt) + local % row_len
        py = np.repeat(y0[sel], cnt) + local // row_len
        _, dirs = pixel_rays(K, E, np.stack([px, py], axis=1))
        t = _moller_trumbore(origin, dirs, tris[tri])
        hit = np.isfinite(t)
        np.minimum.at(depth, (py * width + px)[hit], t[hit])
        start = stop
    return DepthMap.from_array(depth.reshape(height, width))


def _moller_trumbore(origin: np.ndarray, dirs: np.ndarray, tris: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Parámetro t de intersección por par rayo-triángulo; inf si no hay impacto."""
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > eps
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    s = origin[None, :] - v0
    bu = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    bv = np.einsum("ij,ij->i", dirs, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > NEAR_PLANE)
    return np.where(hit, t, np.inf)


# =====================================
# DISPARIDAD
# =====================================

def to_disparity(d: DepthMap) -> DisparityMap:
    """
    raw = 1/profundidad en píxeles válidos; normalizada = (raw - min) / (max - min)
    sobre los válidos. Rango constante → 1.0; inválidos → 0.
    """
    if not d.mask.any():
        raise GeometryError("to_disparity necesita al menos un píxel válido")
    raw = np.full(d.values.shape, np.nan)
    raw[d.mask] = 1.0 / d.values[d.mask]
    lo, hi = raw[d.mask].min(), raw[d.mask].max()
    normalized = np.zeros(d.values.shape)
    if hi > lo:
        normalized[d.mask] = (raw[d.mask] - lo) / (hi - lo)
    else:
        normalized[d.mask] = 1.0
    return DisparityMap(normalized=normalized, raw=raw)


def resize_disparity(disparity: DisparityMap, size: Tuple[int, int]) -> DisparityMap:
    """Reescala al tamaño (ancho, alto) de síntesis; bilineal, regiones inválidas siguen en 0."""
    width, height = size
    if (width, height) == (disparity.width, disparity.height):
        return disparity
    valid = np.isfinite(disparity.raw)
    mask = resize(valid.astype(np.float64), (height, width), order=0, anti_aliasing=False) > 0.5
    normalized = resize(disparity.normalized, (height, width), order=1, mode="edge", anti_aliasing=False)
    raw = resize(np.where(valid, disparity.raw, 0.0), (height, width), order=1, mode="edge", anti_aliasing=False)
    return DisparityMap(
        normalized=np.where(mask, np.clip(normalized, 0.0, 1.0), 0.0),
        raw=np.where(mask, raw, np.nan),
    )


# =====================================
# PÉRDIDAS FOTOMÉTRICAS
# =====================================

def _check_sizes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise GeometryError(f"tamaños distintos: {a.shape} vs {b.shape}")


def _window(x: np.ndarray) -> np.ndarray:
    sigma = (SSIM_SIGMA, SSIM_SIGMA) + (0.0,) * (x.ndim - 2)
    return gaussian_filter(x, sigma=sigma, mode="constant", cval=0.0, truncate=SSIM_RADIUS / SSIM_SIGMA)


def _local_mean(x: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """Media local con ventana gaussiana renormalizada en los bordes."""
    return _window(x) / norm


def _local_mean_adjoint(x: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return _window(x / norm)


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    norm = _window(np.ones_like(a))
    mu_a, mu_b = _local_mean(a, norm), _local_mean(b, norm)
    var_a = _local_mean(a * a, norm) - mu_a**2
    var_b = _local_mean(b * b, norm) - mu_b**2
    cov = _local_mean(a * b, norm) - mu_a * mu_b
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * cov + c2
    b1 = mu_a**2 + mu_b**2 + c1
    b2 = var_a + var_b + c2
    return norm, mu_a, mu_b, a1, a2, b1, b2


def loss_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Diferencia absoluta media."""
    _check_sizes(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_gradient(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sign(a - b) / a.size


def loss_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    SSIM medio local: ventana gaussiana 11×11, sigma 1.5, K1=0.01, K2=0.03, rango dinámico 1.
    """
    _check_sizes(a, b)
    _, _, _, a1, a2, b1, b2 = _ssim_terms(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_gradient(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """∂ SSIM medio / ∂a, analítico a través de las medias locales."""
    _check_sizes(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm, mu_a, mu_b, a1, a2, b1, b2 = _ssim_terms(a, b)
    f = (a1 * a2) / (b1 * b2)
    d_mu = f * (2 * mu_b / a1 - 2 * mu_a / b1) + 2 * mu_a * f / b2 - 2 * mu_b * f / a2
    d_aa = -f / b2
    d_ab = 2 * f / a2
    grad = (
        _local_mean_adjoint(d_mu, norm)
        + 2 * a * _local_mean_adjoint(d_aa, norm)
        + b * _local_mean_adjoint(d_ab, norm)
    )
    return grad / a.size


def photometric_loss(
    frames: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    weights: Tuple[float, float, float] = (1.0, 0.0, 1.0),
) -> float:
    """
    Σ_k λ1·L1 + λ3·(1 − SSIM). El término perceptual (λ2) no se evalúa localmente.
    """
    l1_w, lpips_w, ssim_w = weights
    if lpips_w != 0:
        raise ConfigError("λ2 (perceptual) requiere un backend remoto de pérdida")
    if len(frames) != len(targets):
        raise GeometryError(f"{len(frames)} frames para {len(targets)} vistas")
    total = 0.0
    for frame, target in zip(frames, targets):
        total += l1_w * loss_l1(frame, target) + ssim_w * (1.0 - loss_ssim(frame, target))
    return total


def photometric_gradient(
    frame: np.ndarray, target: np.ndarray, weights: Tuple[float, float, float] = (1.0, 0.0, 1.0)
) -> np.ndarray:
    """∂/∂frame de λ1·L1 + λ3·(1 − SSIM) para un par."""
    l1_w, _, ssim_w = weights
    return l1_w * l1_gradient(frame, target) - ssim_w * ssim_gradient(frame, target)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    _check_sizes(a, b)
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)
