"""Ray marching and alpha compositing with residual transmittance.

C(r) = sum_k T_k (1 - exp(-sigma_k delta_k)) c_k + T_out c_sky(d)

Each ray is clipped to the field cube, split into ``n_samples`` equal steps
and sampled at step midpoints (or jittered inside each step while fitting).
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Tuple, Union

import numpy as np

import field as fld
from cameras import CameraSpec, Orthographic, RayBatch, make_rays
from errors import RenderError
from geodata import HeightGrid, scene_transform

logger = logging.getLogger(__name__)

SkySource = Union[fld.SkyMap, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class MarchConfig:
    n_samples: int = 96
    t_near: float = 0.0
    t_far: float = math.inf
    jitter: bool = False
    depth_valid_threshold: float = 0.5
    chunk_size: int = 8192

    def validate(self) -> None:
        if self.n_samples < 2:
            raise RenderError(f"n_samples must be at least 2, got {self.n_samples}")
        if not (self.t_near >= 0.0 and self.t_far > self.t_near):
            raise RenderError(f"Need t_far > t_near >= 0, got [{self.t_near}, {self.t_far}]")


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    t_out: np.ndarray
    valid: np.ndarray


class MarchCache(NamedTuple):
    t: np.ndarray
    delta: np.ndarray
    tau: np.ndarray
    rgb_s: np.ndarray
    weights: np.ndarray
    trans: np.ndarray
    t_out: np.ndarray
    c_sky: np.ndarray
    acc: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    query: Optional[fld.QueryCache]
    sky: Optional[fld.SkyCache]


class MarchResult(NamedTuple):
    rgb: np.ndarray
    depth: np.ndarray
    t_out: np.ndarray
    valid: np.ndarray
    cache: Optional[MarchCache]

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 - self.t_out


# ============= Sources =============
def source_bounds(source) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(source, fld.TriPlaneField):
        return source.extent.lower, source.extent.upper
    return np.asarray(source.lower, np.float64), np.asarray(source.upper, np.float64)


def _query(source, x: np.ndarray, w: np.ndarray, return_cache: bool):
    if isinstance(source, fld.TriPlaneField):
        if return_cache:
            return fld.query(source, x, w, return_cache=True)
        return fld.query(source, x, w) + (None,)
    sigma, rgb = source.query(x, w)
    return sigma, rgb, None


def sample_source(source, x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Density and color of a tri-plane field or an analytic field at points (M, 3)."""
    sigma, rgb, _ = _query(source, np.asarray(x, np.float64).reshape(-1, 3), w, False)
    return sigma, rgb


def _sky(sky: SkySource, d: np.ndarray, return_cache: bool):
    if isinstance(sky, fld.SkyMap):
        if return_cache:
            return fld.sample_sky(sky, d, return_cache=True)
        return fld.sample_sky(sky, d), None
    return np.asarray(sky(d), dtype=np.float64).reshape(-1, 3), None


def clip_to_cube(origins: np.ndarray, directions: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                 t_near: float = 0.0, t_far: float = math.inf) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab intersection of rays with an axis-aligned box; returns (t_enter, t_exit, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t1 = (lower - origins) * inv
        t2 = (upper - origins) * inv
    t_lo = np.where(np.isnan(t1) | np.isnan(t2), -np.inf, np.minimum(t1, t2))
    t_hi = np.where(np.isnan(t1) | np.isnan(t2), np.inf, np.maximum(t1, t2))
    t_enter = np.maximum(t_lo.max(axis=1), t_near)
    t_exit = np.minimum(t_hi.min(axis=1), t_far)
    hit = t_exit > t_enter
    return np.where(hit, t_enter, 0.0), np.where(hit, t_exit, 0.0), hit


# ============= Marching =============
def march_rays(source, sky: SkySource, origins: np.ndarray, directions: np.ndarray, w: np.ndarray,
               cfg: MarchConfig, rng: Optional[np.random.Generator] = None,
               return_cache: bool = False) -> MarchResult:
    """Composite a batch of rays (R, 3); rays missing the cube see pure sky."""
    cfg.validate()
    if isinstance(source, fld.TriPlaneField):
        source.check_finite()
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n_rays, n = origins.shape[0], cfg.n_samples

    lower, upper = source_bounds(source)
    t_enter, t_exit, _ = clip_to_cube(origins, directions, lower, upper, cfg.t_near, cfg.t_far)
    delta = (t_exit - t_enter) / n
    if cfg.jitter:
        if rng is None:
            raise RenderError("Jittered sampling needs a random generator")
        offsets = rng.random((n_rays, n))
    else:
        offsets = np.full((n_rays, n), 0.5)
    t = t_enter[:, None] + (np.arange(n)[None, :] + offsets) * delta[:, None]
    x = origins[:, None, :] + t[..., None] * directions[:, None, :]

    sigma, rgb_s, qcache = _query(source, x.reshape(-1, 3), w, return_cache)
    sigma = sigma.reshape(n_rays, n)
    rgb_s = rgb_s.reshape(n_rays, n, 3)

    tau = sigma * delta[:, None]
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))
    alpha = -np.expm1(-tau)
    weights = trans * alpha
    t_out = np.exp(-cum[:, -1])

    c_sky, scache = _sky(sky, directions, return_cache)
    rgb = np.einsum("rk,rkc->rc", weights, rgb_s) + t_out[:, None] * c_sky

    acc = weights.sum(axis=1)
    depth_raw = (weights * t).sum(axis=1) / np.maximum(acc, 1e-300)
    valid = acc >= cfg.depth_valid_threshold
    depth = np.where(valid, depth_raw, np.nan)

    cache = None
    if return_cache:
        cache = MarchCache(t, delta, tau, rgb_s, weights, trans, t_out, c_sky, acc, depth_raw, valid,
                           qcache, scache)
    return MarchResult(rgb, depth, t_out, valid, cache)


def march_ray(source, sky: SkySource, origin: np.ndarray, direction: np.ndarray, w: np.ndarray,
              cfg: MarchConfig, rng: Optional[np.random.Generator] = None):
    """Single-ray form: (rgb, depth, t_out, cache)."""
    res = march_rays(source, sky, np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)), w, cfg,
                     rng=rng, return_cache=True)
    return res.rgb[0], res.depth[0], res.t_out[0], res.cache


def march_backward(field: fld.TriPlaneField, sky: SkySource, cache: MarchCache,
                   d_rgb: Optional[np.ndarray] = None, d_depth: Optional[np.ndarray] = None,
                   d_t_out: Optional[np.ndarray] = None) -> Tuple[fld.ParamGrads, np.ndarray]:
    """Adjoint of march_rays.

    With tau_k = sigma_k delta and any composited quantity
    f = sum_k w_k g_k + T_out g_sky:
        df/dtau_m = T_{m+1} g_m - sum_{k>m} w_k g_k - T_out g_sky
    Expected depth D = sum w t / sum w behaves like g_k = (t_k - D) / sum w.
    """
    n_rays, n = cache.tau.shape
    zeros3 = np.zeros((n_rays, 3))
    d_rgb = zeros3 if d_rgb is None else np.asarray(d_rgb, np.float64).reshape(n_rays, 3)
    d_t_out = np.zeros(n_rays) if d_t_out is None else np.asarray(d_t_out, np.float64).reshape(n_rays)
    if d_depth is None:
        g_depth = np.zeros(n_rays)
    else:
        g_depth = np.where(cache.valid, np.nan_to_num(np.asarray(d_depth, np.float64).reshape(n_rays)), 0.0)

    g = np.einsum("rc,rkc->rk", d_rgb, cache.rgb_s)
    g += (g_depth / np.maximum(cache.acc, 1e-300))[:, None] * (cache.t - cache.depth[:, None])
    g_sky = (d_rgb * cache.c_sky).sum(axis=1)

    wg = cache.weights * g
    suffix = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1] - wg
    trans_next = cache.trans * np.exp(-cache.tau)
    d_tau = trans_next * g - suffix - (cache.t_out * (g_sky + d_t_out))[:, None]
    d_sigma = d_tau * cache.delta[:, None]
    d_rgb_s = cache.weights[..., None] * d_rgb[:, None, :]

    if cache.query is None:
        raise RenderError("Backward pass needs a tri-plane field forward cache")
    grads, dw = fld.query_backward(field, cache.query, d_sigma.ravel(), d_rgb_s.reshape(-1, 3))
    if isinstance(sky, fld.SkyMap) and cache.sky is not None:
        grads["sky"] = fld.sky_backward(sky, cache.sky, d_rgb * cache.t_out[:, None])
    return grads, dw


# ============= Whole views =============
def render_rays(source, sky: SkySource, rays: RayBatch, w: np.ndarray, cfg: MarchConfig,
                threads: Optional[int] = None, seed: int = 0) -> RenderOutput:
    """Chunked, optionally threaded rendering of a ray batch into image arrays."""
    n_rays = len(rays)
    starts = list(range(0, n_rays, cfg.chunk_size))

    def run(i_start):
        index, start = i_start
        stop = min(start + cfg.chunk_size, n_rays)
        rng = np.random.default_rng([seed, index]) if cfg.jitter else None
        return march_rays(source, sky, rays.origins[start:stop], rays.directions[start:stop], w, cfg, rng=rng)

    if threads is not None and threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, enumerate(starts)))
    else:
        parts = [run(item) for item in enumerate(starts)]

    h, w_px = rays.shape
    rgb = np.concatenate([p.rgb for p in parts]).reshape(h, w_px, 3)
    depth = np.concatenate([p.depth for p in parts]).reshape(h, w_px)
    t_out = np.concatenate([p.t_out for p in parts]).reshape(h, w_px)
    valid = np.concatenate([p.valid for p in parts]).reshape(h, w_px)
    return RenderOutput(rgb=rgb, depth=depth, opacity=1.0 - t_out, t_out=t_out, valid=valid)


def render_view(source, sky: SkySource, camera: CameraSpec, w: np.ndarray, cfg: MarchConfig,
                threads: Optional[int] = None, seed: int = 0) -> RenderOutput:
    out = render_rays(source, sky, make_rays(camera), w, cfg, threads=threads, seed=seed)
    logger.debug("Rendered %s view %dx%d, mean opacity %.3f", type(camera).__name__,
                 camera.width, camera.height, float(out.opacity.mean()))
    return out


def render_height(source, sky: SkySource, ortho_camera: Orthographic, w: np.ndarray, cfg: MarchConfig,
                  transform=None, crs: Optional[str] = None, nodata: float = float("nan"),
                  threads: Optional[int] = None) -> HeightGrid:
    """Height map z_cam - depth from a satellite render; invalid pixels carry nodata."""
    if not isinstance(ortho_camera, Orthographic):
        raise RenderError("Height maps need an orthographic camera")
    out = render_view(source, sky, ortho_camera, w, cfg, threads=threads)
    heights = np.where(out.valid, ortho_camera.altitude - out.depth, nodata)
    if transform is None:
        transform = scene_transform(ortho_camera.center, ortho_camera.extent,
                                    ortho_camera.width, ortho_camera.height)
    return HeightGrid(values=heights, transform=transform, crs=crs, nodata=nodata, units="m")
