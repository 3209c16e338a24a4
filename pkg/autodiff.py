"""Backward pass over the fixed render/loss graph, Adam, and per-scene fitting."""
import json
import logging
import math
import time
from dataclasses import dataclass, field as dataclass_field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

import field as fld
import losses
import renderer
from cameras import (CameraSpec, Panorama, Perspective, Pose, SamplerConfig, ViewSample, crop_training_view,
                     make_rays, sample_training_view)
from errors import ConfigError, FitDivergedError, MissingCacheError, NonFiniteGradientError

logger = logging.getLogger(__name__)

VIEW_KINDS = ("satellite", "panorama", "perspective")


# ============= Optimizer state =============
class ParamSet:
    """Parameters of a field with matching gradient and Adam moment buffers."""

    def __init__(self, field: fld.TriPlaneField):
        self.field = field
        self.grads = field.zero_grads()
        self.m = field.zero_grads()
        self.v = field.zero_grads()
        self.step = 0

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.field.parameters()

    def groups(self) -> Dict[str, Tuple[str, ...]]:
        return dict(fld.PARAM_GROUPS)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: fld.ParamGrads, scale: float = 1.0) -> None:
        for name, g in grads.items():
            self.grads[name] += scale * g


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()})


def _group_name(name: str) -> str:
    try:
        return fld.group_of(name)
    except KeyError:
        return name


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam update, in place; moments live in float64."""
    for name, g in grads.items():
        bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        if bad:
            raise NonFiniteGradientError(_group_name(name), name, bad)
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        if name not in grads:
            continue
        g = np.asarray(grads[name], np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)
    return params


# ============= Supervision =============
@dataclass
class SupervisedView:
    kind: str
    camera: CameraSpec
    image: np.ndarray
    code_index: int = 0
    depth: Optional[np.ndarray] = None      # relative depth pseudo-label
    sky_mask: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in VIEW_KINDS:
            raise ConfigError(f"Unknown view kind '{self.kind}'")
        h, w = self.image.shape[:2]
        if (h, w) != (self.camera.height, self.camera.width):
            raise ConfigError(f"View '{self.name}' image is {w}x{h} but its camera is "
                              f"{self.camera.width}x{self.camera.height}")


def perspective_crop(view: SupervisedView, rng: np.random.Generator, sampler: SamplerConfig,
                     sample: Optional[ViewSample] = None) -> SupervisedView:
    """Perspective crop of a panorama view, with its labels resampled alongside.

    ``sample`` defaults to a fresh draw from the sampler.
    """
    pano = view.camera
    if not isinstance(pano, Panorama):
        raise ConfigError("Perspective crops need a panorama view")
    if abs(pano.pose.pitch) > 1e-12 or abs(pano.pose.roll) > 1e-12:
        raise ConfigError("Perspective crops need a level panorama (zero pitch and roll)")
    if sample is None:
        sample = sample_training_view(rng, sampler)
    width, height = sampler.render_size

    def crop(image):
        return crop_training_view(image, sample, sampler, pano.yaw_span, pano.pitch_span)

    image, inside = crop(view.image)
    depth = sky = None
    if view.depth is not None:
        depth = crop(view.depth)[0]
    if view.sky_mask is not None:
        sky = crop(view.sky_mask.astype(np.float64))[0] > 0.5
    if view.valid is not None:
        inside &= crop(view.valid.astype(np.float64))[0] > 0.5
    pose = Pose(pano.pose.position, pano.pose.yaw + sample.yaw, sample.pitch, 0.0)
    camera = Perspective(pose, sample.fov_deg, width, height)
    return SupervisedView("perspective", camera, image, view.code_index, depth, sky, inside,
                          name=f"{view.name}@crop")


def random_patch(shape: Tuple[int, int], size: int, rng: np.random.Generator) -> Tuple[slice, slice]:
    h, w = shape
    ph, pw = min(size, h), min(size, w)
    r0 = int(rng.integers(h - ph + 1))
    c0 = int(rng.integers(w - pw + 1))
    return slice(r0, r0 + ph), slice(c0, c0 + pw)


# ============= Forward and backward for one view =============
@dataclass
class PassCache:
    march: Optional[renderer.MarchCache]
    code_index: int
    d_rgb: np.ndarray
    d_depth: Optional[np.ndarray]
    d_t_out: Optional[np.ndarray]


def view_forward(
    field: fld.TriPlaneField,
    view: SupervisedView,
    patch: Tuple[slice, slice],
    weights: losses.LossWeights,
    march_cfg: renderer.MarchConfig,
    rng: Optional[np.random.Generator] = None,
    use_depth: bool = True,
) -> Tuple[Dict[str, losses.LossTerm], PassCache]:
    """Render a patch of one view and evaluate its image-space loss terms."""
    rays = make_rays(view.camera)
    rows, cols = np.indices(rays.shape)
    ph = rows[patch].shape
    index = (rows[patch] * rays.shape[1] + cols[patch]).ravel()
    w = field.code(view.code_index)
    res = renderer.march_rays(field, field.sky, rays.origins[index], rays.directions[index], w, march_cfg,
                              rng=rng, return_cache=True)
    rgb = res.rgb.reshape(ph + (3,))
    t_out = res.t_out.reshape(ph)
    valid = None if view.valid is None else view.valid[patch]

    terms: Dict[str, losses.LossTerm] = {}
    rgb_key = "rgb_persp" if view.kind == "perspective" else "rgb"
    terms[rgb_key] = losses.photometric_loss(rgb, view.image[patch], valid)
    d_rgb = weights.weight_of(rgb_key) * terms[rgb_key].grad
    d_t_out = d_depth = None

    if view.sky_mask is not None and view.kind != "satellite":
        sky = view.sky_mask[patch]
        sky_in = sky if valid is None else sky & valid
        terms["sky_op"] = losses.sky_opacity_bce(t_out, sky, valid)
        terms["sky_l1"] = losses.sky_masked_l1(rgb, view.image[patch], sky_in)
        d_t_out = weights.sky_op * terms["sky_op"].grad
        d_rgb = d_rgb + weights.sky_l1 * terms["sky_l1"].grad

    if use_depth and view.depth is not None:
        depth = res.depth.reshape(ph)
        mask = np.isfinite(depth) & np.isfinite(view.depth[patch])
        if valid is not None:
            mask &= valid
        if view.sky_mask is not None:
            mask &= ~view.sky_mask[patch]
        if mask.sum() >= 2:
            terms["depth"] = losses.depth_loss(depth, view.depth[patch], mask, weights.grad)
            d_depth = weights.depth * terms["depth"].grad

    for key in list(terms):
        terms[key] = terms[key]._replace(grad=None)
    return terms, PassCache(res.cache, view.code_index, d_rgb.reshape(-1, 3),
                            None if d_depth is None else d_depth.ravel(),
                            None if d_t_out is None else d_t_out.ravel())


def backward(field: fld.TriPlaneField, cache: Optional[PassCache]) -> fld.ParamGrads:
    """Parameter gradients of the weighted image-space losses recorded in ``cache``."""
    if cache is None or cache.march is None:
        raise MissingCacheError("Backward pass needs the forward cache of the same pass")
    grads = field.zero_grads()
    part, dw = renderer.march_backward(field, field.sky, cache.march, cache.d_rgb, cache.d_depth, cache.d_t_out)
    for name, g in part.items():
        grads[name] += g
    grads["codes"][cache.code_index] += dw
    return grads


def scene_loss(
    field: fld.TriPlaneField,
    view: SupervisedView,
    patch: Tuple[slice, slice],
    weights: losses.LossWeights,
    march_cfg: renderer.MarchConfig,
    gravity_cfg: losses.GravityConfig,
    rng: np.random.Generator,
    regularizer: str = "gravity",
    use_depth: bool = True,
) -> losses.LossReport:
    """Every loss term for one view patch plus the density regularizer, with gradients."""
    march_rng = rng if march_cfg.jitter else None
    terms, cache = view_forward(field, view, patch, weights, march_cfg, march_rng, use_depth)
    if regularizer == "gravity":
        terms["grav"] = losses.gravity_loss(field, field.code(view.code_index), gravity_cfg, rng)
    elif regularizer == "tv":
        terms["tv"] = losses.tv_loss(field)
    elif regularizer != "none":
        raise ConfigError(f"Unknown regularizer '{regularizer}'")
    report = losses.total_loss(terms, weights)
    image_grads = backward(field, cache)
    for name, g in image_grads.items():
        report.grads[name] = report.grads.get(name, 0.0) + g
    return report


# ============= Fitting =============
@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    patch_size: int = 24
    seed: int = 0
    weights: losses.LossWeights = losses.LossWeights()
    gravity: losses.GravityConfig = losses.GravityConfig()
    march: renderer.MarchConfig = renderer.MarchConfig(n_samples=64, jitter=True)
    sampler: SamplerConfig = SamplerConfig(render_size=(64, 64))
    view_probs: Tuple[float, float, float] = (0.3, 0.4, 0.3)
    regularizer: str = "gravity"
    use_depth: bool = True
    use_perspective: bool = True
    eval_every: int = 0
    checkpoint_every: int = 0
    progress: bool = False

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ConfigError(f"Learning rate must be finite and non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")
        if self.patch_size < 2:
            raise ConfigError(f"patch_size must be at least 2, got {self.patch_size}")
        if self.regularizer not in ("gravity", "tv", "none"):
            raise ConfigError(f"Unknown regularizer '{self.regularizer}'")
        if len(self.view_probs) != 3 or min(self.view_probs) < 0 or sum(self.view_probs) <= 0:
            raise ConfigError(f"view_probs must be three non-negative weights, got {self.view_probs}")
        self.weights.validate()
        self.gravity.validate()
        self.march.validate()


@dataclass
class FitResult:
    field: fld.TriPlaneField
    log: List[Dict[str, float]] = dataclass_field(default_factory=list)
    checkpoint: Optional[str] = None


def _view_pools(views: Sequence[SupervisedView], cfg: FitConfig) -> Tuple[List[str], np.ndarray, Dict]:
    pools = {
        "satellite": [v for v in views if v.kind == "satellite"],
        "panorama": [v for v in views if v.kind == "panorama"],
    }
    if not pools["satellite"] or not pools["panorama"]:
        raise ConfigError("Fitting needs at least one satellite view and one panorama")
    pools["perspective"] = pools["panorama"] if cfg.use_perspective else []
    kinds = [k for k in VIEW_KINDS if pools[k]]
    probs = np.array([cfg.view_probs[VIEW_KINDS.index(k)] for k in kinds], dtype=np.float64)
    if probs.sum() <= 0:
        raise ConfigError("view_probs leave no view kind to sample")
    return kinds, probs / probs.sum(), pools


def evaluate_views(field: fld.TriPlaneField, views: Sequence[SupervisedView], march_cfg: renderer.MarchConfig,
                   threads: Optional[int] = None) -> List[float]:
    """PSNR of deterministic renders against each view's image."""
    from metrics import psnr

    eval_cfg = replace(march_cfg, jitter=False)
    scores = []
    for view in views:
        out = renderer.render_view(field, field.sky, view.camera, field.code(view.code_index), eval_cfg,
                                   threads=threads)
        scores.append(psnr(out.rgb, view.image, view.valid))
    return scores


def fit_scene(
    views: Sequence[SupervisedView],
    cfg: FitConfig,
    extent: Optional[fld.SceneExtent] = None,
    field_cfg: Optional[fld.FieldConfig] = None,
    field: Optional[fld.TriPlaneField] = None,
    holdout: Sequence[SupervisedView] = (),
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> FitResult:
    """Optimize planes, decoder, sky and illumination codes against a supervised view set.

    Each iteration draws a view kind, a view and a patch, then takes one
    Adam step on the weighted total loss. The log holds one record per
    iteration; ``elapsed_s`` is the only non-deterministic field.
    """
    cfg.validate()
    kinds, probs, pools = _view_pools(views, cfg)
    rng = np.random.default_rng(cfg.seed)
    if field is None:
        n_codes = max(v.code_index for v in views) + 1
        field = (field_cfg or fld.FieldConfig()).build(extent or fld.SceneExtent(), n_codes=n_codes, rng=rng)
    params = ParamSet(field)
    state = AdamState(params.m, params.v)

    log: List[Dict[str, float]] = []
    log_file = open(log_path, "w") if log_path is not None else None
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_checkpoint = None
    # parameters of the most recent finite-loss iteration, before its update
    last_good = field.copy()
    start = time.perf_counter()

    try:
        for it in tqdm(range(1, cfg.iterations + 1), desc="fit", disable=not cfg.progress):
            kind = kinds[int(rng.choice(len(kinds), p=probs))]
            pool = pools[kind]
            view = pool[int(rng.integers(len(pool)))]
            if kind == "perspective":
                view = perspective_crop(view, rng, cfg.sampler)
            patch = random_patch(view.image.shape[:2], cfg.patch_size, rng)

            report = scene_loss(field, view, patch, cfg.weights, cfg.march, cfg.gravity, rng,
                                cfg.regularizer, cfg.use_depth)
            if not math.isfinite(report.total):
                recovery = last_checkpoint
                if ckpt_dir is not None:
                    recovery = str(ckpt_dir / f"last_good_{it - 1:06d}.tpf")
                    fld.save_checkpoint(last_good, recovery)
                logger.error("Total loss diverged at iteration %d; keeping parameters from iteration %d",
                             it, it - 1)
                raise FitDivergedError(it, recovery, last_good)
            last_good = field.copy()

            params.zero_grad()
            params.accumulate(report.grads)
            adam_step(params.params, params.grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

            record = {"iteration": it, "kind": kind, "view": view.name}
            record.update(report.as_record())
            if cfg.eval_every and holdout and it % cfg.eval_every == 0:
                record["eval_psnr"] = float(np.mean(evaluate_views(field, holdout, cfg.march)))
            if ckpt_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                last_checkpoint = str(ckpt_dir / f"fit_{it:06d}.tpf")
                fld.save_checkpoint(field, last_checkpoint)
            record["elapsed_s"] = time.perf_counter() - start
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if it % max(1, cfg.iterations // 10) == 0:
                logger.info("iter %d/%d total %.5f (%s)", it, cfg.iterations, report.total, kind)
    finally:
        if log_file is not None:
            log_file.close()
    params.step = state.step
    return FitResult(field, log, last_checkpoint)


def read_training_log(path: Union[str, Path]) -> List[Dict[str, float]]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
