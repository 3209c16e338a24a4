"""Loss terms with hand-written gradients.

Image-space terms return the gradient with respect to their first argument
(rendered rgb, depth or transmittance); field-space terms (gravity, total
variation) return parameter gradients directly.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Mapping, NamedTuple, Optional, Union

import numpy as np

import field as fld
from errors import ConfigError, LossError

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-6
DEGENERATE_VARIANCE = 1e-12


# ============= Configuration =============
@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    grav: float = 3.5
    sky_op: float = 1.0
    sky_l1: float = 1.0
    depth: float = 0.1
    grad: float = 0.5          # gradient-matching weight inside the depth loss
    perspective: float = 0.5   # perspective crops relative to panorama reconstruction
    tv: float = 1.0

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"Loss weight '{name}' must be finite and non-negative, got {value}")

    def weight_of(self, term: str) -> float:
        if term == "rgb_persp":
            return self.rgb * self.perspective
        if term in ("rgb", "grav", "sky_op", "sky_l1", "depth", "tv"):
            return getattr(self, term)
        raise LossError(f"Unknown loss term '{term}'")


@dataclass(frozen=True)
class GravityConfig:
    n_samples: int = 4096
    delta_max: Optional[float] = None  # defaults to 2.5% of the cube height
    epsilon: float = 1.0

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError(f"Gravity sample count must be positive, got {self.n_samples}")
        if self.delta_max is not None and not self.delta_max > 0:
            raise ConfigError(f"delta_max must be positive, got {self.delta_max}")
        if not self.epsilon >= 0:
            raise ConfigError(f"Gravity slack must be non-negative, got {self.epsilon}")

    def resolve_delta_max(self, cube_height: float) -> float:
        return self.delta_max if self.delta_max is not None else 0.025 * cube_height


Grad = Union[np.ndarray, fld.ParamGrads, None]


class LossTerm(NamedTuple):
    value: float
    grad: Grad = None
    flagged: bool = False


@dataclass
class LossReport:
    terms: Dict[str, float]
    total: float
    grads: fld.ParamGrads
    flags: Dict[str, bool]

    def as_record(self) -> Dict[str, float]:
        record = {f"loss_{k}": v for k, v in self.terms.items()}
        record["total"] = self.total
        return record


# ============= Gravity-based density variation =============
def gravity_penalty(sigma: np.ndarray, sigma_up: np.ndarray, epsilon: float) -> float:
    """Mean of ReLU(sigma(x + dz) - sigma(x) - epsilon) over given pairs."""
    return float(np.mean(np.maximum(np.asarray(sigma_up) - np.asarray(sigma) - epsilon, 0.0)))


def _bounds(source):
    if isinstance(source, fld.TriPlaneField):
        return source.extent.lower, source.extent.upper
    return np.asarray(source.lower, np.float64), np.asarray(source.upper, np.float64)


def gravity_loss(source, w: np.ndarray, cfg: GravityConfig, rng: np.random.Generator) -> LossTerm:
    """Monte Carlo penalty on density that grows with altitude beyond the slack.

    ``source`` is a TriPlaneField (gradients returned) or any analytic field
    exposing ``lower``, ``upper`` and ``query`` (value only).
    """
    lower, upper = _bounds(source)
    span = upper - lower
    delta_max = cfg.resolve_delta_max(float(span[2]))
    m = cfg.n_samples
    x = lower + rng.random((m, 3)) * span
    u = delta_max * (1.0 - rng.random(m))
    x_up = x.copy()
    x_up[:, 2] += u

    if not isinstance(source, fld.TriPlaneField):
        sigma = np.asarray(source.query(x, w)[0])
        sigma_up = np.asarray(source.query(x_up, w)[0])
        return LossTerm(gravity_penalty(sigma, sigma_up, cfg.epsilon), None)

    sigma, _, cache = fld.query(source, x, w, return_cache=True)
    sigma_up, _, cache_up = fld.query(source, x_up, w, return_cache=True)
    active = (sigma_up - sigma - cfg.epsilon) > 0.0
    value = float(np.mean(np.where(active, sigma_up - sigma - cfg.epsilon, 0.0)))

    grads = source.zero_grads()
    no_rgb = np.zeros((m, 3))
    d_sigma = active.astype(np.float64) / m
    g_up, _ = fld.query_backward(source, cache_up, d_sigma, no_rgb)
    g_lo, _ = fld.query_backward(source, cache, -d_sigma, no_rgb)
    for part in (g_up, g_lo):
        for name, g in part.items():
            grads[name] += g
    return LossTerm(value, grads)


# ============= Total variation on the planes =============
def tv_loss(field: fld.TriPlaneField) -> LossTerm:
    """Mean squared neighbour difference summed over the three planes."""
    value = 0.0
    grads = field.zero_grads()
    for name in fld.PARAM_GROUPS["planes"]:
        p = getattr(field, name).astype(np.float64)
        g = grads[name]
        for axis in (0, 1):
            d = np.diff(p, axis=axis)
            value += float(np.mean(d * d))
            gd = 2.0 * d / d.size
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            g[tuple(hi)] += gd
            g[tuple(lo)] -= gd
    return LossTerm(value, grads)


# ============= Scale/shift-invariant depth =============
class ScaleShift(NamedTuple):
    s: float
    t: float
    flagged: bool


def _valid_depth_mask(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    valid = np.isfinite(pred) & np.isfinite(target)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    return valid


def fit_scale_shift(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None) -> ScaleShift:
    """Least-squares (s, t) minimizing sum (s*pred + t - target)^2 over valid pixels."""
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    valid = _valid_depth_mask(pred, target, mask)
    n = int(valid.sum())
    if n < 2:
        raise LossError(f"Scale/shift fit needs at least 2 valid pixels, got {n}")
    d, y = pred[valid], target[valid]
    dc, yc = d - d.mean(), y - y.mean()
    cxx = float(dc @ dc)
    if cxx / n < DEGENERATE_VARIANCE:
        logger.debug("Degenerate depth map (variance %.3g), falling back to a pure shift", cxx / n)
        return ScaleShift(1.0, float(np.mean(y - d)), True)
    s = float(dc @ yc) / cxx
    return ScaleShift(s, float(y.mean() - s * d.mean()), False)


def depth_loss(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None,
               lambda_grad: float = 0.5) -> LossTerm:
    """Aligned L1 plus forward-difference gradient matching, both over N valid pixels.

    The gradient flows through the closed-form (s, t) as well.
    """
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise LossError(f"Depth maps must be matching 2D arrays, got {pred.shape} and {target.shape}")
    valid = _valid_depth_mask(pred, target, mask)
    fit = fit_scale_shift(pred, target, valid)
    s, t = fit.s, fit.t
    n = int(valid.sum())
    d = np.where(valid, pred, 0.0)
    y = np.where(valid, target, 0.0)

    r = np.where(valid, s * d + t - y, 0.0)
    sign_r = np.sign(r)
    data = float(np.abs(r).sum()) / n

    grad_direct = sign_r * s / n
    g_s = float((sign_r * d).sum()) / n
    g_t = float(sign_r.sum()) / n

    grad_term = 0.0
    for axis in (0, 1):
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        edge = valid[lo] & valid[hi]
        dd = d[hi] - d[lo]
        e = np.where(edge, s * dd - (y[hi] - y[lo]), 0.0)
        sign_e = np.sign(e)
        grad_term += float(np.abs(e).sum()) / n
        ge = lambda_grad * sign_e / n
        grad_direct[hi] += ge * s
        grad_direct[lo] -= ge * s
        g_s += lambda_grad * float((sign_e * dd).sum()) / n

    value = data + lambda_grad * grad_term
    if fit.flagged:
        grad = grad_direct - g_t / n
    else:
        dc = d - d[valid].mean()
        yc = y - y[valid].mean()
        cxx = float((dc[valid] ** 2).sum())
        ds = (yc - 2.0 * s * dc) / cxx
        grad = grad_direct + (g_s - d[valid].mean() * g_t) * ds - g_t * s / n
    return LossTerm(value, np.where(valid, grad, 0.0), fit.flagged)


# ============= Color and sky =============
def photometric_loss(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None) -> LossTerm:
    """Mean squared error over valid pixels and channels."""
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise LossError(f"Image shapes differ: {pred.shape} vs {target.shape}")
    if mask is None:
        weight = np.ones(pred.shape)
    else:
        weight = np.broadcast_to(np.asarray(mask, dtype=bool)[..., None], pred.shape).astype(np.float64)
    n_el = weight.sum()
    if n_el == 0:
        return LossTerm(0.0, np.zeros(pred.shape), True)
    diff = (pred - target) * weight
    return LossTerm(float((diff * diff).sum() / n_el), 2.0 * diff / n_el)


def sky_opacity_bce(t_out: np.ndarray, sky_mask: np.ndarray, mask: Optional[np.ndarray] = None) -> LossTerm:
    """Binary cross-entropy with residual transmittance as the probability of sky."""
    t_out = np.asarray(t_out, np.float64)
    m = np.asarray(sky_mask, np.float64)
    weight = np.ones(t_out.shape) if mask is None else np.asarray(mask, np.float64)
    n = weight.sum()
    if n == 0:
        return LossTerm(0.0, np.zeros(t_out.shape), True)
    p = np.clip(t_out, BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = -(m * np.log(p) + (1.0 - m) * np.log1p(-p))
    value = float((bce * weight).sum() / n)
    inside = (t_out > BCE_CLAMP) & (t_out < 1.0 - BCE_CLAMP)
    grad = np.where(inside, (-m / p + (1.0 - m) / (1.0 - p)) * weight / n, 0.0)
    return LossTerm(value, grad)


def sky_masked_l1(pred: np.ndarray, target: np.ndarray, sky_mask: np.ndarray) -> LossTerm:
    """Per-pixel channel-mean L1 over sky pixels, divided by the sky-pixel count."""
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise LossError(f"Image shapes differ: {pred.shape} vs {target.shape}")
    m = np.asarray(sky_mask, dtype=bool)
    n_sky = int(m.sum())
    if n_sky == 0:
        logger.debug("Empty sky mask, sky L1 term skipped")
        return LossTerm(0.0, np.zeros(pred.shape), True)
    channels = pred.shape[-1]
    diff = (pred - target) * m[..., None]
    value = float(np.abs(diff).sum() / (channels * n_sky))
    return LossTerm(value, np.sign(diff) / (channels * n_sky))


# ============= Weighted total =============
def total_loss(terms: Mapping[str, LossTerm], weights: LossWeights) -> LossReport:
    """Weighted sum of terms; parameter-space gradients are summed with the same weights."""
    weights.validate()
    total = 0.0
    grads: fld.ParamGrads = {}
    values, flags = {}, {}
    for name, term in terms.items():
        lam = weights.weight_of(name)
        values[name] = term.value
        flags[name] = term.flagged
        total += lam * term.value
        if isinstance(term.grad, dict):
            for pname, g in term.grad.items():
                if pname in grads:
                    grads[pname] = grads[pname] + lam * g
                else:
                    grads[pname] = lam * g
    return LossReport(values, total, grads, flags)
