"""Tri-plane radiance field: padded feature planes, decoder, sky map, checkpoints.

Every forward operation can return a cache; the matching ``*_backward``
function turns upstream gradients into parameter gradients. Gradients are
always accumulated in float64, whatever the storage dtype of the parameters.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import CheckpointFormatError, FieldError

logger = logging.getLogger(__name__)

PLANE_AXES = {"plane_xy": (0, 1), "plane_xz": (0, 2), "plane_yz": (1, 2)}
PARAM_GROUPS = {
    "planes": ("plane_xy", "plane_xz", "plane_yz"),
    "decoder": ("W1", "b1", "w_sigma", "b_sigma", "W_c", "b_c"),
    "sky": ("sky",),
    "codes": ("codes",),
}
ParamGrads = Dict[str, np.ndarray]


# ============= Scene extent and spatial tokens =============
def effective_extent(L: float, H_t: int, N: int) -> float:
    """Side of the cube once N border tokens pad an H_t token grid."""
    if H_t <= 0:
        raise FieldError(f"Token grid side must be positive, got {H_t}")
    if N < 0:
        raise FieldError(f"Padding width must be non-negative, got {N}")
    return L * (1.0 + 2.0 * N / H_t)


@dataclass(frozen=True)
class SceneExtent:
    L: float = 50.0
    H_t: int = 16
    N: int = 2
    z_floor: float = -4.0
    center: Tuple[float, float] = (0.0, 0.0)

    @property
    def W_t(self) -> int:
        return self.H_t

    @property
    def L_eff(self) -> float:
        return effective_extent(self.L, self.H_t, self.N)

    @property
    def cube_center(self) -> np.ndarray:
        return np.array([self.center[0], self.center[1], self.z_floor + self.L / 2.0])

    @property
    def lower(self) -> np.ndarray:
        return self.cube_center - self.L_eff / 2.0

    @property
    def upper(self) -> np.ndarray:
        return self.cube_center + self.L_eff / 2.0

    @property
    def inner_lower(self) -> np.ndarray:
        return self.cube_center - self.L / 2.0

    @property
    def inner_upper(self) -> np.ndarray:
        return self.cube_center + self.L / 2.0

    def pad_cells(self, inner_res: int) -> int:
        cells = self.N * inner_res / self.H_t
        if abs(cells - round(cells)) > 1e-9:
            raise FieldError(
                f"Plane resolution {inner_res} must be a multiple of the token grid {self.H_t} "
                f"when padding with {self.N} tokens"
            )
        return int(round(cells))

    def padded_res(self, inner_res: int) -> int:
        return inner_res + 2 * self.pad_cells(inner_res)


# ============= Parameters =============
@dataclass
class DecoderWeights:
    """Shared softplus trunk with a density head and an illumination-conditioned color head."""
    W1: np.ndarray
    b1: np.ndarray
    w_sigma: np.ndarray
    b_sigma: np.ndarray
    W_c: np.ndarray
    b_c: np.ndarray

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def channels(self) -> int:
        return self.W1.shape[1]

    @property
    def code_dim(self) -> int:
        return self.W_c.shape[1] - self.hidden

    @classmethod
    def zeros(cls, channels: int, hidden: int, code_dim: int, dtype=np.float64) -> "DecoderWeights":
        return cls(
            W1=np.zeros((hidden, channels), dtype),
            b1=np.zeros(hidden, dtype),
            w_sigma=np.zeros(hidden, dtype),
            b_sigma=np.zeros(1, dtype),
            W_c=np.zeros((3, hidden + code_dim), dtype),
            b_c=np.zeros(3, dtype),
        )


@dataclass
class SkyMap:
    """RGB grid on the sphere: rows follow the polar angle from +z, columns the azimuth."""
    grid: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape[:2]


@dataclass
class TriPlaneField:
    extent: SceneExtent
    plane_xy: np.ndarray
    plane_xz: np.ndarray
    plane_yz: np.ndarray
    decoder: DecoderWeights
    sky: SkyMap
    codes: np.ndarray

    @property
    def res(self) -> int:
        return self.plane_xy.shape[0]

    @property
    def channels(self) -> int:
        return self.plane_xy.shape[2]

    @property
    def code_dim(self) -> int:
        return self.codes.shape[1]

    @property
    def dtype(self):
        return self.plane_xy.dtype

    @classmethod
    def create(
        cls,
        extent: SceneExtent,
        res: int = 64,
        channels: int = 8,
        hidden: int = 32,
        code_dim: int = 8,
        n_codes: int = 1,
        sky_shape: Tuple[int, int] = (128, 128),
        rng: Optional[np.random.Generator] = None,
        plane_scale: float = 0.1,
        dtype=np.float32,
    ) -> "TriPlaneField":
        """Fresh field; ``res`` counts the cells covering the unpadded cube.

        Border (spatial token) cells start at zero, the density bias at -4 so
        free space starts nearly transparent.
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        pad = extent.pad_cells(res)
        full = res + 2 * pad

        def plane():
            p = np.zeros((full, full, channels), dtype=np.float64)
            p[pad:pad + res, pad:pad + res] = rng.normal(0.0, plane_scale, (res, res, channels))
            return p.astype(dtype)

        planes = [plane() for _ in PARAM_GROUPS["planes"]]
        decoder = DecoderWeights(
            W1=rng.normal(0.0, 1.0 / math.sqrt(channels), (hidden, channels)).astype(dtype),
            b1=np.zeros(hidden, dtype),
            w_sigma=rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden).astype(dtype),
            b_sigma=np.full(1, -4.0, dtype),
            W_c=rng.normal(0.0, 1.0 / math.sqrt(hidden + code_dim), (3, hidden + code_dim)).astype(dtype),
            b_c=np.zeros(3, dtype),
        )
        sky = SkyMap(np.full(tuple(sky_shape) + (3,), 0.5, dtype))
        codes = np.zeros((n_codes, code_dim), dtype)
        return cls(extent, planes[0], planes[1], planes[2], decoder, sky, codes)

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live references to every optimizable array, keyed by parameter name."""
        d = self.decoder
        return {
            "plane_xy": self.plane_xy,
            "plane_xz": self.plane_xz,
            "plane_yz": self.plane_yz,
            "W1": d.W1,
            "b1": d.b1,
            "w_sigma": d.w_sigma,
            "b_sigma": d.b_sigma,
            "W_c": d.W_c,
            "b_c": d.b_c,
            "sky": self.sky.grid,
            "codes": self.codes,
        }

    def zero_grads(self) -> ParamGrads:
        return {name: np.zeros(p.shape, np.float64) for name, p in self.parameters().items()}

    def copy(self) -> "TriPlaneField":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "TriPlaneField":
        d = self.decoder
        return TriPlaneField(
            extent=self.extent,
            plane_xy=self.plane_xy.astype(dtype),
            plane_xz=self.plane_xz.astype(dtype),
            plane_yz=self.plane_yz.astype(dtype),
            decoder=DecoderWeights(d.W1.astype(dtype), d.b1.astype(dtype), d.w_sigma.astype(dtype),
                                   d.b_sigma.astype(dtype), d.W_c.astype(dtype), d.b_c.astype(dtype)),
            sky=SkyMap(self.sky.grid.astype(dtype)),
            codes=self.codes.astype(dtype),
        )

    def check_finite(self) -> None:
        for name, p in self.parameters().items():
            if not np.all(np.isfinite(p)):
                raise FieldError(f"Parameter '{name}' holds non-finite values")

    def code(self, index: int) -> np.ndarray:
        return self.codes[index]


@dataclass(frozen=True)
class FieldConfig:
    res: int = 64
    channels: int = 8
    hidden: int = 32
    code_dim: int = 8
    sky_shape: Tuple[int, int] = (128, 128)
    plane_scale: float = 0.1

    def validate(self, extent: SceneExtent) -> None:
        for name in ("res", "channels", "hidden", "code_dim"):
            if getattr(self, name) < 1:
                raise FieldError(f"Field '{name}' must be positive, got {getattr(self, name)}")
        if min(self.sky_shape) < 1:
            raise FieldError(f"Sky map shape must be positive, got {self.sky_shape}")
        extent.pad_cells(self.res)

    def build(self, extent: SceneExtent, n_codes: int = 1, rng: Optional[np.random.Generator] = None,
              dtype=np.float32) -> TriPlaneField:
        self.validate(extent)
        return TriPlaneField.create(extent, self.res, self.channels, self.hidden, self.code_dim, n_codes,
                                    self.sky_shape, rng=rng, plane_scale=self.plane_scale, dtype=dtype)


def group_of(name: str) -> str:
    for group, names in PARAM_GROUPS.items():
        if name in names:
            return group
    raise KeyError(name)


# ============= Tri-plane sampling =============
class PlaneSample(NamedTuple):
    lo: np.ndarray       # (M, 3) lower cell index per axis, clamped
    hi: np.ndarray       # (M, 3) upper cell index per axis, clamped
    frac: np.ndarray     # (M, 3) bilinear fraction per axis
    inside: np.ndarray   # (M,) float mask, zero outside the cube


def locate(field: TriPlaneField, x: np.ndarray) -> PlaneSample:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    ext = field.extent
    u = (x - ext.lower) / ext.L_eff
    inside = np.all((u >= 0.0) & (u <= 1.0), axis=1)
    g = u * field.res - 0.5
    base = np.floor(g)
    frac = g - base
    base = base.astype(np.int64)
    lo = np.clip(base, 0, field.res - 1)
    hi = np.clip(base + 1, 0, field.res - 1)
    return PlaneSample(lo, hi, frac, inside.astype(np.float64))


def _corners(sample: PlaneSample, a: int, b: int):
    fa, fb = sample.frac[:, a], sample.frac[:, b]
    m = sample.inside
    return (
        (sample.lo[:, a], sample.lo[:, b], (1 - fa) * (1 - fb) * m),
        (sample.hi[:, a], sample.lo[:, b], fa * (1 - fb) * m),
        (sample.lo[:, a], sample.hi[:, b], (1 - fa) * fb * m),
        (sample.hi[:, a], sample.hi[:, b], fa * fb * m),
    )


def sample_triplane(field: TriPlaneField, x: np.ndarray, return_cache: bool = False):
    """Fused feature h(x) = phi_XY + phi_XZ + phi_YZ; zero outside the cube."""
    sample = locate(field, x)
    params = field.parameters()
    h = np.zeros((sample.inside.shape[0], field.channels), dtype=np.float64)
    for name, (a, b) in PLANE_AXES.items():
        plane = params[name]
        for ia, ib, w in _corners(sample, a, b):
            h += w[:, None] * plane[ia, ib]
    if return_cache:
        return h, sample
    return h


def triplane_backward(field: TriPlaneField, sample: PlaneSample, dh: np.ndarray) -> ParamGrads:
    res, channels = field.res, field.channels
    grads = {}
    for name, (a, b) in PLANE_AXES.items():
        flat_idx, weights = [], []
        for ia, ib, w in _corners(sample, a, b):
            flat_idx.append(ia * res + ib)
            weights.append(w)
        flat_idx = np.concatenate(flat_idx)
        weights = np.concatenate(weights)
        upstream = np.tile(dh, (4, 1))
        g = np.empty((res * res, channels), dtype=np.float64)
        for c in range(channels):
            g[:, c] = np.bincount(flat_idx, weights=weights * upstream[:, c], minlength=res * res)
        grads[name] = g.reshape(res, res, channels)
    return grads


# ============= Decoder =============
class DecoderCache(NamedTuple):
    h: np.ndarray
    a1: np.ndarray
    z: np.ndarray
    s: np.ndarray
    zc: np.ndarray
    rgb: np.ndarray
    w_shape: Tuple[int, ...]


def _softplus(a: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, a)


def decode(decoder: DecoderWeights, h: np.ndarray, w: np.ndarray, return_cache: bool = False):
    """Density (softplus, 1/m) and color (sigmoid, [0,1]^3) from a fused feature.

    ``w`` is one illumination code (d_w,) or one per point (M, d_w); only the
    color head sees it.
    """
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h2 = h.reshape(-1, decoder.channels)
    w = np.asarray(w, dtype=np.float64)
    w_rows = np.broadcast_to(w, (h2.shape[0], decoder.code_dim))

    a1 = h2 @ decoder.W1.astype(np.float64).T + decoder.b1
    z = _softplus(a1)
    s = z @ decoder.w_sigma.astype(np.float64) + decoder.b_sigma[0]
    sigma = _softplus(s)
    zc = np.concatenate([z, w_rows], axis=1)
    rgb = expit(zc @ decoder.W_c.astype(np.float64).T + decoder.b_c)

    if single:
        sigma, rgb_out = sigma[0], rgb[0]
    else:
        rgb_out = rgb
    if return_cache:
        return sigma, rgb_out, DecoderCache(h2, a1, z, s, zc, rgb, w.shape)
    return sigma, rgb_out


def decode_backward(decoder: DecoderWeights, cache: DecoderCache, dsigma: np.ndarray,
                    drgb: np.ndarray) -> Tuple[ParamGrads, np.ndarray, np.ndarray]:
    """Returns (decoder grads, dL/dh, dL/dw shaped like the code passed to decode)."""
    H = decoder.hidden
    dsigma = np.asarray(dsigma, dtype=np.float64).reshape(-1)
    drgb = np.asarray(drgb, dtype=np.float64).reshape(-1, 3)
    ds = dsigma * expit(cache.s)
    dq = drgb * cache.rgb * (1.0 - cache.rgb)

    W_c = decoder.W_c.astype(np.float64)
    w_sigma = decoder.w_sigma.astype(np.float64)
    dzc = dq @ W_c
    dz = dzc[:, :H] + ds[:, None] * w_sigma
    da1 = dz * expit(cache.a1)

    grads = {
        "W_c": dq.T @ cache.zc,
        "b_c": dq.sum(axis=0),
        "w_sigma": cache.z.T @ ds,
        "b_sigma": np.array([ds.sum()]),
        "W1": da1.T @ cache.h,
        "b1": da1.sum(axis=0),
    }
    dh = da1 @ decoder.W1.astype(np.float64)
    dw_rows = dzc[:, H:]
    dw = dw_rows.sum(axis=0) if len(cache.w_shape) == 1 else dw_rows
    return grads, dh, dw


# ============= Field queries =============
class QueryCache(NamedTuple):
    sample: PlaneSample
    decoder: DecoderCache


def query(field: TriPlaneField, x: np.ndarray, w: np.ndarray, return_cache: bool = False):
    """sigma(x) and c(x, w) for a batch of points (M, 3)."""
    h, sample = sample_triplane(field, x, return_cache=True)
    out = decode(field.decoder, h, w, return_cache=return_cache)
    if return_cache:
        sigma, rgb, dcache = out
        return sigma, rgb, QueryCache(sample, dcache)
    return out


def query_backward(field: TriPlaneField, cache: QueryCache, dsigma: np.ndarray,
                   drgb: np.ndarray) -> Tuple[ParamGrads, np.ndarray]:
    grads, dh, dw = decode_backward(field.decoder, cache.decoder, dsigma, drgb)
    grads.update(triplane_backward(field, cache.sample, dh))
    return grads, dw


def density_at(field: TriPlaneField, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return query(field, np.asarray(x).reshape(-1, 3), w)[0]


def color_at(field: TriPlaneField, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return query(field, np.asarray(x).reshape(-1, 3), w)[1]


# ============= Sky =============
class SkyCache(NamedTuple):
    r0: np.ndarray
    r1: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    fr: np.ndarray
    fc: np.ndarray
    raw: np.ndarray


def sample_sky(sky: SkyMap, d: np.ndarray, return_cache: bool = False):
    """Bilinear sky color for unit directions (M, 3), azimuth wrapping, poles clamped."""
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    d = d.reshape(-1, 3)
    rows, cols = sky.shape
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])

    gr = theta / math.pi * rows - 0.5
    r_base = np.floor(gr)
    fr = gr - r_base
    r_base = r_base.astype(np.int64)
    r0 = np.clip(r_base, 0, rows - 1)
    r1 = np.clip(r_base + 1, 0, rows - 1)

    gc = (phi + math.pi) / (2.0 * math.pi) * cols - 0.5
    c_base = np.floor(gc)
    fc = gc - c_base
    c_base = c_base.astype(np.int64)
    c0 = np.mod(c_base, cols)
    c1 = np.mod(c_base + 1, cols)

    grid = sky.grid.astype(np.float64)
    raw = ((1 - fr) * (1 - fc))[:, None] * grid[r0, c0] \
        + ((1 - fr) * fc)[:, None] * grid[r0, c1] \
        + (fr * (1 - fc))[:, None] * grid[r1, c0] \
        + (fr * fc)[:, None] * grid[r1, c1]
    rgb = np.clip(raw, 0.0, 1.0)
    if single:
        rgb = rgb[0]
    if return_cache:
        return rgb, SkyCache(r0, r1, c0, c1, fr, fc, raw)
    return rgb


def sky_backward(sky: SkyMap, cache: SkyCache, drgb: np.ndarray) -> np.ndarray:
    rows, cols = sky.shape
    drgb = np.asarray(drgb, dtype=np.float64).reshape(-1, 3)
    passthrough = (cache.raw >= 0.0) & (cache.raw <= 1.0)
    g_raw = drgb * passthrough
    fr, fc = cache.fr, cache.fc
    idx = np.concatenate([
        cache.r0 * cols + cache.c0,
        cache.r0 * cols + cache.c1,
        cache.r1 * cols + cache.c0,
        cache.r1 * cols + cache.c1,
    ])
    weights = np.concatenate([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    upstream = np.tile(g_raw, (4, 1))
    grad = np.empty((rows * cols, 3))
    for c in range(3):
        grad[:, c] = np.bincount(idx, weights=weights * upstream[:, c], minlength=rows * cols)
    return grad.reshape(rows, cols, 3)


# ============= Checkpoints =============
MAGIC = b"TPF1"
HEADER = np.dtype([
    ("magic", "S4"),
    ("res", "<u4"),
    ("channels", "<u4"),
    ("hidden", "<u4"),
    ("code_dim", "<u4"),
    ("pad_tokens", "<u4"),
    ("token_grid", "<u4"),
    ("sky_rows", "<u4"),
    ("sky_cols", "<u4"),
    ("n_codes", "<u4"),
    ("L", "<f8"),
    ("z_floor", "<f8"),
    ("center_x", "<f8"),
    ("center_y", "<f8"),
])
_PARAM_ORDER = ("plane_xy", "plane_xz", "plane_yz", "W1", "b1", "w_sigma", "b_sigma",
                "W_c", "b_c", "sky", "codes")


def save_checkpoint(field: TriPlaneField, path: Union[str, Path]) -> None:
    """Binary checkpoint: TPF1 header, then every parameter as little-endian float32."""
    ext = field.extent
    header = np.zeros((), dtype=HEADER)
    header["magic"] = MAGIC
    header["res"] = field.res
    header["channels"] = field.channels
    header["hidden"] = field.decoder.hidden
    header["code_dim"] = field.code_dim
    header["pad_tokens"] = ext.N
    header["token_grid"] = ext.H_t
    header["sky_rows"], header["sky_cols"] = field.sky.shape
    header["n_codes"] = field.codes.shape[0]
    header["L"] = ext.L
    header["z_floor"] = ext.z_floor
    header["center_x"], header["center_y"] = ext.center
    params = field.parameters()
    with open(path, "wb") as f:
        f.write(header.tobytes())
        for name in _PARAM_ORDER:
            f.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    logger.debug("Saved checkpoint %s", path)


def load_checkpoint(path: Union[str, Path], dtype=np.float32) -> TriPlaneField:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"Failed to read checkpoint {path}: {e}") from e
    if len(data) < HEADER.itemsize:
        raise CheckpointFormatError(f"Checkpoint {path} is truncated (header)")
    header = np.frombuffer(data, dtype=HEADER, count=1)[0]
    if header["magic"] != MAGIC:
        raise CheckpointFormatError(f"Checkpoint {path} has bad magic {header['magic']!r}")

    res, channels, hidden, code_dim = (int(header[k]) for k in ("res", "channels", "hidden", "code_dim"))
    sky_rows, sky_cols, n_codes = int(header["sky_rows"]), int(header["sky_cols"]), int(header["n_codes"])
    shapes = {
        "plane_xy": (res, res, channels),
        "plane_xz": (res, res, channels),
        "plane_yz": (res, res, channels),
        "W1": (hidden, channels),
        "b1": (hidden,),
        "w_sigma": (hidden,),
        "b_sigma": (1,),
        "W_c": (3, hidden + code_dim),
        "b_c": (3,),
        "sky": (sky_rows, sky_cols, 3),
        "codes": (n_codes, code_dim),
    }
    expected = HEADER.itemsize + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(data) != expected:
        raise CheckpointFormatError(f"Checkpoint {path} has {len(data)} bytes, expected {expected}")

    arrays, offset = {}, HEADER.itemsize
    for name in _PARAM_ORDER:
        count = int(np.prod(shapes[name]))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset) \
            .reshape(shapes[name]).astype(dtype)
        offset += 4 * count

    extent = SceneExtent(L=float(header["L"]), H_t=int(header["token_grid"]), N=int(header["pad_tokens"]),
                         z_floor=float(header["z_floor"]),
                         center=(float(header["center_x"]), float(header["center_y"])))
    decoder = DecoderWeights(arrays["W1"], arrays["b1"], arrays["w_sigma"], arrays["b_sigma"],
                             arrays["W_c"], arrays["b_c"])
    field = TriPlaneField(extent, arrays["plane_xy"], arrays["plane_xz"], arrays["plane_yz"], decoder,
                          SkyMap(arrays["sky"]), arrays["codes"])
    logger.debug("Loaded checkpoint %s (res %d, C %d)", path, res, channels)
    return field
