"""Analytic ground-truth scenes and rendered supervision sets.

Closed-form density/color fields built from slabs, boxes, vertical
cylinders and spheres; exact ray/primitive depth; supervision rendered with
the same ray marcher the fitted fields use.
"""
import json
import logging
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from autodiff import SupervisedView
from cameras import CameraSpec, Orthographic, Panorama, Pose, camera_from_dict, camera_to_dict, make_rays
from errors import ConfigError
from renderer import MarchConfig, clip_to_cube, render_view

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]


# ============= Primitives =============
@dataclass(frozen=True)
class Slab:
    """Ground: everything at or below z_top inside the scene bounds."""
    z_top: float = 0.0
    sigma: float = 20.0
    rgb: Vec3 = (0.42, 0.40, 0.36)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return x[:, 2] <= self.z_top

    def interval(self, o: np.ndarray, d: np.ndarray, lower: np.ndarray, upper: np.ndarray):
        top = np.array([upper[0], upper[1], self.z_top])
        t0, t1, _ = clip_to_cube(o, d, lower, top, -np.inf, np.inf)
        hit = t1 > t0
        return np.where(hit, t0, np.inf), np.where(hit, t1, -np.inf)

    def top(self) -> float:
        return self.z_top


@dataclass(frozen=True)
class Box:
    center: Vec3
    size: Vec3
    sigma: float = 20.0
    rgb: Vec3 = (0.7, 0.6, 0.5)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2.0

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2.0

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.all((x >= self.lower) & (x <= self.upper), axis=1)

    def interval(self, o, d, lower, upper):
        t0, t1, hit = clip_to_cube(o, d, self.lower, self.upper, -np.inf, np.inf)
        return np.where(hit, t0, np.inf), np.where(hit, t1, -np.inf)

    def top(self) -> float:
        return float(self.upper[2])


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder over [z_min, z_max]."""
    center_xy: Tuple[float, float]
    radius: float
    z_min: float
    z_max: float
    sigma: float = 20.0
    rgb: Vec3 = (0.35, 0.25, 0.15)

    def contains(self, x: np.ndarray) -> np.ndarray:
        dx = x[:, 0] - self.center_xy[0]
        dy = x[:, 1] - self.center_xy[1]
        return (dx * dx + dy * dy <= self.radius ** 2) & (x[:, 2] >= self.z_min) & (x[:, 2] <= self.z_max)

    def interval(self, o, d, lower, upper):
        ox = o[:, 0] - self.center_xy[0]
        oy = o[:, 1] - self.center_xy[1]
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2.0 * (ox * d[:, 0] + oy * d[:, 1])
        c = ox * ox + oy * oy - self.radius ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = b * b - 4.0 * a * c
            sq = np.sqrt(np.maximum(disc, 0.0))
            r0 = np.where(a > 1e-15, (-b - sq) / (2.0 * a), np.where(c <= 0, -np.inf, np.inf))
            r1 = np.where(a > 1e-15, (-b + sq) / (2.0 * a), np.where(c <= 0, np.inf, -np.inf))
            r0 = np.where((a > 1e-15) & (disc < 0), np.inf, r0)
            r1 = np.where((a > 1e-15) & (disc < 0), -np.inf, r1)
            z0 = (self.z_min - o[:, 2]) / d[:, 2]
            z1 = (self.z_max - o[:, 2]) / d[:, 2]
        flat = d[:, 2] == 0
        inside_z = (o[:, 2] >= self.z_min) & (o[:, 2] <= self.z_max)
        zl = np.where(flat, np.where(inside_z, -np.inf, np.inf), np.minimum(z0, z1))
        zh = np.where(flat, np.where(inside_z, np.inf, -np.inf), np.maximum(z0, z1))
        return np.maximum(r0, zl), np.minimum(r1, zh)

    def top(self) -> float:
        return self.z_max


@dataclass(frozen=True)
class Sphere:
    center: Vec3
    radius: float
    sigma: float = 20.0
    rgb: Vec3 = (0.2, 0.5, 0.2)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.sum((x - np.asarray(self.center)) ** 2, axis=1) <= self.radius ** 2

    def interval(self, o, d, lower, upper):
        oc = o - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        hit = disc >= 0
        return np.where(hit, -b - sq, np.inf), np.where(hit, -b + sq, -np.inf)

    def top(self) -> float:
        return self.center[2] + self.radius


Primitive = Union[Slab, Box, Cylinder, Sphere]
_PRIMITIVES = {"slab": Slab, "box": Box, "cylinder": Cylinder, "sphere": Sphere}


# ============= Sky =============
@dataclass(frozen=True)
class SkyGradient:
    zenith: Vec3 = (0.30, 0.50, 0.85)
    horizon: Vec3 = (0.80, 0.85, 0.92)
    ground: Vec3 = (0.35, 0.33, 0.30)

    def __call__(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, np.float64).reshape(-1, 3)
        up = np.clip(d[:, 2], 0.0, 1.0)[:, None]
        down = np.clip(-d[:, 2], 0.0, 1.0)[:, None]
        hz = np.asarray(self.horizon)
        return hz + (np.asarray(self.zenith) - hz) * up + (np.asarray(self.ground) - hz) * down


# ============= Scenes =============
@dataclass
class SceneSpec:
    primitives: List[Primitive]
    lower: Vec3 = (-25.0, -25.0, -4.0)
    upper: Vec3 = (25.0, 25.0, 46.0)
    background: Vec3 = (0.0, 0.0, 0.0)
    sky: SkyGradient = dataclass_field(default_factory=SkyGradient)

    def __post_init__(self):
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if np.any(hi <= lo):
            raise ConfigError(f"Scene bounds are empty: {self.lower} .. {self.upper}")
        for p in self.primitives:
            if not p.sigma > 0:
                raise ConfigError(f"Primitive {p} needs a positive density")
            if isinstance(p, Box) and (np.any(p.lower < lo - 1e-9) or np.any(p.upper > hi + 1e-9)):
                raise ConfigError(f"Box {p} leaves the scene bounds")
            if isinstance(p, Sphere) and (np.any(np.asarray(p.center) - p.radius < lo - 1e-9)
                                          or np.any(np.asarray(p.center) + p.radius > hi + 1e-9)):
                raise ConfigError(f"Sphere {p} leaves the scene bounds")

    def tallest_top(self) -> float:
        return max((p.top() for p in self.primitives), default=self.lower[2])

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            kind = next(k for k, cls in _PRIMITIVES.items() if isinstance(p, cls))
            d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in p.__dict__.items()}
            d["type"] = kind
            prims.append(d)
        return {"primitives": prims, "lower": list(self.lower), "upper": list(self.upper),
                "background": list(self.background),
                "sky": {k: list(v) for k, v in self.sky.__dict__.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = []
        for p in d.get("primitives", []):
            p = dict(p)
            kind = p.pop("type", None)
            if kind not in _PRIMITIVES:
                raise ConfigError(f"Unknown primitive type '{kind}'")
            try:
                prims.append(_PRIMITIVES[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}))
            except TypeError as e:
                raise ConfigError(f"Failed to parse {kind} primitive: {e}") from e
        sky = SkyGradient(**{k: tuple(v) for k, v in d.get("sky", {}).items()})
        return cls(prims, tuple(d.get("lower", (-25.0, -25.0, -4.0))), tuple(d.get("upper", (25.0, 25.0, 46.0))),
                   tuple(d.get("background", (0.0, 0.0, 0.0))), sky)


def load_scene_spec(path: Union[str, Path]) -> SceneSpec:
    try:
        return SceneSpec.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Failed to read scene spec {path}: {e}") from e


def save_scene_spec(spec: SceneSpec, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2))


def city_block_spec() -> SceneSpec:
    """Ground, two buildings, and a tree whose canopy overhangs open air on one side.

    The canopy is thin (sigma 0.8, below the unit gravity slack) so the true
    field satisfies the slack-1 gravity penalty while slack 0 sees the void
    under the overhang.
    """
    return SceneSpec([
        Slab(0.0, 20.0, (0.42, 0.40, 0.36)),
        Box((-10.0, 8.0, 6.0), (10.0, 8.0, 12.0), 20.0, (0.80, 0.62, 0.48)),
        Box((8.0, -10.0, 4.0), (8.0, 10.0, 8.0), 20.0, (0.55, 0.60, 0.72)),
        Cylinder((10.0, 10.0), 0.6, 0.0, 4.0, 20.0, (0.35, 0.25, 0.15)),
        Sphere((11.5, 10.0, 6.5), 3.0, 0.8, (0.20, 0.50, 0.22)),
    ])


def boundary_building_spec(margin: float = 6.25) -> SceneSpec:
    """City block whose bounds reach ``margin`` past the 50 m crop, with a building across the crop edge."""
    base = city_block_spec()
    half = 25.0 + margin
    prims = list(base.primitives) + [Box((24.0, 0.0, 5.0), (8.0, 10.0, 10.0), 20.0, (0.75, 0.70, 0.50))]
    return SceneSpec(prims, (-half, -half, -4.0 - margin), (half, half, 46.0 + margin), base.background, base.sky)


def floater_region(spec: SceneSpec, clearance: float = 2.0) -> Tuple[np.ndarray, np.ndarray]:
    """Known-empty air above the tallest primitive, inset from the scene sides."""
    lo, hi = np.asarray(spec.lower, np.float64), np.asarray(spec.upper, np.float64)
    inset = 0.1 * (hi[:2] - lo[:2])
    z0 = spec.tallest_top() + clearance
    z1 = min(hi[2] - clearance, z0 + 0.5 * (hi[2] - z0))
    return np.array([lo[0] + inset[0], lo[1] + inset[1], z0]), np.array([hi[0] - inset[0], hi[1] - inset[1], z1])


class AnalyticField:
    """Density/color oracle with the ``lower``/``upper``/``query`` surface the renderer marches."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.lower = np.asarray(spec.lower, np.float64)
        self.upper = np.asarray(spec.upper, np.float64)

    def query(self, x: np.ndarray, w: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, np.float64).reshape(-1, 3)
        inside = np.all((x >= self.lower) & (x <= self.upper), axis=1)
        sigma = np.zeros(x.shape[0])
        rgb = np.tile(np.asarray(self.spec.background, np.float64), (x.shape[0], 1))
        for p in self.spec.primitives:
            hit = inside & p.contains(x) & (p.sigma > sigma)
            sigma[hit] = p.sigma
            rgb[hit] = p.rgb
        return sigma, rgb


def analytic_density(spec: SceneSpec, x: np.ndarray) -> np.ndarray:
    return AnalyticField(spec).query(x)[0]


def analytic_color(spec: SceneSpec, x: np.ndarray) -> np.ndarray:
    return AnalyticField(spec).query(x)[1]


def analytic_depth(spec: SceneSpec, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """First-hit distance along each ray inside the scene bounds; inf on a miss."""
    o = np.asarray(origins, np.float64).reshape(-1, 3)
    d = np.asarray(directions, np.float64).reshape(-1, 3)
    lower, upper = np.asarray(spec.lower, np.float64), np.asarray(spec.upper, np.float64)
    b0, b1, bhit = clip_to_cube(o, d, lower, upper, -np.inf, np.inf)
    b0 = np.where(bhit, b0, np.inf)
    b1 = np.where(bhit, b1, -np.inf)
    best = np.full(o.shape[0], np.inf)
    for p in spec.primitives:
        t0, t1 = p.interval(o, d, lower, upper)
        enter = np.maximum(np.maximum(t0, b0), 0.0)
        leave = np.minimum(t1, b1)
        ok = leave > enter
        best = np.where(ok & (enter < best), enter, best)
    return best


# ============= Supervision =============
@dataclass(frozen=True)
class Rig:
    train: Tuple[Tuple[str, CameraSpec], ...]
    holdout: Tuple[Tuple[str, CameraSpec], ...] = ()


def default_rig(spec: SceneSpec, sat_size: int = 256, pano_size: Tuple[int, int] = (512, 128),
                eye_height: float = 1.7) -> Rig:
    """One satellite view over the crop, four street panoramas and one held-out panorama."""
    cx = 0.5 * (spec.lower[0] + spec.upper[0])
    cy = 0.5 * (spec.lower[1] + spec.upper[1])
    extent = spec.upper[0] - spec.lower[0]
    sat = Orthographic((cx, cy), extent, spec.upper[2] + 14.0, sat_size, sat_size)
    pw, ph = pano_size

    def pano(x, y, yaw=0.0):
        return Panorama(Pose((cx + x, cy + y, eye_height), yaw), width=pw, height=ph)

    train = (("satellite", sat), ("panorama", pano(0.0, 0.0)), ("panorama", pano(3.0, 2.0, 0.5)),
             ("panorama", pano(-2.5, -1.0, -1.0)), ("panorama", pano(1.0, -3.0, 2.0)))
    return Rig(train, (("panorama", pano(-1.0, 2.5, 0.3)),))


def render_supervision_view(spec: SceneSpec, kind: str, camera: CameraSpec, code_index: int,
                            n_samples: int, depth_affine: Tuple[float, float], name: str,
                            rng: np.random.Generator, noise_std: float = 0.0,
                            threads: Optional[int] = None) -> SupervisedView:
    source = AnalyticField(spec)
    out = render_view(source, spec.sky, camera, np.zeros(1), MarchConfig(n_samples=n_samples), threads=threads)
    image = out.rgb
    if noise_std > 0:
        image = np.clip(image + rng.normal(0.0, noise_std, image.shape), 0.0, 1.0)
    rays = make_rays(camera)
    depth = analytic_depth(spec, rays.origins, rays.directions).reshape(rays.shape)
    miss = ~np.isfinite(depth)
    a, b = depth_affine
    pseudo = np.where(miss, np.nan, a * depth + b)
    sky_mask = None if kind == "satellite" else miss
    return SupervisedView(kind, camera, image, code_index, pseudo, sky_mask, None, name)


def generate_supervision(spec: SceneSpec, rig: Optional[Rig] = None, seed: int = 0, n_samples: int = 512,
                         depth_affine: Tuple[float, float] = (2.0, 5.0), noise_std: float = 0.0,
                         threads: Optional[int] = None) -> Tuple[List[SupervisedView], List[SupervisedView]]:
    """Rendered training and held-out views; pseudo depth is a*depth + b, sky = rays missing everything."""
    rig = rig or default_rig(spec)
    rng = np.random.default_rng(seed)
    train, holdout = [], []
    for i, (kind, camera) in enumerate(rig.train):
        train.append(render_supervision_view(spec, kind, camera, i, n_samples, depth_affine,
                                             f"{kind}_{i:02d}", rng, noise_std, threads))
    for j, (kind, camera) in enumerate(rig.holdout):
        # held-out views borrow the first panorama's illumination code
        code = next((i for i, (k, _) in enumerate(rig.train) if k == kind), 0)
        holdout.append(render_supervision_view(spec, kind, camera, code, n_samples, depth_affine,
                                               f"holdout_{kind}_{j:02d}", rng, noise_std, threads))
    logger.info("Generated %d training and %d held-out views", len(train), len(holdout))
    return train, holdout


# ============= View-set files =============
def _to_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)).save(path)


def _from_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_view_set(train: Sequence[SupervisedView], holdout: Sequence[SupervisedView], out_dir: Union[str, Path],
                  spec: Optional[SceneSpec] = None) -> Path:
    """Directory of PNG images and sky masks, .npy depth labels and a manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def entry(view: SupervisedView) -> Dict:
        rec = {"name": view.name, "kind": view.kind, "camera": camera_to_dict(view.camera),
               "code_index": view.code_index, "image": f"{view.name}.png"}
        _to_png(view.image, out_dir / rec["image"])
        if view.depth is not None:
            rec["depth"] = f"{view.name}.depth.npy"
            np.save(out_dir / rec["depth"], view.depth.astype(np.float32))
        if view.sky_mask is not None:
            rec["sky_mask"] = f"{view.name}.sky.png"
            Image.fromarray(view.sky_mask.astype(np.uint8) * 255).save(out_dir / rec["sky_mask"])
        return rec

    manifest = {"train": [entry(v) for v in train], "holdout": [entry(v) for v in holdout]}
    if spec is not None:
        manifest["scene"] = spec.to_dict()
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_view_set(data_dir: Union[str, Path]) -> Tuple[List[SupervisedView], List[SupervisedView]]:
    data_dir = Path(data_dir)
    try:
        manifest = json.loads((data_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Failed to read view set {data_dir}: {e}") from e

    def view(rec: Dict) -> SupervisedView:
        image = _from_png(data_dir / rec["image"])[..., :3]
        depth = np.load(data_dir / rec["depth"]).astype(np.float64) if "depth" in rec else None
        sky = _from_png(data_dir / rec["sky_mask"]) > 0.5 if "sky_mask" in rec else None
        return SupervisedView(rec["kind"], camera_from_dict(rec["camera"]), image, int(rec["code_index"]),
                              depth, sky, None, rec["name"])

    return [view(r) for r in manifest.get("train", [])], [view(r) for r in manifest.get("holdout", [])]
