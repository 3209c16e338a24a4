"""Ray generation for satellite, perspective and panoramic cameras.

Scene frame: +x east, +y north, +z up. A pose with zero yaw, pitch and roll
looks along +y. Pixel centers sit at half-integer offsets and every resampling
step is bilinear.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from errors import CameraError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


# ============= Poses and camera descriptions =============
@dataclass(frozen=True)
class Pose:
    position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation composed yaw -> pitch -> roll.

        Columns are the camera right, forward and up axes in the scene frame.
        Positive yaw turns the heading from north towards east.
        """
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        rz = np.array([[cy, sy, 0.0], [-sy, cy, 0.0], [0.0, 0.0, 1.0]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
        ry = np.array([[cr, 0.0, sr], [0.0, 1.0, 0.0], [-sr, 0.0, cr]])
        return rz @ rx @ ry


@dataclass(frozen=True)
class Orthographic:
    """Satellite camera: parallel rays looking straight down."""
    center: Tuple[float, float] = (0.0, 0.0)
    extent: float = 50.0
    altitude: float = 60.0
    width: int = 256
    height: int = 256


@dataclass(frozen=True)
class Perspective:
    pose: Pose = Pose()
    fov_deg: float = 90.0
    width: int = 256
    height: int = 256


@dataclass(frozen=True)
class Panorama:
    """Equirectangular camera; yaw and pitch spans are centered on the pose heading."""
    pose: Pose = Pose()
    yaw_span: float = TWO_PI
    pitch_span: float = math.pi / 2.0
    width: int = 512
    height: int = 128


CameraSpec = Union[Orthographic, Perspective, Panorama]


def validate_camera(camera: CameraSpec) -> None:
    if camera.width < 1 or camera.height < 1:
        raise CameraError(f"Image size must be at least 1x1, got {camera.width}x{camera.height}")
    if isinstance(camera, Orthographic):
        if not camera.extent > 0:
            raise CameraError(f"Orthographic extent must be positive, got {camera.extent}")
    elif isinstance(camera, Perspective):
        if not 0.0 < camera.fov_deg < 180.0:
            raise CameraError(f"Field of view must lie in (0, 180) degrees, got {camera.fov_deg}")
    elif isinstance(camera, Panorama):
        if not 0.0 < camera.yaw_span <= TWO_PI + 1e-12:
            raise CameraError(f"Panorama yaw span must lie in (0, 2pi], got {camera.yaw_span}")
        if not 0.0 < camera.pitch_span <= math.pi + 1e-12:
            raise CameraError(f"Panorama pitch span must lie in (0, pi], got {camera.pitch_span}")
    else:
        raise CameraError(f"Unknown camera type {type(camera).__name__}")


def camera_to_dict(camera: CameraSpec) -> dict:
    """JSON-friendly description; angles are stored in degrees."""
    if isinstance(camera, Orthographic):
        return {"type": "orthographic", "center": list(camera.center), "extent": camera.extent,
                "altitude": camera.altitude, "width": camera.width, "height": camera.height}
    pose = {"position": list(camera.pose.position), "yaw_deg": math.degrees(camera.pose.yaw),
            "pitch_deg": math.degrees(camera.pose.pitch), "roll_deg": math.degrees(camera.pose.roll)}
    if isinstance(camera, Perspective):
        return {"type": "perspective", "pose": pose, "fov_deg": camera.fov_deg,
                "width": camera.width, "height": camera.height}
    return {"type": "panorama", "pose": pose, "yaw_span_deg": math.degrees(camera.yaw_span),
            "pitch_span_deg": math.degrees(camera.pitch_span), "width": camera.width, "height": camera.height}


def pose_from_dict(d: dict) -> Pose:
    return Pose(tuple(float(v) for v in d.get("position", (0.0, 0.0, 0.0))),
                math.radians(d.get("yaw_deg", 0.0)), math.radians(d.get("pitch_deg", 0.0)),
                math.radians(d.get("roll_deg", 0.0)))


def camera_from_dict(d: dict) -> CameraSpec:
    kind = d.get("type")
    if kind not in ("orthographic", "perspective", "panorama"):
        raise CameraError(f"Unknown camera type '{kind}'")
    try:
        if kind == "orthographic":
            camera = Orthographic(tuple(d.get("center", (0.0, 0.0))), float(d.get("extent", 50.0)),
                                  float(d.get("altitude", 60.0)), int(d.get("width", 256)), int(d.get("height", 256)))
        elif kind == "perspective":
            camera = Perspective(pose_from_dict(d.get("pose", {})), float(d.get("fov_deg", 90.0)),
                                 int(d.get("width", 256)), int(d.get("height", 256)))
        elif kind == "panorama":
            camera = Panorama(pose_from_dict(d.get("pose", {})), math.radians(d.get("yaw_span_deg", 360.0)),
                              math.radians(d.get("pitch_span_deg", 90.0)),
                              int(d.get("width", 512)), int(d.get("height", 128)))
    except (TypeError, ValueError) as e:
        raise CameraError(f"Failed to parse camera {d}: {e}") from e
    validate_camera(camera)
    return camera


# ============= Ray batches =============
@dataclass(frozen=True)
class RayBatch:
    """One ray per pixel, flattened in row-major order."""
    origins: np.ndarray
    directions: np.ndarray
    shape: Tuple[int, int]

    def __post_init__(self):
        self.origins.setflags(write=False)
        self.directions.setflags(write=False)

    def __len__(self) -> int:
        return self.origins.shape[0]


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _pixel_centers(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return uu.ravel(), vv.ravel()


def perspective_directions(u: np.ndarray, v: np.ndarray, camera: Perspective) -> np.ndarray:
    """Pinhole directions through continuous pixel coordinates (u right, v down)."""
    focal = (camera.width / 2.0) / math.tan(math.radians(camera.fov_deg) / 2.0)
    local = np.stack([
        (u - camera.width / 2.0) / focal,
        np.ones_like(u),
        -(v - camera.height / 2.0) / focal,
    ], axis=-1)
    return _normalize(local @ camera.pose.rotation().T)


def pano_directions(u: np.ndarray, v: np.ndarray, camera: Panorama) -> np.ndarray:
    """Directions through continuous equirectangular coordinates."""
    yaw = (u / camera.width - 0.5) * camera.yaw_span
    pitch = (0.5 - v / camera.height) * camera.pitch_span
    local = np.stack([
        np.sin(yaw) * np.cos(pitch),
        np.cos(yaw) * np.cos(pitch),
        np.sin(pitch),
    ], axis=-1)
    return _normalize(local @ camera.pose.rotation().T)


def pano_coordinates(directions: np.ndarray, camera: Panorama) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of pano_directions: continuous (u, v) plus an in-span mask."""
    local = np.asarray(directions, dtype=np.float64) @ camera.pose.rotation()
    yaw = np.arctan2(local[..., 0], local[..., 1])
    pitch = np.arcsin(np.clip(local[..., 2], -1.0, 1.0))
    u = (yaw / camera.yaw_span + 0.5) * camera.width
    v = (0.5 - pitch / camera.pitch_span) * camera.height
    full_turn = camera.yaw_span >= TWO_PI - 1e-12
    if full_turn:
        u = np.mod(u, camera.width)
        inside_u = np.ones(u.shape, dtype=bool)
    else:
        inside_u = (u >= 0.0) & (u <= camera.width)
    inside = inside_u & (v >= 0.0) & (v <= camera.height)
    return u, v, inside


def make_rays(camera: CameraSpec) -> RayBatch:
    validate_camera(camera)
    u, v = _pixel_centers(camera.width, camera.height)
    if isinstance(camera, Orthographic):
        cx, cy = camera.center
        half = camera.extent / 2.0
        x = cx - half + u * camera.extent / camera.width
        y = cy + half - v * camera.extent / camera.height
        origins = np.stack([x, y, np.full_like(x, camera.altitude)], axis=-1)
        directions = np.tile(np.array([0.0, 0.0, -1.0]), (u.size, 1))
    elif isinstance(camera, Perspective):
        directions = perspective_directions(u, v, camera)
        origins = np.tile(np.asarray(camera.pose.position, dtype=np.float64), (u.size, 1))
    else:
        directions = pano_directions(u, v, camera)
        origins = np.tile(np.asarray(camera.pose.position, dtype=np.float64), (u.size, 1))
    return RayBatch(origins, directions, (camera.height, camera.width))


# ============= Panorama to perspective crops =============
def _bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray, wrap: bool) -> np.ndarray:
    """Bilinear lookup at continuous array indices; columns wrap around for full panoramas."""
    pad_mode = "wrap" if wrap else "edge"
    padded = np.pad(image, ((0, 0), (1, 1), (0, 0)), mode=pad_mode)
    coords = np.stack([rows, cols + 1.0])
    channels = [
        ndimage.map_coordinates(padded[..., c], coords, order=1, mode="nearest", prefilter=False)
        for c in range(padded.shape[-1])
    ]
    return np.stack(channels, axis=-1)


def pano_to_perspective(
    pano_image: np.ndarray,
    yaw: float,
    pitch: float,
    fov_deg: float,
    out_w: int,
    out_h: int,
    yaw_span: float = TWO_PI,
    pitch_span: float = math.pi / 2.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gnomonic crop of an equirectangular image.

    Returns the float64 crop (H, W, C) and a boolean mask of pixels whose
    directions fall inside the panorama's angular span.
    """
    image = np.asarray(pano_image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    pano_h, pano_w = image.shape[:2]
    pano = Panorama(Pose(), yaw_span, pitch_span, pano_w, pano_h)
    crop = Perspective(Pose(yaw=yaw, pitch=pitch), fov_deg, out_w, out_h)
    validate_camera(crop)
    validate_camera(pano)

    u, v = _pixel_centers(out_w, out_h)
    directions = perspective_directions(u, v, crop)
    pu, pv, inside = pano_coordinates(directions, pano)
    full_turn = yaw_span >= TWO_PI - 1e-12
    out = _bilinear(image, pv - 0.5, pu - 0.5, wrap=full_turn)
    out = out.reshape(out_h, out_w, -1)
    if squeeze:
        out = out[..., 0]
    return out, inside.reshape(out_h, out_w)


# ============= Training view sampler =============
@dataclass(frozen=True)
class SamplerConfig:
    # symmetric about the panorama heading
    yaw_range_deg: Tuple[float, float] = (-179.0, 179.0)
    pitch_range_deg: Tuple[float, float] = (-30.0, 30.0)
    fov_choices_deg: Tuple[float, ...] = (90.0, 105.0, 120.0)
    render_size: Tuple[int, int] = (256, 256)


@dataclass(frozen=True)
class ViewSample:
    yaw: float
    pitch: float
    roll: float
    fov_deg: float


def sample_training_view(rng: np.random.Generator, cfg: Optional[SamplerConfig] = None) -> ViewSample:
    cfg = cfg or SamplerConfig()
    yaw = math.radians(rng.uniform(*cfg.yaw_range_deg))
    pitch = math.radians(rng.uniform(*cfg.pitch_range_deg))
    fov = float(cfg.fov_choices_deg[rng.integers(len(cfg.fov_choices_deg))])
    return ViewSample(yaw=yaw, pitch=pitch, roll=0.0, fov_deg=fov)


def crop_training_view(
    pano_image: np.ndarray,
    view: ViewSample,
    cfg: SamplerConfig,
    yaw_span: float = TWO_PI,
    pitch_span: float = math.pi / 2.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Perspective crop for a sampled view; the fov must be one the sampler can draw."""
    if not any(abs(view.fov_deg - f) < 1e-9 for f in cfg.fov_choices_deg):
        raise CameraError(f"fov {view.fov_deg} is not in the sampler's set {cfg.fov_choices_deg}")
    width, height = cfg.render_size
    return pano_to_perspective(pano_image, view.yaw, view.pitch, view.fov_deg, width, height,
                               yaw_span, pitch_span)
