"""DSM ground-truth preparation and raster I/O.

Pipeline per satellite image (in this order): footprint from (lat, lon, zoom),
overlapping tiles from an in-memory index, bilinear reprojection of every
candidate onto the satellite pixel grid, best-coverage selection, feet to
meters, NaN quality control.

Only WGS84 and spherical Web Mercator are understood. Tiles in any other CRS
(State Plane feet for the King County data, for instance) must be warped to
one of those two beforehand.
"""
import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import rasterio
from affine import Affine
from pyproj import Transformer
from rasterio.errors import RasterioError
from scipy import ndimage
from tqdm import tqdm

from errors import GeoDataError, GridFormatError, UnitsError

logger = logging.getLogger(__name__)

WGS84 = "EPSG:4326"
WEB_MERCATOR = "EPSG:3857"
SUPPORTED_CRS = (WGS84, WEB_MERCATOR)
MERCATOR_LAT_LIMIT = 85.0511287798066
ZOOM0_METERS_PER_PIXEL = 156543.03392
FEET_TO_METERS = 0.3048

_TRANSFORMERS: Dict[Tuple[str, str], Transformer] = {}


def _transformer(src: str, dst: str) -> Transformer:
    key = (src, dst)
    if key not in _TRANSFORMERS:
        _TRANSFORMERS[key] = Transformer.from_crs(src, dst, always_xy=True)
    return _TRANSFORMERS[key]


def normalize_crs(crs) -> Optional[str]:
    if crs is None:
        return None
    text = crs.to_string() if hasattr(crs, "to_string") else str(crs)
    text = text.upper().replace("EPSG::", "EPSG:")
    aliases = {"WGS84": WGS84, "EPSG:900913": WEB_MERCATOR, "EPSG:102100": WEB_MERCATOR}
    return aliases.get(text, text)


def convert_points(x: np.ndarray, y: np.ndarray, src: str, dst: str) -> Tuple[np.ndarray, np.ndarray]:
    src, dst = normalize_crs(src), normalize_crs(dst)
    for crs in (src, dst):
        if crs not in SUPPORTED_CRS:
            raise GeoDataError(f"Unsupported CRS pair {src} -> {dst}; pre-warp to {WGS84} or {WEB_MERCATOR}")
    if src == dst:
        return np.asarray(x, np.float64), np.asarray(y, np.float64)
    xo, yo = _transformer(src, dst).transform(np.asarray(x, np.float64), np.asarray(y, np.float64))
    return np.asarray(xo), np.asarray(yo)


# ============= Footprints =============
@dataclass(frozen=True)
class GeoBBox:
    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    def __post_init__(self):
        if not (self.min_lon < self.max_lon and self.min_lat < self.max_lat):
            raise GeoDataError(f"Degenerate bounding box {self}")
        if max(abs(self.min_lat), abs(self.max_lat)) > MERCATOR_LAT_LIMIT + 1e-9:
            raise GeoDataError(f"Latitude outside the Web Mercator range in {self}")

    def in_crs(self, crs: str) -> Tuple[float, float, float, float]:
        xs, ys = convert_points(np.array([self.min_lon, self.max_lon]),
                                np.array([self.min_lat, self.max_lat]), WGS84, crs)
        return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())

    def ground_size_m(self) -> Tuple[float, float]:
        """Width and height in ground meters at the box's central latitude."""
        minx, miny, maxx, maxy = self.in_crs(WEB_MERCATOR)
        lat_c = _mercator_center_lat(miny, maxy)
        scale = math.cos(math.radians(lat_c))
        return (maxx - minx) * scale, (maxy - miny) * scale


def _mercator_center_lat(miny: float, maxy: float) -> float:
    _, lat = convert_points(np.array([0.0]), np.array([(miny + maxy) / 2.0]), WEB_MERCATOR, WGS84)
    return float(lat[0])


def ground_sample_distance(lat: float, zoom: int) -> float:
    """Ground meters per pixel of a Web Mercator tile pyramid."""
    return ZOOM0_METERS_PER_PIXEL * math.cos(math.radians(lat)) / 2 ** zoom


def estimate_bbox(lat: float, lon: float, zoom: int, px_w: int, px_h: int) -> GeoBBox:
    """WGS84 footprint of a satellite image centered at (lat, lon).

    The ground extent is GSD * px; in Web Mercator meters that is the same
    span divided by cos(lat), so the projected half-extents do not depend
    on latitude and halve exactly with every zoom level.
    """
    if abs(lat) > MERCATOR_LAT_LIMIT:
        raise GeoDataError(f"Latitude {lat} is outside the Web Mercator range")
    merc_per_px = ground_sample_distance(lat, zoom) / math.cos(math.radians(lat))
    (x0,), (y0,) = convert_points(np.array([lon]), np.array([lat]), WGS84, WEB_MERCATOR)
    half_w, half_h = merc_per_px * px_w / 2.0, merc_per_px * px_h / 2.0
    lons, lats = convert_points(np.array([x0 - half_w, x0 + half_w]), np.array([y0 - half_h, y0 + half_h]),
                                WEB_MERCATOR, WGS84)
    return GeoBBox(float(lons[0]), float(lats[0]), float(lons[1]), float(lats[1]))


# ============= Height grids =============
@dataclass
class HeightGrid:
    values: np.ndarray
    transform: Affine
    crs: Optional[str] = None
    nodata: float = float("nan")
    units: str = "m"

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def nodata_mask(self) -> np.ndarray:
        if math.isnan(self.nodata):
            return np.isnan(self.values)
        return (self.values == self.nodata) | np.isnan(self.values)

    def coverage(self) -> float:
        return float(1.0 - self.nodata_mask().mean())

    def bounds(self) -> Tuple[float, float, float, float]:
        xs, ys = zip(*(self.transform * corner for corner in
                       ((0, 0), (self.width, 0), (0, self.height), (self.width, self.height))))
        return min(xs), min(ys), max(xs), max(ys)

    def same_lattice(self, other: "HeightGrid", tol: float = 1e-9) -> bool:
        return (self.values.shape == other.values.shape
                and self.transform.almost_equals(other.transform, precision=tol))


def scene_transform(center: Tuple[float, float], extent: float, width: int, height: int) -> Affine:
    """Pixel-to-scene-frame transform of an orthographic render."""
    cx, cy = center
    return Affine(extent / width, 0.0, cx - extent / 2.0, 0.0, -extent / height, cy + extent / 2.0)


def bbox_transform(bbox: GeoBBox, width: int, height: int) -> Affine:
    """Web Mercator pixel grid of a satellite image covering ``bbox``."""
    minx, miny, maxx, maxy = bbox.in_crs(WEB_MERCATOR)
    return Affine((maxx - minx) / width, 0.0, minx, 0.0, -(maxy - miny) / height, maxy)


# ============= Tile index =============
@dataclass(frozen=True)
class TileRef:
    path: str
    bounds: Tuple[float, float, float, float]
    crs: Optional[str]
    units: str = "ft"


def describe_tile(path: Union[str, Path], default_crs: Optional[str] = None,
                  default_units: str = "ft") -> TileRef:
    try:
        with rasterio.open(path) as src:
            crs = normalize_crs(src.crs) or normalize_crs(default_crs)
            b = src.bounds
            units = _units_from_band(src.units[0] if src.units else None, default_units)
    except RasterioError as e:
        raise GridFormatError(f"Failed to read tile header {path}: {e}") from e
    return TileRef(str(path), (b.left, b.bottom, b.right, b.top), crs, units)


@dataclass
class TileIndex:
    tiles: List[TileRef]
    boxes: np.ndarray
    crs: str

    def query(self, bbox: GeoBBox) -> List[TileRef]:
        """Tiles whose boxes intersect the query box (closed intervals)."""
        if not self.tiles:
            return []
        minx, miny, maxx, maxy = bbox.in_crs(self.crs)
        b = self.boxes
        hit = (b[:, 0] <= maxx) & (b[:, 2] >= minx) & (b[:, 1] <= maxy) & (b[:, 3] >= miny)
        return [self.tiles[i] for i in np.flatnonzero(hit)]


def build_index(tiles: Sequence[TileRef], crs: Optional[str] = WGS84) -> TileIndex:
    """Index tile boxes in one CRS; ``crs=None`` demands the tiles already share one."""
    tiles = list(tiles)
    if crs is None:
        crs_set = {t.crs for t in tiles}
        if len(crs_set) > 1:
            raise GeoDataError(f"Tiles use mixed CRSs {sorted(map(str, crs_set))} and no common CRS was given")
        crs = crs_set.pop() if crs_set else WGS84
    boxes = np.zeros((len(tiles), 4))
    for i, tile in enumerate(tiles):
        xs, ys = convert_points(np.array([tile.bounds[0], tile.bounds[2]]),
                                np.array([tile.bounds[1], tile.bounds[3]]), tile.crs, crs)
        boxes[i] = (xs.min(), ys.min(), xs.max(), ys.max())
    logger.info("Indexed %d DSM tiles in %s", len(tiles), crs)
    return TileIndex(tiles, boxes, crs)


# ============= Reprojection and selection =============
def reproject_bilinear(tile: HeightGrid, target_bbox: GeoBBox, out_w: int, out_h: int) -> HeightGrid:
    """Bilinear sample of ``tile`` at every satellite pixel center.

    Target pixels whose bilinear support leaves the source or touches a
    nodata cell become nodata (NaN).
    """
    if tile.crs is None:
        raise GeoDataError("Tile has no CRS; cannot reproject")
    transform = bbox_transform(target_bbox, out_w, out_h)
    cols, rows = np.meshgrid(np.arange(out_w) + 0.5, np.arange(out_h) + 0.5)
    mx, my = transform * (cols.ravel(), rows.ravel())
    sx, sy = convert_points(mx, my, WEB_MERCATOR, tile.crs)
    src_col, src_row = ~tile.transform * (sx, sy)
    ci = np.asarray(src_col) - 0.5
    ri = np.asarray(src_row) - 0.5

    tol = 1e-6
    inside = (ci >= -tol) & (ci <= tile.width - 1 + tol) & (ri >= -tol) & (ri <= tile.height - 1 + tol)
    coords = np.stack([np.clip(ri, 0, tile.height - 1), np.clip(ci, 0, tile.width - 1)])

    missing = tile.nodata_mask()
    filled = np.where(missing, 0.0, tile.values).astype(np.float64)
    values = ndimage.map_coordinates(filled, coords, order=1, mode="nearest", prefilter=False)
    touched = ndimage.map_coordinates(missing.astype(np.float64), coords, order=1, mode="nearest",
                                      prefilter=False) > 1e-12
    ok = inside & ~touched
    out = np.where(ok, values, np.nan).reshape(out_h, out_w)
    return HeightGrid(out, transform, WEB_MERCATOR, float("nan"), tile.units)


def select_best_coverage(candidates: Sequence[HeightGrid]) -> Tuple[HeightGrid, float]:
    """Highest-coverage grid; the first one seen wins ties."""
    if not candidates:
        raise GeoDataError("No candidate grids to select from")
    best, best_cov = candidates[0], candidates[0].coverage()
    for grid in candidates[1:]:
        cov = grid.coverage()
        if cov > best_cov:
            best, best_cov = grid, cov
    return best, best_cov


def mosaic_candidates(candidates: Sequence[HeightGrid]) -> HeightGrid:
    """Fill the best grid's holes from the others in decreasing coverage order."""
    if not candidates:
        raise GeoDataError("No candidate grids to mosaic")
    units = {g.units for g in candidates}
    if len(units) > 1:
        candidates = [feet_to_meters(g) if g.units == "ft" else g for g in candidates]
    ordered = sorted(candidates, key=lambda g: -g.coverage())
    out = replace(ordered[0], values=ordered[0].values.astype(np.float64).copy())
    for grid in ordered[1:]:
        hole = out.nodata_mask() & ~grid.nodata_mask()
        out.values[hole] = grid.values[hole]
    return out


def feet_to_meters(grid: HeightGrid) -> HeightGrid:
    if grid.units != "ft":
        raise UnitsError(f"Grid is already in '{grid.units}'; refusing a second feet-to-meters conversion")
    missing = grid.nodata_mask()
    values = np.where(missing, grid.values, grid.values * FEET_TO_METERS)
    return replace(grid, values=values, units="m")


@dataclass(frozen=True)
class QCResult:
    accepted: bool
    nan_percent: float


def qc_nan(grid: HeightGrid, threshold_pct: float = 5.0) -> QCResult:
    missing = grid.nodata_mask()
    nan_percent = 100.0 * int(missing.sum()) / missing.size
    return QCResult(nan_percent <= threshold_pct, nan_percent)


# ============= Raster I/O =============
_FEET_NAMES = {"ft", "foot", "feet", "us survey foot", "ftus", "us_survey_foot"}
_METER_NAMES = {"m", "metre", "meter", "meters", "metres"}


def _units_from_band(unit: Optional[str], default: str) -> str:
    if not unit:
        return default
    u = unit.strip().lower()
    if u in _FEET_NAMES:
        return "ft"
    if u in _METER_NAMES:
        return "m"
    return default


def _check_geotiff_subset(path: Path, src) -> None:
    with open(path, "rb") as f:
        order = f.read(2)
    if order != b"II":
        raise GridFormatError(f"{path}: byte order {order!r} is not little-endian; pre-convert required")
    if src.count != 1:
        raise GridFormatError(f"{path}: SamplesPerPixel={src.count}; pre-convert required")
    if src.dtypes[0] != "float32":
        raise GridFormatError(f"{path}: SampleFormat/BitsPerSample gives {src.dtypes[0]}; pre-convert required")
    if src.compression is not None:
        raise GridFormatError(f"{path}: Compression={src.compression.name}; pre-convert required")


def load_grid(path: Union[str, Path], default_crs: Optional[str] = None, default_units: str = "m") -> HeightGrid:
    """Read an ESRI ASCII grid or a single-band float32 uncompressed GeoTIFF."""
    path = Path(path)
    try:
        with rasterio.open(path) as src:
            if src.driver == "GTiff":
                _check_geotiff_subset(path, src)
            values = src.read(1).astype(np.float64)
            nodata = float("nan") if src.nodata is None else float(src.nodata)
            crs = normalize_crs(src.crs) or normalize_crs(default_crs)
            units = _units_from_band(src.units[0] if src.units else None, default_units)
            transform = src.transform
    except RasterioError as e:
        raise GridFormatError(f"Failed to read grid {path}: {e}") from e
    return HeightGrid(values, transform, crs, nodata, units)


def save_grid(grid: HeightGrid, path: Union[str, Path]) -> None:
    path = Path(path)
    ascii_grid = path.suffix.lower() == ".asc"
    profile = {
        "driver": "AAIGrid" if ascii_grid else "GTiff",
        "width": grid.width,
        "height": grid.height,
        "count": 1,
        "dtype": "float32",
        "transform": grid.transform,
        "crs": grid.crs,
        "nodata": grid.nodata,
    }
    try:
        with rasterio.open(path, "w", **profile) as dst:
            dst.write(np.asarray(grid.values, dtype=np.float32), 1)
            if not ascii_grid:
                dst.set_band_unit(1, grid.units)
    except RasterioError as e:
        raise GridFormatError(f"Failed to write grid {path}: {e}") from e


# ============= DSM preparation pipeline =============
_NAME_PATTERN = re.compile(r"^(?P<lat>-?\d+(?:\.\d+)?)_(?P<lon>-?\d+(?:\.\d+)?)_z(?P<zoom>\d+)$")


@dataclass(frozen=True)
class ImageMeta:
    name: str
    lat: float
    lon: float
    zoom: int
    width: int = 256
    height: int = 256


def parse_image_name(path: Union[str, Path], width: int = 256, height: int = 256) -> ImageMeta:
    """Center and zoom from names like ``47.61_-122.33_z20.png``."""
    stem = Path(path).stem
    match = _NAME_PATTERN.match(stem)
    if not match:
        raise GeoDataError(f"Image name '{stem}' does not follow <lat>_<lon>_z<zoom>")
    return ImageMeta(stem, float(match["lat"]), float(match["lon"]), int(match["zoom"]), width, height)


@dataclass
class PrepResult:
    name: str
    status: str
    coverage: float = 0.0
    nan_percent: float = float("nan")
    tile: Optional[str] = None
    grid: Optional[HeightGrid] = None
    output: Optional[str] = None
    message: str = ""


def prepare_dsm(
    images: Iterable[ImageMeta],
    tile_paths: Sequence[Union[str, Path]],
    out_dir: Optional[Union[str, Path]] = None,
    threshold_pct: float = 5.0,
    mosaic: bool = False,
    default_tile_crs: Optional[str] = None,
    default_tile_units: str = "ft",
    progress: bool = False,
) -> List[PrepResult]:
    """Aligned, unit-corrected, quality-controlled DSM per satellite image."""
    described = []
    for p in tile_paths:
        try:
            described.append(describe_tile(p, default_tile_crs, default_tile_units))
        except (GeoDataError, OSError) as e:
            logger.warning("Skipping unreadable DSM tile %s: %s", p, e)
    index = build_index(described)
    loaded: Dict[str, HeightGrid] = {}
    results = []
    out_dir = Path(out_dir) if out_dir is not None else None

    for meta in tqdm(list(images), desc="prep-dsm", disable=not progress):
        try:
            result = _prepare_one(meta, index, loaded, out_dir, threshold_pct, mosaic,
                                  default_tile_crs, default_tile_units)
        except Exception as e:
            logger.error("Failed to prepare DSM for %s: %s", meta.name, e)
            result = PrepResult(meta.name, "failed", message=str(e))
        results.append(result)
    return results


def _prepare_one(meta: ImageMeta, index: TileIndex, loaded: Dict[str, HeightGrid], out_dir: Optional[Path],
                 threshold_pct: float, mosaic: bool, default_crs: Optional[str], default_units: str) -> PrepResult:
    bbox = estimate_bbox(meta.lat, meta.lon, meta.zoom, meta.width, meta.height)
    candidates = index.query(bbox)
    if not candidates:
        logger.info("%s: no DSM tile overlaps, skipped", meta.name)
        return PrepResult(meta.name, "no_coverage")

    reprojected, sources = [], []
    for tile in candidates:
        if tile.path not in loaded:
            grid = load_grid(tile.path, default_crs=tile.crs or default_crs, default_units=default_units)
            loaded[tile.path] = replace(grid, units=tile.units)
        reprojected.append(reproject_bilinear(loaded[tile.path], bbox, meta.width, meta.height))
        sources.append(tile.path)

    if mosaic:
        best = mosaic_candidates(reprojected)
        coverage, source = best.coverage(), "mosaic"
    else:
        best, coverage = select_best_coverage(reprojected)
        source = sources[next(i for i, g in enumerate(reprojected) if g is best)]
    if coverage <= 0.0:
        logger.info("%s: candidate tiles hold no data over the footprint, skipped", meta.name)
        return PrepResult(meta.name, "no_coverage")

    if best.units == "ft":
        best = feet_to_meters(best)
    qc = qc_nan(best, threshold_pct)
    result = PrepResult(meta.name, "accepted" if qc.accepted else "rejected", coverage, qc.nan_percent,
                        source, best if qc.accepted else None)
    if not qc.accepted:
        logger.info("%s: %.2f%% nodata exceeds %.1f%%, discarded", meta.name, qc.nan_percent, threshold_pct)
        return result
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / f"{meta.name}.dsm.tif"
        save_grid(best, out_path)
        result.output = str(out_path)
    logger.info("%s: accepted (coverage %.3f, nodata %.2f%%)", meta.name, coverage, qc.nan_percent)
    return result


def write_manifest(results: Sequence[PrepResult], path: Union[str, Path]) -> pd.DataFrame:
    """Accept/reject decisions, one row per image."""
    df = pd.DataFrame([{
        "name": r.name,
        "status": r.status,
        "coverage": r.coverage,
        "nan_percent": r.nan_percent,
        "tile": r.tile,
        "output": r.output,
        "message": r.message,
    } for r in results])
    df.to_csv(path, index=False)
    return df
