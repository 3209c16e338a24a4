import math

import numpy as np
import pytest
import rasterio
from affine import Affine

import geodata
from errors import GeoDataError, GridFormatError, UnitsError

LAT0, LON0 = 47.61, -122.33
CELL = 2e-5  # degrees
TILE_CELLS = 250


def elevation(lon, lat):
    """Smooth analytic world, linear so bilinear sampling reproduces it exactly."""
    return 100.0 + 20000.0 * (lon - LON0) + 30000.0 * (lat - LAT0)


def make_tile(path, west, south, units="m", hole=None):
    north = south + TILE_CELLS * CELL
    transform = Affine(CELL, 0.0, west, 0.0, -CELL, north)
    cols, rows = np.meshgrid(np.arange(TILE_CELLS) + 0.5, np.arange(TILE_CELLS) + 0.5)
    lon, lat = transform * (cols, rows)
    values = elevation(lon, lat)
    if units == "ft":
        values = values / geodata.FEET_TO_METERS
    if hole is not None:
        values[hole] = np.nan
    geodata.save_grid(geodata.HeightGrid(values, transform, geodata.WGS84, units=units), path)
    return path


@pytest.fixture
def world(tmp_path):
    """Four overlapping tiles around the origin; the south-west one stores feet."""
    tiles = []
    for name, dlon, dlat, units in (("sw", -0.004, -0.004, "ft"), ("se", -0.001, -0.004, "m"),
                                    ("nw", -0.004, -0.001, "m"), ("ne", -0.001, -0.001, "m")):
        hole = None
        if name == "ne":
            # nodata patch under the north-east image
            hole = (slice(0, 50), slice(130, 250))
        tiles.append(make_tile(tmp_path / f"{name}.tif", LON0 + dlon, LAT0 + dlat, units, hole))
    return tiles


def image(lat, lon, zoom=18, size=64):
    return geodata.ImageMeta(f"{lat:.4f}_{lon:.4f}_z{zoom}", lat, lon, zoom, size, size)


def truth_for(grid):
    cols, rows = np.meshgrid(np.arange(grid.width) + 0.5, np.arange(grid.height) + 0.5)
    mx, my = grid.transform * (cols.ravel(), rows.ravel())
    lon, lat = geodata.convert_points(mx, my, geodata.WEB_MERCATOR, geodata.WGS84)
    return elevation(lon, lat).reshape(grid.values.shape)


def test_zoom_levels_halve_the_footprint():
    a = geodata.estimate_bbox(LAT0, LON0, 18, 256, 256).in_crs(geodata.WEB_MERCATOR)
    b = geodata.estimate_bbox(LAT0, LON0, 19, 256, 256).in_crs(geodata.WEB_MERCATOR)
    assert (a[2] - a[0]) / (b[2] - b[0]) == pytest.approx(2.0, rel=1e-9)
    assert (a[3] - a[1]) / (b[3] - b[1]) == pytest.approx(2.0, rel=1e-9)


def test_zoom_zero_tile_covers_the_mercator_world():
    bbox = geodata.estimate_bbox(0.0, 0.0, 0, 256, 256)
    assert bbox.min_lon == pytest.approx(-180.0, abs=1e-4) and bbox.max_lon == pytest.approx(180.0, abs=1e-4)
    assert bbox.min_lat == pytest.approx(-geodata.MERCATOR_LAT_LIMIT, abs=1e-4)
    assert bbox.max_lat == pytest.approx(geodata.MERCATOR_LAT_LIMIT, abs=1e-4)


def test_footprint_ground_size_matches_gsd():
    bbox = geodata.estimate_bbox(LAT0, LON0, 18, 256, 128)
    gw, gh = bbox.ground_size_m()
    gsd = geodata.ground_sample_distance(LAT0, 18)
    assert gw == pytest.approx(256 * gsd, rel=1e-4)
    assert gh == pytest.approx(128 * gsd, rel=1e-4)
    with pytest.raises(GeoDataError):
        geodata.estimate_bbox(89.0, 0.0, 18, 256, 256)


def test_parse_image_name():
    meta = geodata.parse_image_name("/data/47.61_-122.33_z20.png", 512, 512)
    assert (meta.lat, meta.lon, meta.zoom, meta.width) == (47.61, -122.33, 20, 512)
    with pytest.raises(GeoDataError):
        geodata.parse_image_name("seattle.png")


def test_qc_threshold_is_inclusive():
    grid = geodata.HeightGrid(np.zeros((100, 100)), Affine.identity())
    grid.values.flat[:500] = np.nan
    assert geodata.qc_nan(grid, 5.0) == geodata.QCResult(True, 5.0)
    grid.values.flat[:600] = np.nan
    result = geodata.qc_nan(grid, 5.0)
    assert not result.accepted and result.nan_percent == 6.0


def test_feet_conversion_is_exact_and_single_shot():
    grid = geodata.HeightGrid(np.array([[10.0, np.nan]]), Affine.identity(), units="ft")
    meters = geodata.feet_to_meters(grid)
    assert meters.values[0, 0] == 10.0 * 0.3048 and np.isnan(meters.values[0, 1])
    assert meters.units == "m"
    with pytest.raises(UnitsError):
        geodata.feet_to_meters(meters)


def test_geotiff_roundtrip_keeps_units_and_crs(tmp_path):
    path = make_tile(tmp_path / "t.tif", LON0, LAT0, units="ft")
    grid = geodata.load_grid(path)
    assert grid.units == "ft" and grid.crs == geodata.WGS84
    assert grid.values.shape == (TILE_CELLS, TILE_CELLS)
    ref = geodata.describe_tile(path)
    assert ref.units == "ft"
    assert ref.bounds[0] == pytest.approx(LON0) and ref.bounds[1] == pytest.approx(LAT0)


def test_ascii_grid_roundtrip(tmp_path):
    values = np.arange(12, dtype=np.float64).reshape(3, 4)
    values[0, 0] = -9999.0
    grid = geodata.HeightGrid(values, Affine(2.0, 0, 100.0, 0, -2.0, 50.0), None, -9999.0)
    geodata.save_grid(grid, tmp_path / "g.asc")
    back = geodata.load_grid(tmp_path / "g.asc", default_crs=geodata.WEB_MERCATOR)
    np.testing.assert_array_equal(back.values, values)
    assert back.nodata_mask()[0, 0] and back.crs == geodata.WEB_MERCATOR
    assert back.transform.almost_equals(grid.transform)


def test_unsupported_geotiffs_are_rejected(tmp_path):
    profile = dict(driver="GTiff", width=4, height=4, dtype="float32", crs=geodata.WGS84,
                   transform=Affine(1e-4, 0, LON0, 0, -1e-4, LAT0))
    with rasterio.open(tmp_path / "lzw.tif", "w", count=1, compress="lzw", **profile) as dst:
        dst.write(np.zeros((4, 4), np.float32), 1)
    with rasterio.open(tmp_path / "rgb.tif", "w", count=3, **profile) as dst:
        dst.write(np.zeros((3, 4, 4), np.float32))
    with pytest.raises(GridFormatError, match="Compression"):
        geodata.load_grid(tmp_path / "lzw.tif")
    with pytest.raises(GridFormatError, match="SamplesPerPixel"):
        geodata.load_grid(tmp_path / "rgb.tif")
    with pytest.raises(GridFormatError):
        geodata.load_grid(tmp_path / "missing.tif")


def test_index_queries_overlapping_tiles(world):
    index = geodata.build_index([geodata.describe_tile(p) for p in world])
    center = geodata.estimate_bbox(LAT0, LON0, 18, 64, 64)
    assert len(index.query(center)) == 4
    corner = geodata.estimate_bbox(LAT0 - 0.003, LON0 - 0.003, 18, 64, 64)
    assert [t.path for t in index.query(corner)] == [str(world[0])]
    far = geodata.estimate_bbox(LAT0 + 1.0, LON0, 18, 64, 64)
    assert index.query(far) == []


def test_index_needs_a_common_crs():
    a = geodata.TileRef("a.tif", (0, 0, 1, 1), geodata.WGS84)
    b = geodata.TileRef("b.tif", (0, 0, 1, 1), geodata.WEB_MERCATOR)
    with pytest.raises(GeoDataError):
        geodata.build_index([a, b], crs=None)
    assert geodata.build_index([a, b]).crs == geodata.WGS84
    with pytest.raises(GeoDataError):
        geodata.convert_points(np.zeros(1), np.zeros(1), "EPSG:2926", geodata.WGS84)


def test_reprojection_marks_nodata_support():
    transform = Affine(CELL, 0.0, LON0 - 0.001, 0.0, -CELL, LAT0 + 0.001)
    values = np.full((100, 100), 5.0)
    values[:, :50] = np.nan
    tile = geodata.HeightGrid(values, transform, geodata.WGS84)
    out = geodata.reproject_bilinear(tile, geodata.estimate_bbox(LAT0, LON0, 18, 32, 32), 32, 32)
    assert np.all(np.isnan(out.values[:, :12]))
    np.testing.assert_allclose(out.values[:, -12:], 5.0)
    assert out.crs == geodata.WEB_MERCATOR


def test_selection_and_mosaic():
    t = Affine.identity()
    a = geodata.HeightGrid(np.array([[1.0, np.nan], [np.nan, np.nan]]), t)
    b = geodata.HeightGrid(np.array([[np.nan, 2.0], [3.0, np.nan]]), t)
    c = geodata.HeightGrid(np.array([[9.0, 9.0], [np.nan, 9.0]]), t, units="ft")
    best, cov = geodata.select_best_coverage([a, b])
    assert best is b and cov == 0.5
    tie, _ = geodata.select_best_coverage([b, geodata.HeightGrid(b.values.copy(), t)])
    assert tie is b
    filled = geodata.mosaic_candidates([a, b])
    np.testing.assert_array_equal(filled.values, [[1.0, 2.0], [3.0, np.nan]])
    mixed = geodata.mosaic_candidates([b, c])
    assert mixed.units == "m"
    np.testing.assert_allclose(mixed.values, [[9 * 0.3048, 9 * 0.3048], [3.0, 9 * 0.3048]])


def test_prepare_dsm_on_analytic_world(world, tmp_path):
    images = [
        image(LAT0, LON0),                    # covered by all four tiles
        image(LAT0 - 0.003, LON0 - 0.003),    # only the feet tile
        image(LAT0 + 0.003, LON0 + 0.003),    # north-east tile, over its nodata patch
        image(LAT0 + 1.0, LON0),              # nowhere
    ]
    out = tmp_path / "dsm"
    results = geodata.prepare_dsm(images, world, out_dir=out)
    status = [r.status for r in results]
    assert status == ["accepted", "accepted", "rejected", "no_coverage"]

    for r in results[:2]:
        assert r.grid.units == "m" and r.coverage == 1.0 and r.nan_percent == 0.0
        err = np.abs(r.grid.values - truth_for(r.grid))
        assert err.mean() <= 1e-3
    assert results[1].tile == str(world[0])
    assert results[2].nan_percent > 5.0 and results[2].grid is None

    saved = geodata.load_grid(results[0].output)
    np.testing.assert_allclose(saved.values, results[0].grid.values, atol=1e-4)
    assert sorted(p.name for p in out.glob("*.dsm.tif")) == sorted(f"{images[i].name}.dsm.tif" for i in (0, 1))

    df = geodata.write_manifest(results, tmp_path / "manifest.csv")
    assert list(df["status"]) == status
    assert (tmp_path / "manifest.csv").exists()


def test_prepare_dsm_mosaic_fills_holes(world):
    meta = image(LAT0 + 0.003, LON0 + 0.003)
    single = geodata.prepare_dsm([meta], world)[0]
    assert single.status == "rejected"
    # the patch sits outside every other tile, so mosaicking cannot help here either
    mosaic = geodata.prepare_dsm([meta], world, mosaic=True)[0]
    assert mosaic.status == "rejected" and mosaic.tile == "mosaic"
    assert math.isclose(mosaic.nan_percent, single.nan_percent)


def test_prepare_dsm_records_failures(tmp_path, world):
    bad = geodata.ImageMeta("bad", 89.9, 0.0, 18)
    results = geodata.prepare_dsm([bad], world)
    assert results[0].status == "failed" and "Mercator" in results[0].message


def test_prepare_dsm_skips_unreadable_tiles(tmp_path, world, caplog):
    broken = tmp_path / "broken.tif"
    broken.write_bytes(b"not a geotiff")
    with caplog.at_level("WARNING", logger="geodata"):
        results = geodata.prepare_dsm([image(LAT0, LON0)], [broken] + list(world))
    assert results[0].status == "accepted"
    assert "broken.tif" in caplog.text
