import numpy as np
import pytest

import synth
from cameras import Orthographic, Panorama, Pose
from errors import ConfigError


def test_primitive_membership():
    pts = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    assert synth.Slab(0.0).contains(pts).tolist() == [True, False]
    box = synth.Box((0.0, 0.0, 1.0), (2.0, 2.0, 2.0))
    assert box.contains(pts).tolist() == [False, True]
    cyl = synth.Cylinder((0.0, 0.0), 0.5, 0.0, 2.0)
    assert cyl.contains(pts).tolist() == [False, True]
    assert synth.Sphere((0.0, 0.0, 1.0), 0.1).contains(pts).tolist() == [False, True]


def test_analytic_depth_against_known_hits():
    spec = synth.city_block_spec()
    down = [0.0, 0.0, -1.0]
    origins = np.array([[0.0, 0.0, 50.0], [-10.0, 8.0, 50.0], [11.5, 10.0, 20.0], [0.0, 10.0, 2.0],
                        [0.0, 0.0, 20.0]])
    dirs = np.array([down, down, down, [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    depth = synth.analytic_depth(spec, origins, dirs)
    np.testing.assert_allclose(depth[:4], [50.0, 38.0, 10.5, 9.4])
    assert depth[4] == np.inf


def test_denser_primitive_wins_overlaps():
    spec = synth.city_block_spec()
    sigma, rgb = synth.AnalyticField(spec).query(np.array([[10.0, 10.0, 3.9], [10.0, 10.0, 4.5], [0, 0, 100.0]]))
    assert sigma.tolist() == [20.0, 0.8, 0.0]
    np.testing.assert_allclose(rgb[1], (0.20, 0.50, 0.22))


def test_scene_spec_validation():
    with pytest.raises(ConfigError):
        synth.SceneSpec([synth.Box((0, 0, 0), (100, 1, 1))])
    with pytest.raises(ConfigError):
        synth.SceneSpec([synth.Sphere((24.0, 0, 5), 3.0)])
    with pytest.raises(ConfigError):
        synth.SceneSpec([synth.Slab(0.0, 0.0)])
    with pytest.raises(ConfigError):
        synth.SceneSpec([], lower=(0, 0, 0), upper=(0, 1, 1))


def test_scene_spec_file_roundtrip(tmp_path):
    spec = synth.boundary_building_spec()
    synth.save_scene_spec(spec, tmp_path / "scene.json")
    again = synth.load_scene_spec(tmp_path / "scene.json")
    assert again.primitives == spec.primitives
    assert again.lower == spec.lower and again.sky == spec.sky
    (tmp_path / "bad.json").write_text('{"primitives": [{"type": "torus"}]}')
    with pytest.raises(ConfigError):
        synth.load_scene_spec(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        synth.load_scene_spec(tmp_path / "missing.json")


def test_boundary_building_crosses_the_crop():
    spec = synth.boundary_building_spec()
    building = spec.primitives[-1]
    assert building.lower[0] < 25.0 < building.upper[0]
    assert spec.upper[0] == 31.25


def test_floater_region_is_empty_air():
    spec = synth.city_block_spec()
    lower, upper = synth.floater_region(spec)
    assert lower[2] == spec.tallest_top() + 2.0 and np.all(upper > lower)


def test_generate_supervision_shapes_and_labels():
    spec = synth.city_block_spec()
    rig = synth.default_rig(spec, sat_size=16, pano_size=(32, 8))
    train, holdout = synth.generate_supervision(spec, rig, seed=1, n_samples=32, depth_affine=(2.0, 5.0))
    assert [v.kind for v in train] == ["satellite"] + ["panorama"] * 4
    assert [v.code_index for v in train] == [0, 1, 2, 3, 4]
    assert len(holdout) == 1 and holdout[0].code_index == 1
    sat = train[0]
    assert sat.image.shape == (16, 16, 3) and sat.sky_mask is None
    assert np.all((sat.image >= 0) & (sat.image <= 1))
    pano = train[1]
    assert pano.sky_mask.shape == (8, 32) and pano.sky_mask[0].any() and not pano.sky_mask[-1].any()
    assert np.all(np.isnan(pano.depth[pano.sky_mask]))
    # the pseudo label is an affine map of metric depth
    from cameras import make_rays
    rays = make_rays(sat.camera)
    metric = synth.analytic_depth(spec, rays.origins, rays.directions).reshape(rays.shape)
    np.testing.assert_allclose(sat.depth, 2.0 * metric + 5.0)


def test_supervision_noise_is_seeded():
    spec = synth.city_block_spec()
    rig = synth.Rig((("satellite", Orthographic((0.0, 0.0), 50.0, 60.0, 8, 8)),))
    a, _ = synth.generate_supervision(spec, rig, seed=4, n_samples=16, noise_std=0.05)
    b, _ = synth.generate_supervision(spec, rig, seed=4, n_samples=16, noise_std=0.05)
    np.testing.assert_array_equal(a[0].image, b[0].image)


def test_view_set_roundtrip(tmp_path):
    spec = synth.city_block_spec()
    rig = synth.Rig((("satellite", Orthographic((0.0, 0.0), 50.0, 60.0, 8, 8)),
                     ("panorama", Panorama(Pose((0.0, 0.0, 1.7)), width=16, height=4))),
                    (("panorama", Panorama(Pose((1.0, 0.0, 1.7)), width=16, height=4)),))
    train, holdout = synth.generate_supervision(spec, rig, n_samples=16)
    manifest = synth.save_view_set(train, holdout, tmp_path, spec)
    assert manifest.name == "manifest.json"
    train2, holdout2 = synth.load_view_set(tmp_path)
    assert [v.name for v in train2] == [v.name for v in train]
    assert holdout2[0].code_index == 1
    np.testing.assert_allclose(train2[1].image, train[1].image, atol=0.5 / 255 + 1e-9)
    np.testing.assert_array_equal(train2[1].sky_mask, train[1].sky_mask)
    np.testing.assert_allclose(train2[0].depth, train[0].depth, rtol=1e-6)
    with pytest.raises(ConfigError):
        synth.load_view_set(tmp_path / "nowhere")
