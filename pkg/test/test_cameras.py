import math

import numpy as np
import pytest

from cameras import (Orthographic, Panorama, Perspective, Pose, SamplerConfig, ViewSample, camera_from_dict,
                     camera_to_dict, crop_training_view, make_rays, pano_coordinates, pano_directions,
                     pano_to_perspective, sample_training_view)
from errors import CameraError


def test_zero_pose_looks_north():
    cam = Perspective(Pose((1.0, 2.0, 3.0)), 90.0, 3, 3)
    rays = make_rays(cam)
    center = rays.directions[4]
    np.testing.assert_allclose(center, [0.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(rays.origins, np.tile([1.0, 2.0, 3.0], (9, 1)))


def test_positive_yaw_turns_east():
    cam = Perspective(Pose(yaw=math.pi / 2), 90.0, 1, 1)
    np.testing.assert_allclose(make_rays(cam).directions[0], [1.0, 0.0, 0.0], atol=1e-12)


def test_positive_pitch_looks_up():
    cam = Perspective(Pose(pitch=math.radians(30)), 60.0, 1, 1)
    d = make_rays(cam).directions[0]
    assert d[2] == pytest.approx(0.5)


def test_perspective_rays_are_unit_and_span_fov():
    cam = Perspective(Pose(), 90.0, 64, 48)
    rays = make_rays(cam)
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0)
    assert rays.shape == (48, 64)
    # outermost pixel centers sit half a pixel inside the 45 degree half-angle
    left = rays.directions[32 * 64 - 64]
    angle = math.degrees(math.atan2(-left[0], left[1]))
    focal = 32.0 / math.tan(math.radians(45))
    assert angle == pytest.approx(math.degrees(math.atan(31.5 / focal)))


def test_orthographic_pixel_centers():
    cam = Orthographic((10.0, -5.0), 4.0, 30.0, 4, 2)
    rays = make_rays(cam)
    np.testing.assert_allclose(rays.origins[0], [8.5, -4.0, 30.0])
    np.testing.assert_allclose(rays.origins[-1], [11.5, -6.0, 30.0])
    np.testing.assert_allclose(rays.directions, np.tile([0.0, 0.0, -1.0], (8, 1)))


def test_ray_batch_is_read_only():
    rays = make_rays(Perspective(Pose(), 90.0, 2, 2))
    with pytest.raises(ValueError):
        rays.origins[0, 0] = 1.0
    assert len(rays) == 4


def test_pano_directions_invert():
    cam = Panorama(Pose(yaw=0.4), width=64, height=16)
    u = np.array([0.5, 10.25, 33.0, 63.5])
    v = np.array([0.5, 3.0, 8.0, 15.5])
    d = pano_directions(u, v, cam)
    uu, vv, inside = pano_coordinates(d, cam)
    np.testing.assert_allclose(uu, u, atol=1e-9)
    np.testing.assert_allclose(vv, v, atol=1e-9)
    assert inside.all()


def test_pano_coordinates_span_mask():
    cam = Panorama(Pose(), width=32, height=8)
    u, v, inside = pano_coordinates(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), cam)
    assert (u[0], v[0]) == (pytest.approx(16.0), pytest.approx(4.0))
    # straight up lies outside a +-45 degree pitch span
    assert inside.tolist() == [True, False]


def test_camera_validation():
    with pytest.raises(CameraError):
        make_rays(Perspective(Pose(), 180.0, 4, 4))
    with pytest.raises(CameraError):
        make_rays(Orthographic(extent=0.0))
    with pytest.raises(CameraError):
        make_rays(Panorama(yaw_span=7.0))
    with pytest.raises(CameraError):
        make_rays(Perspective(Pose(), 60.0, 0, 4))


def test_camera_dict_roundtrip_and_errors():
    cam = Perspective(Pose((1.0, 2.0, 1.7), math.radians(20), math.radians(-5)), 105.0, 32, 16)
    again = camera_from_dict(camera_to_dict(cam))
    assert again.fov_deg == cam.fov_deg and again.width == 32
    assert again.pose.yaw == pytest.approx(cam.pose.yaw)
    assert camera_to_dict(Orthographic())["type"] == "orthographic"
    with pytest.raises(CameraError):
        camera_from_dict({"type": "fisheye"})
    with pytest.raises(CameraError):
        camera_from_dict({"type": "perspective", "width": "wide"})


def test_pano_to_perspective_matches_direct_lookup():
    """A crop of a panorama that is constant along pitch keeps the yaw ramp."""
    w, h = 360, 90
    yaw_ramp = (np.arange(w) + 0.5) / w
    pano = np.tile(yaw_ramp[None, :, None], (h, 1, 3))
    crop, inside = pano_to_perspective(pano, 0.0, 0.0, 60.0, 31, 15)
    assert inside.all()
    # center column looks straight ahead: yaw 0 sits mid-panorama
    assert crop[7, 15, 0] == pytest.approx(0.5, abs=1e-9)
    assert np.all(np.diff(crop[7, :, 0]) > 0)


def test_pano_to_perspective_marks_out_of_span():
    pano = np.ones((16, 64))
    crop, inside = pano_to_perspective(pano, 0.0, math.radians(60), 90.0, 8, 8)
    assert crop.shape == (8, 8)
    assert not inside[0].any()
    assert inside[-1].all()


def test_pano_wraps_around_the_seam():
    w = 64
    pano = np.zeros((16, w, 1))
    pano[:, 0] = 1.0
    pano[:, -1] = 1.0
    crop, _ = pano_to_perspective(pano, math.pi, 0.0, 10.0, 5, 5)
    assert crop[2, 2, 0] == pytest.approx(1.0)


def test_sampler_ranges(rng):
    cfg = SamplerConfig()
    for _ in range(200):
        s = sample_training_view(rng, cfg)
        assert -179.0 <= math.degrees(s.yaw) <= 179.0
        assert -30.0 <= math.degrees(s.pitch) <= 30.0
        assert s.fov_deg in cfg.fov_choices_deg
        assert s.roll == 0.0


def test_crop_training_view_rejects_unknown_fov():
    cfg = SamplerConfig(render_size=(8, 8))
    pano = np.zeros((16, 64, 3))
    crop, _ = crop_training_view(pano, ViewSample(0.0, 0.0, 0.0, 90.0), cfg)
    assert crop.shape == (8, 8, 3)
    with pytest.raises(CameraError):
        crop_training_view(pano, ViewSample(0.0, 0.0, 0.0, 75.0), cfg)


def test_sampler_fov_choices_are_uniform(rng):
    cfg = SamplerConfig()
    n = 3000
    fovs = [sample_training_view(rng, cfg).fov_deg for _ in range(n)]
    p = 1.0 / len(cfg.fov_choices_deg)
    sigma = math.sqrt(n * p * (1.0 - p))
    for choice in cfg.fov_choices_deg:
        assert abs(fovs.count(choice) - n * p) <= 3.0 * sigma
