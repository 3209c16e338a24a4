import json
import math

import numpy as np
import pytest

import autodiff
import field as fld
import losses
import renderer
from cameras import Orthographic, Panorama, Perspective, Pose, SamplerConfig, ViewSample
from conftest import fd_check, make_field
from errors import CameraError, ConfigError, FitDivergedError, MissingCacheError, NonFiniteGradientError


def pano_view(rng, width=6, height=4, position=(0.3, -0.2, 2.0), code_index=0, name="pano"):
    sky = np.zeros((height, width), bool)
    sky[0] = True
    return autodiff.SupervisedView("panorama", Panorama(Pose(position), width=width, height=height),
                                   rng.random((height, width, 3)), code_index,
                                   rng.uniform(2.0, 10.0, (height, width)), sky, None, name)


def sat_view(rng, size=6, name="sat"):
    cam = Orthographic((0.0, 0.0), 10.0, 8.5, size, size)
    return autodiff.SupervisedView("satellite", cam, rng.random((size, size, 3)), 1,
                                   rng.uniform(5.0, 9.0, (size, size)), None, None, name)


def tiny_fit_config(**kw):
    base = dict(iterations=4, lr=1e-2, patch_size=4, seed=3,
                gravity=losses.GravityConfig(n_samples=64),
                march=renderer.MarchConfig(n_samples=8, jitter=True),
                sampler=SamplerConfig(render_size=(6, 6)))
    base.update(kw)
    return autodiff.FitConfig(**base)


def test_adam_first_step_moves_by_lr():
    params = {"plane_xy": np.array([1.0, -2.0, 3.0])}
    grads = {"plane_xy": np.array([0.5, -4.0, 0.0])}
    state = autodiff.AdamState.zeros_like(params)
    autodiff.adam_step(params, grads, state, lr=0.1)
    np.testing.assert_allclose(params["plane_xy"], [0.9, -1.9, 3.0], atol=1e-6)
    assert state.step == 1


def test_adam_zero_lr_is_a_no_op(small_field):
    params = small_field.parameters()
    before = {k: v.copy() for k, v in params.items()}
    grads = {k: np.ones(v.shape) for k, v in params.items()}
    autodiff.adam_step(params, grads, autodiff.AdamState.zeros_like(params), lr=0.0)
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])


def test_adam_rejects_non_finite_gradients(small_field):
    params = small_field.parameters()
    grads = small_field.zero_grads()
    grads["plane_xz"][0, 0, 0] = np.inf
    grads["plane_xz"][1, 0, 0] = np.nan
    with pytest.raises(NonFiniteGradientError) as info:
        autodiff.adam_step(params, grads, autodiff.AdamState.zeros_like(params), lr=1e-2)
    assert info.value.group == "planes" and info.value.count == 2


def test_supervised_view_checks_shapes(rng):
    with pytest.raises(ConfigError):
        autodiff.SupervisedView("panorama", Panorama(width=8, height=4), np.zeros((4, 6, 3)))
    with pytest.raises(ConfigError):
        autodiff.SupervisedView("drone", Panorama(width=6, height=4), np.zeros((4, 6, 3)))


def test_random_patch_stays_inside(rng):
    for _ in range(100):
        rows, cols = autodiff.random_patch((10, 20), 4, rng)
        assert rows.stop - rows.start == 4 and cols.stop - cols.start == 4
        assert 0 <= rows.start and rows.stop <= 10 and cols.stop <= 20
    rows, cols = autodiff.random_patch((3, 5), 8, rng)
    assert (rows, cols) == (slice(0, 3), slice(0, 5))


def test_perspective_crop_resamples_labels(rng):
    view = pano_view(rng, width=64, height=16)
    crop = autodiff.perspective_crop(view, rng, SamplerConfig(render_size=(8, 6)))
    assert crop.kind == "perspective" and isinstance(crop.camera, Perspective)
    assert crop.image.shape == (6, 8, 3)
    assert crop.depth.shape == (6, 8) and crop.sky_mask.dtype == bool
    assert crop.valid is not None and crop.code_index == view.code_index
    with pytest.raises(ConfigError):
        autodiff.perspective_crop(sat_view(rng), rng, SamplerConfig())
    tilted = autodiff.SupervisedView("panorama", Panorama(Pose(pitch=0.1), width=8, height=4), np.zeros((4, 8, 3)))
    with pytest.raises(ConfigError):
        autodiff.perspective_crop(tilted, rng, SamplerConfig())


def test_perspective_crop_only_accepts_sampler_fovs(rng):
    view = pano_view(rng, width=64, height=16)
    cfg = SamplerConfig(render_size=(8, 6))
    crop = autodiff.perspective_crop(view, rng, cfg, ViewSample(0.2, 0.1, 0.0, 105.0))
    assert crop.camera.fov_deg == 105.0
    assert crop.camera.pose.yaw == pytest.approx(0.2)
    with pytest.raises(CameraError):
        autodiff.perspective_crop(view, rng, cfg, ViewSample(0.0, 0.0, 0.0, 75.0))


def test_backward_needs_a_forward_cache(small_field):
    with pytest.raises(MissingCacheError):
        autodiff.backward(small_field, None)


def _check_scene_loss_grads(field, rng, **picks):
    view = pano_view(rng)
    patch = (slice(0, 4), slice(0, 6))
    weights = losses.LossWeights()
    march = renderer.MarchConfig(n_samples=16, depth_valid_threshold=0.0)
    gravity = losses.GravityConfig(n_samples=200, epsilon=0.0)

    def report():
        return autodiff.scene_loss(field, view, patch, weights, march, gravity, np.random.default_rng(5))

    r = report()
    assert set(r.terms) == {"rgb", "sky_op", "sky_l1", "depth", "grav"}
    fd_check(lambda: report().total, field, r.grads, rng, **picks)


def test_scene_loss_grads_match_finite_differences(small_field, rng):
    _check_scene_loss_grads(small_field, rng, per_group=200)


@pytest.mark.slow
def test_scene_loss_grads_on_larger_field(small_extent, rng):
    _check_scene_loss_grads(make_field(small_extent, res=16, channels=4, seed=2), rng, per_param=200)


def test_scene_loss_tv_regularizer_and_unknown(small_field, rng):
    view = pano_view(rng)
    patch = (slice(0, 2), slice(0, 3))
    march = renderer.MarchConfig(n_samples=8)
    r = autodiff.scene_loss(small_field, view, patch, losses.LossWeights(), march, losses.GravityConfig(),
                            rng, regularizer="tv", use_depth=False)
    assert "tv" in r.terms and "grav" not in r.terms and "depth" not in r.terms
    with pytest.raises(ConfigError):
        autodiff.scene_loss(small_field, view, patch, losses.LossWeights(), march, losses.GravityConfig(),
                            rng, regularizer="l1")


def test_fit_config_validation():
    with pytest.raises(ConfigError):
        autodiff.FitConfig(lr=-1.0).validate()
    with pytest.raises(ConfigError):
        autodiff.FitConfig(view_probs=(0.0, 0.0, 0.0)).validate()
    autodiff.FitConfig(lr=0.0).validate()


def test_fit_needs_both_view_kinds(small_field, rng):
    with pytest.raises(ConfigError):
        autodiff.fit_scene([pano_view(rng)], tiny_fit_config(), field=small_field)


def test_fit_scene_writes_log_and_checkpoints(tmp_path, small_field, rng):
    views = [sat_view(rng), pano_view(rng), pano_view(rng, position=(-1.0, 1.0, 1.5), name="pano2")]
    holdout = [pano_view(rng, name="held")]
    cfg = tiny_fit_config(eval_every=2, checkpoint_every=2)
    before = small_field.plane_xy.copy()
    result = autodiff.fit_scene(views, cfg, field=small_field, holdout=holdout,
                                log_path=tmp_path / "fit.log.jsonl", checkpoint_dir=tmp_path / "ckpt")
    assert len(result.log) == 4
    assert [r["iteration"] for r in result.log] == [1, 2, 3, 4]
    for record in result.log:
        assert record["kind"] in autodiff.VIEW_KINDS
        assert math.isfinite(record["total"]) and "loss_grav" in record and "elapsed_s" in record
    assert "eval_psnr" in result.log[1] and "eval_psnr" not in result.log[0]
    assert result.checkpoint.endswith("fit_000004.tpf")
    assert (tmp_path / "ckpt" / "fit_000002.tpf").exists()
    assert not np.array_equal(result.field.plane_xy, before)
    on_disk = autodiff.read_training_log(tmp_path / "fit.log.jsonl")
    assert [r["iteration"] for r in on_disk] == [1, 2, 3, 4]
    assert on_disk[0]["total"] == pytest.approx(result.log[0]["total"])


def test_fit_scene_is_deterministic_given_seed(small_extent, rng):
    views = [sat_view(rng), pano_view(rng)]
    logs = []
    for _ in range(2):
        result = autodiff.fit_scene(views, tiny_fit_config(iterations=3), field=make_field(small_extent))
        logs.append([{k: v for k, v in r.items() if k != "elapsed_s"} for r in result.log])
    assert json.dumps(logs[0]) == json.dumps(logs[1])


def test_fit_scene_reports_divergence(small_field, rng):
    views = [sat_view(rng), pano_view(rng)]
    for view in views:
        view.image[...] = np.nan
    with pytest.raises(FitDivergedError) as info:
        autodiff.fit_scene(views, tiny_fit_config(), field=small_field)
    assert info.value.iteration == 1 and info.value.checkpoint is None
    recovered = info.value.field
    assert recovered is not small_field
    for name, value in small_field.parameters().items():
        np.testing.assert_array_equal(recovered.parameters()[name], value)


def test_fit_scene_saves_last_good_parameters_on_divergence(small_extent, rng, tmp_path):
    views = [sat_view(rng), pano_view(rng)]
    for view in views:
        view.image[...] = np.nan
    field = make_field(small_extent)
    with pytest.raises(FitDivergedError) as info:
        autodiff.fit_scene(views, tiny_fit_config(), field=field, checkpoint_dir=tmp_path / "ckpt")
    assert info.value.checkpoint == str(tmp_path / "ckpt" / "last_good_000000.tpf")
    restored = fld.load_checkpoint(info.value.checkpoint, dtype=field.dtype)
    np.testing.assert_allclose(restored.plane_xy, field.plane_xy, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(restored.decoder.W1, field.decoder.W1, rtol=1e-6, atol=1e-7)


def test_evaluate_views_scores_a_perfect_render(small_field):
    cam = Panorama(Pose((0.0, 0.0, 2.0)), width=8, height=4)
    cfg = renderer.MarchConfig(n_samples=8)
    target = renderer.render_view(small_field, small_field.sky, cam, small_field.code(0), cfg).rgb
    view = autodiff.SupervisedView("panorama", cam, target)
    assert autodiff.evaluate_views(small_field, [view], cfg) == [math.inf]


# ============= Long-running scene fits =============
def _satellite_height_mae(field, spec, code_index, size=64):
    from synth import analytic_depth
    from cameras import make_rays

    altitude = spec.upper[2] + 14.0
    cam = Orthographic((0.0, 0.0), 50.0, altitude, size, size)
    grid = renderer.render_height(field, field.sky, cam, field.code(code_index), renderer.MarchConfig(n_samples=256))
    rays = make_rays(cam)
    truth = altitude - analytic_depth(spec, rays.origins, rays.directions).reshape(rays.shape)
    ok = np.isfinite(grid.values) & np.isfinite(truth)
    return grid.values, truth, ok


@pytest.mark.slow
def test_city_block_fit_reaches_target_quality(tmp_path):
    from synth import city_block_spec, generate_supervision

    spec = city_block_spec()
    train, holdout = generate_supervision(spec, seed=0, n_samples=256)
    cfg = autodiff.FitConfig(iterations=20000, march=renderer.MarchConfig(n_samples=96, jitter=True))
    result = autodiff.fit_scene(train, cfg, fld.SceneExtent(), fld.FieldConfig(res=64, channels=8))
    psnr = np.mean(autodiff.evaluate_views(result.field, holdout, renderer.MarchConfig(n_samples=256)))
    assert psnr >= 25.0
    pred, truth, ok = _satellite_height_mae(result.field, spec, 0)
    assert np.abs(pred[ok] - truth[ok]).mean() <= 1.0


@pytest.mark.slow
def test_gravity_suppresses_floaters():
    from metrics import region_mean_density
    from synth import city_block_spec, floater_region, generate_supervision

    spec = city_block_spec()
    train, _ = generate_supervision(spec, seed=0, n_samples=128)
    lower, upper = floater_region(spec)
    mass = {}
    for grav in (0.0, 3.5):
        runs = []
        for seed in range(3):
            cfg = autodiff.FitConfig(iterations=3000, seed=seed, weights=losses.LossWeights(grav=grav))
            result = autodiff.fit_scene(train, cfg, fld.SceneExtent(), fld.FieldConfig(res=32, channels=8))
            runs.append(region_mean_density(result.field, result.field.code(0), lower, upper,
                                            rng=np.random.default_rng(seed)))
        mass[grav] = np.mean(runs)
    assert mass[3.5] <= 0.5 * mass[0.0]


@pytest.mark.slow
def test_spatial_tokens_help_at_the_crop_boundary():
    from synth import boundary_building_spec, generate_supervision

    spec = boundary_building_spec()
    train, _ = generate_supervision(spec, seed=0, n_samples=128)
    errors = {}
    for tokens in (0, 2):
        runs = []
        for seed in range(3):
            cfg = autodiff.FitConfig(iterations=3000, seed=seed)
            result = autodiff.fit_scene(train, cfg, fld.SceneExtent(N=tokens), fld.FieldConfig(res=32, channels=8))
            pred, truth, ok = _satellite_height_mae(result.field, spec, 0)
            # last 6.25 m inside the crop on each side
            xs = (np.arange(pred.shape[1]) + 0.5) / pred.shape[1] * 50.0 - 25.0
            band = np.abs(xs)[None, :] >= 18.75
            sel = ok & np.broadcast_to(band, pred.shape)
            runs.append(np.abs(pred[sel] - truth[sel]).mean())
        errors[tokens] = np.mean(runs)
    assert errors[2] < errors[0]
