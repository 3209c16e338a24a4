import json
import math

import numpy as np
import pytest
from affine import Affine

import metrics
from errors import MetricsError
from geodata import HeightGrid
from synth import AnalyticField, city_block_spec, floater_region


def grid(values, transform=Affine(0.5, 0, 0, 0, -0.5, 10)):
    return HeightGrid(np.asarray(values, np.float64), transform)


def test_depth_metrics_match_naive_recomputation(rng):
    gt = rng.uniform(0, 30, (40, 50))
    pred = gt + rng.normal(0, 4.0, gt.shape)
    pred[rng.random(gt.shape) < 0.1] = np.nan
    gt[rng.random(gt.shape) < 0.05] = np.nan
    m = metrics.depth_metrics(grid(pred), grid(gt))

    errs = []
    for p, g in zip(pred.ravel(), gt.ravel()):
        if not (math.isnan(p) or math.isnan(g)):
            errs.append(abs(p - g))
    n = len(errs)
    assert m.n_valid == n
    assert m.mae == pytest.approx(sum(errs) / n, abs=1e-12)
    assert m.rmse == pytest.approx(math.sqrt(sum(e * e for e in errs) / n), abs=1e-12)
    assert m.pct_lt_2_5 == pytest.approx(100.0 * sum(e < 2.5 for e in errs) / n, abs=1e-12)
    assert m.pct_lt_7_5 == pytest.approx(100.0 * sum(e < 7.5 for e in errs) / n, abs=1e-12)
    assert m.valid_fraction == n / gt.size


def test_constant_offset_of_three_meters():
    gt = np.linspace(0, 20, 64).reshape(8, 8)
    m = metrics.depth_metrics(grid(gt + 3.0), grid(gt))
    assert (m.mae, m.rmse, m.pct_lt_2_5, m.pct_lt_7_5) == (pytest.approx(3.0), pytest.approx(3.0), 0.0, 100.0)
    aligned = metrics.depth_metrics(grid(gt + 3.0), grid(gt), align="median")
    assert aligned.offset == pytest.approx(3.0) and aligned.mae == pytest.approx(0.0, abs=1e-12)


def test_depth_metrics_errors():
    a = grid(np.zeros((4, 4)))
    with pytest.raises(MetricsError):
        metrics.depth_metrics(a, grid(np.zeros((4, 5))))
    with pytest.raises(MetricsError):
        metrics.depth_metrics(a, grid(np.zeros((4, 4)), Affine(1, 0, 0, 0, -1, 10)))
    with pytest.raises(MetricsError):
        metrics.depth_metrics(a, grid(np.full((4, 4), np.nan)))
    with pytest.raises(MetricsError):
        metrics.depth_metrics(a, a, align="mean")


def test_psnr_matches_naive(rng):
    pred = rng.random((16, 16, 3))
    target = rng.random((16, 16, 3))
    mse = sum((p - t) ** 2 for p, t in zip(pred.ravel(), target.ravel())) / pred.size
    assert metrics.psnr(pred, target) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)
    mask = np.zeros((16, 16), bool)
    mask[:4] = True
    masked = ((pred[:4] - target[:4]) ** 2).mean()
    assert metrics.psnr(pred, target, mask) == pytest.approx(-10 * math.log10(masked), abs=1e-9)
    assert metrics.psnr(pred, pred) == math.inf
    with pytest.raises(MetricsError):
        metrics.psnr(pred, target[:8])
    with pytest.raises(MetricsError):
        metrics.psnr(pred, target, np.zeros((16, 16), bool))


def test_true_scene_has_no_floaters():
    spec = city_block_spec()
    lower, upper = floater_region(spec)
    assert metrics.region_mean_density(AnalyticField(spec), np.zeros(1), lower, upper, n=5000) == 0.0
    with pytest.raises(MetricsError):
        metrics.region_mean_density(AnalyticField(spec), np.zeros(1), upper, lower)


def test_write_report(tmp_path):
    m = metrics.depth_metrics(grid(np.ones((2, 2)) * 4.0), grid(np.ones((2, 2))))
    metrics.write_report(m, tmp_path / "r.json")
    record = json.loads((tmp_path / "r.json").read_text())
    assert record["mae"] == 3.0 and record["n_valid"] == 4
    metrics.write_report({"psnr": 30.0}, tmp_path / "p.json")
    assert json.loads((tmp_path / "p.json").read_text()) == {"psnr": 30.0}
