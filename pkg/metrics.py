import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from errors import MetricsError
from geodata import HeightGrid
from renderer import sample_source

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DepthMetrics:
    mae: float
    rmse: float
    pct_lt_2_5: float
    pct_lt_7_5: float
    valid_fraction: float
    n_valid: int
    offset: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred: HeightGrid, gt: HeightGrid, align: str = "none") -> DepthMetrics:
    """Height errors over pixels valid in both grids.

    ``align="median"`` removes the median signed offset before measuring.
    """
    if align not in ("none", "median"):
        raise MetricsError(f"Unknown alignment '{align}' (use none or median)")
    if pred.values.shape != gt.values.shape:
        raise MetricsError(f"Grids differ in shape: {pred.values.shape} vs {gt.values.shape}")
    if not pred.same_lattice(gt):
        raise MetricsError("Prediction and ground truth are on different lattices")
    valid = ~pred.nodata_mask() & ~gt.nodata_mask()
    n = int(valid.sum())
    if n == 0:
        raise MetricsError("No pixel is valid in both grids")
    diff = pred.values[valid].astype(np.float64) - gt.values[valid].astype(np.float64)
    offset = float(np.median(diff)) if align == "median" else 0.0
    err = np.abs(diff - offset)
    return DepthMetrics(
        mae=float(err.mean()),
        rmse=float(math.sqrt(float(np.mean(err * err)))),
        pct_lt_2_5=100.0 * float(np.mean(err < 2.5)),
        pct_lt_7_5=100.0 * float(np.mean(err < 7.5)),
        valid_fraction=n / valid.size,
        n_valid=n,
        offset=offset,
    )


def psnr(pred: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise MetricsError(f"Image shapes differ: {pred.shape} vs {target.shape}")
    sq = (pred - target) ** 2
    if mask is not None:
        sq = sq[np.asarray(mask, dtype=bool)]
    if sq.size == 0:
        raise MetricsError("No pixel to compare")
    mse = float(sq.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def region_mean_density(source, w: np.ndarray, lower, upper, n: int = 20000,
                        rng: Optional[np.random.Generator] = None) -> float:
    """Monte Carlo mean of sigma over a box; measures floaters in known-empty air."""
    rng = rng if rng is not None else np.random.default_rng(0)
    lower = np.asarray(lower, np.float64)
    upper = np.asarray(upper, np.float64)
    if np.any(upper <= lower):
        raise MetricsError(f"Empty region [{lower}, {upper}]")
    x = lower + rng.random((n, 3)) * (upper - lower)
    return float(np.mean(sample_source(source, x, w)[0]))


def write_report(report: Union[DepthMetrics, dict], path: Union[str, Path]) -> None:
    """Single-record JSON report."""
    record = report.to_dict() if isinstance(report, DepthMetrics) else dict(report)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True))
    logger.info("Wrote report %s", path)
