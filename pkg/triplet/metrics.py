"""
Image quality metrics, difference maps and the MetricsRow CSV schema.

psnr and rrmse treat the second argument as the reference; ssim is
symmetric apart from the dynamic range, which comes from the reference.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
from matplotlib import image as mpimg
from scipy import ndimage

from .errors import MetricError, ShapeError

logger = logging.getLogger("triplet.metrics")

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_WINDOW = 2 * int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5) + 1
CSV_HEADER = ("sample_id", "psnr", "ssim", "rrmse")


def _pair(op: str, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(op, "inputs differ in shape", x.shape, y.shape)
    return x, y


def psnr(x, y) -> float:
    """20 log10(max(y) / rmse); identical inputs give +inf."""
    x, y = _pair("psnr", x, y)
    err = float(np.mean((x - y) ** 2))
    if err == 0.0:
        return math.inf
    peak = float(y.max())
    if peak <= 0:
        raise MetricError("psnr: reference maximum must be positive")
    return 20.0 * math.log10(peak / math.sqrt(err))


def rrmse(x, y) -> float:
    """rmse divided by the reference mean."""
    x, y = _pair("rrmse", x, y)
    mean_ref = float(y.mean())
    if mean_ref == 0.0:
        raise MetricError("rrmse: reference mean is zero")
    return math.sqrt(float(np.mean((x - y) ** 2))) / mean_ref


def _ssim_slice(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> float:
    blur = lambda a: ndimage.gaussian_filter(a, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")
    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    vxy = blur(x * y) - ux * uy
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = (SSIM_WINDOW - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def ssim(x, y, k1: float = 0.01, k2: float = 0.03, data_range: Optional[float] = None) -> float:
    """
    Mean Gaussian-window SSIM (window 11, sigma 1.5).

    2D inputs are scored directly; 3D volumes slice by slice along the last
    axis and averaged. Border pixels within the window radius are excluded.
    """
    x, y = _pair("ssim", x, y)
    if x.ndim not in (2, 3):
        raise ShapeError("ssim", "expected a 2D image or a 3D volume", x.shape)
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"ssim: slice extents {x.shape[:2]} smaller than the {SSIM_WINDOW}-pixel window")
    L = float(data_range) if data_range is not None else float(y.max() - y.min())
    if L <= 0:
        raise MetricError("ssim: reference has no dynamic range")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    if x.ndim == 2:
        return _ssim_slice(x, y, c1, c2)
    return float(np.mean([_ssim_slice(x[..., k], y[..., k], c1, c2) for k in range(x.shape[2])]))


def diff_map(x, y) -> np.ndarray:
    x, y = _pair("diff_map", x, y)
    return np.abs(x - y).astype(np.float32)


def mid_slices(volume: np.ndarray) -> Dict[str, np.ndarray]:
    """Axial, coronal and sagittal mid slices of a [N, N, Z] volume."""
    a, b, c = volume.shape
    return {
        "axial": volume[:, :, c // 2],
        "coronal": volume[a // 2, :, :].T,
        "sagittal": volume[:, b // 2, :].T,
    }


def render_diff_map(diff: np.ndarray, prefix: Path, vmax: Optional[float] = None) -> List[Path]:
    """Write <prefix>_<view>.png grayscale renders of the three mid slices."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    top = float(diff.max()) if vmax is None else float(vmax)
    paths = []
    for view, plane in mid_slices(np.asarray(diff)).items():
        path = prefix.parent / f"{prefix.name}_{view}.png"
        mpimg.imsave(path, plane, cmap="gray", vmin=0.0, vmax=top if top > 0 else 1.0)
        paths.append(path)
    return paths


# ============================================================================
# MetricsRow
# ============================================================================

def format_value(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return "nan"
    return f"{value:.6f}"


@dataclass(frozen=True)
class MetricsRow:
    sample_id: str
    psnr: float
    ssim: float
    rrmse: float

    def as_csv(self) -> List[str]:
        return [self.sample_id, format_value(self.psnr), format_value(self.ssim), format_value(self.rrmse)]


def evaluate(prediction, reference, sample_id: str = "sample") -> MetricsRow:
    return MetricsRow(sample_id, psnr(prediction, reference), ssim(prediction, reference), rrmse(prediction, reference))


def write_rows(path: Path, rows: Iterable[MetricsRow], header=CSV_HEADER) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row.as_csv())
    return path


def summarize(rows: List[MetricsRow]) -> Dict[str, float]:
    """Mean of each metric over rows, infinite PSNR values skipped."""
    finite_psnr = [r.psnr for r in rows if math.isfinite(r.psnr)]
    return {
        "psnr": float(np.mean(finite_psnr)) if finite_psnr else math.inf,
        "ssim": float(np.mean([r.ssim for r in rows])) if rows else math.nan,
        "rrmse": float(np.mean([r.rrmse for r in rows])) if rows else math.nan,
        "median_psnr": float(np.median(finite_psnr)) if finite_psnr else math.inf,
    }
