"""
Tests for PSNR, SSIM, rRMSE, difference maps and the metrics CSV.
"""

import csv
import math

import matplotlib.image as mpimg
import numpy as np
import pytest
from skimage.metrics import structural_similarity

from triplet.errors import MetricError, ShapeError
from triplet.metrics import (
    CSV_HEADER,
    MetricsRow,
    diff_map,
    evaluate,
    mid_slices,
    psnr,
    render_diff_map,
    rrmse,
    ssim,
    summarize,
    write_rows,
)


# =============================================================================
# Scalar metrics
# =============================================================================

class TestPSNR:

    def test_ten_percent_error_is_twenty_db(self):
        y = np.ones((4, 4, 2))
        assert psnr(y * 1.1, y) == pytest.approx(20.0, abs=1e-9)

    def test_identical_is_infinite(self, rng):
        y = rng.uniform(size=(8, 8))
        assert psnr(y, y) == math.inf

    def test_matches_formula(self, rng):
        x, y = rng.uniform(size=(2, 6, 6, 3))
        expected = 10 * np.log10(y.max() ** 2 / np.mean((x - y) ** 2))
        assert psnr(x, y) == pytest.approx(expected, rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_non_positive_reference(self):
        with pytest.raises(MetricError):
            psnr(np.ones(4), -np.ones(4))


class TestRRMSE:

    def test_half(self):
        y = np.full((3, 3), 2.0)
        assert rrmse(y + 1.0, y) == pytest.approx(0.5)

    def test_zero_mean_reference(self):
        with pytest.raises(MetricError):
            rrmse(np.ones(4), np.array([1.0, -1.0, 1.0, -1.0]))


class TestSSIM:

    def test_identical_is_one(self, rng):
        y = rng.uniform(size=(16, 16, 3))
        assert ssim(y, y) == pytest.approx(1.0)

    def test_matches_scikit_image_per_slice(self, rng):
        y = rng.uniform(size=(24, 20, 3))
        x = y + rng.normal(scale=0.1, size=y.shape)
        L = float(y.max() - y.min())
        expected = np.mean([
            structural_similarity(x[..., k], y[..., k], gaussian_weights=True, sigma=1.5,
                                  use_sample_covariance=False, data_range=L)
            for k in range(3)
        ])
        assert ssim(x, y) == pytest.approx(expected, abs=1e-4)

    def test_two_dimensional_input(self, rng):
        y = rng.uniform(size=(16, 16))
        x = y * 0.9
        expected = structural_similarity(x, y, gaussian_weights=True, sigma=1.5,
                                         use_sample_covariance=False, data_range=float(y.max() - y.min()))
        assert ssim(x, y) == pytest.approx(expected, abs=1e-4)

    def test_small_slices_rejected(self):
        with pytest.raises(MetricError):
            ssim(np.ones((8, 8, 4)), np.ones((8, 8, 4)))

    def test_flat_reference_rejected(self):
        with pytest.raises(MetricError):
            ssim(np.ones((16, 16)), np.ones((16, 16)))

    def test_more_noise_scores_lower(self, rng):
        y = rng.uniform(size=(16, 16, 2))
        noise = rng.normal(size=y.shape)
        scores = [ssim(y + s * noise, y) for s in (0.01, 0.1, 0.5)]
        assert scores[0] > scores[1] > scores[2]


# =============================================================================
# Difference maps
# =============================================================================

class TestDiffMap:

    def test_absolute_difference(self):
        np.testing.assert_array_equal(diff_map([1.0, -2.0], [0.0, 1.0]), [1.0, 3.0])

    def test_mid_slices(self):
        v = np.arange(4 * 6 * 8, dtype=float).reshape(4, 6, 8)
        views = mid_slices(v)
        np.testing.assert_array_equal(views["axial"], v[:, :, 4])
        assert views["coronal"].shape == (8, 6)
        assert views["sagittal"].shape == (8, 4)

    def test_rendered_pixels_follow_values(self, tmp_path):
        diff = np.zeros((16, 16, 8), np.float32)
        diff[3, 5, 4] = 2.0
        diff[10, 10, 4] = 1.0
        paths = render_diff_map(diff, tmp_path / "maps" / "sample")
        assert [p.name for p in paths] == ["sample_axial.png", "sample_coronal.png", "sample_sagittal.png"]
        pixels = mpimg.imread(paths[0])
        assert pixels.shape[:2] == (16, 16)
        gray = pixels[..., 0]
        assert gray[3, 5] == pytest.approx(1.0, abs=1e-2)
        assert gray[10, 10] == pytest.approx(0.5, abs=1e-2)
        assert gray[0, 0] == pytest.approx(0.0, abs=1e-2)

    def test_fixed_scale(self, tmp_path):
        diff = np.full((12, 12, 4), 0.5, np.float32)
        path = render_diff_map(diff, tmp_path / "d", vmax=2.0)[0]
        assert mpimg.imread(path)[0, 0, 0] == pytest.approx(0.25, abs=1e-2)


# =============================================================================
# Rows and CSV
# =============================================================================

class TestRows:

    def test_header_and_formatting(self, tmp_path):
        rows = [MetricsRow("p000/000", 31.5, 0.9, 0.12), MetricsRow("p000/001", math.inf, 1.0, 0.0)]
        path = write_rows(tmp_path / "m.csv", rows)
        with open(path, newline="", encoding="utf-8") as f:
            lines = list(csv.reader(f))
        assert tuple(lines[0]) == CSV_HEADER == ("sample_id", "psnr", "ssim", "rrmse")
        assert lines[1] == ["p000/000", "31.500000", "0.900000", "0.120000"]
        assert lines[2][1] == "inf"

    def test_evaluate_orders_better_predictions_first(self, rng):
        y = rng.uniform(0.1, 1.0, size=(16, 16, 2))
        good = evaluate(y + 0.01 * rng.normal(size=y.shape), y, "good")
        bad = evaluate(y + 0.2 * rng.normal(size=y.shape), y, "bad")
        assert good.psnr > bad.psnr and good.ssim > bad.ssim and good.rrmse < bad.rrmse

    def test_summarize_skips_infinite_psnr(self):
        rows = [MetricsRow("a", 30.0, 0.8, 0.1), MetricsRow("b", 40.0, 0.9, 0.2), MetricsRow("c", math.inf, 1.0, 0.0)]
        summary = summarize(rows)
        assert summary["psnr"] == pytest.approx(35.0)
        assert summary["median_psnr"] == pytest.approx(35.0)
        assert summary["ssim"] == pytest.approx(0.9)
        assert summary["rrmse"] == pytest.approx(0.1)
