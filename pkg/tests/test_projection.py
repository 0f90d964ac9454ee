"""
Tests for the projector pair, FBP, dose simulation and MLEM/OSEM.
"""

import math

import numpy as np
import pytest
from scipy import ndimage

from triplet import tensor as T
from triplet.errors import ConfigError, GeometryError
from triplet.gradcheck import grad_check
from triplet.metrics import psnr
from triplet.projection import (
    FilteredBackprojection,
    Geometry,
    Sinogram,
    back_project,
    fbp,
    forward_project,
    mlem_osem,
    reconstruct,
    simulate_low_dose,
)
from triplet.tensor import Tensor


def _disk(n, radius, value=1.0, supersample=4, slices=1):
    """Anti-aliased disk centred on the pixel grid, repeated over slices."""
    fine = np.arange(n * supersample) / supersample - (n - 1) / 2.0 - (supersample - 1) / (2.0 * supersample)
    yy, xx = np.meshgrid(fine, fine, indexing="ij")
    inside = (yy ** 2 + xx ** 2 <= radius ** 2).astype(np.float64)
    image = inside.reshape(n, supersample, n, supersample).mean(axis=(1, 3)) * value
    return np.repeat(image[:, :, None], slices, axis=2)


def _blob(n, sigma):
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n] - c
    return np.exp(-(yy ** 2 + xx ** 2) / (2 * sigma ** 2))[:, :, None]


def _ray_oracle(image, geom, angle_index, bin_index):
    """Line integral along one ray, sampled with scipy's bilinear interpolation."""
    N = geom.image_size
    centre = (N - 1) / 2.0
    half = N * math.sqrt(2.0) / 2.0 + 1.0
    n_steps = int(math.ceil(2 * half / geom.ray_step))
    t = -half + (np.arange(n_steps) + 0.5) * geom.ray_step
    theta = geom.angles[angle_index]
    s = geom.bin_positions[bin_index]
    x = s * math.cos(theta) - t * math.sin(theta) + centre
    y = s * math.sin(theta) + t * math.cos(theta) + centre
    samples = ndimage.map_coordinates(image, [y, x], order=1, mode="grid-constant", cval=0.0)
    return float(samples.sum() * geom.ray_step)


# =============================================================================
# Geometry
# =============================================================================

class TestGeometry:

    def test_default_detector_covers_diagonal(self):
        g = Geometry.default(64)
        assert g.n_bins == 92 and g.n_bins % 2 == 0
        assert g.n_angles == 120
        assert g.angles[0] == 0.0 and g.angles[-1] < np.pi

    def test_short_detector_rejected(self):
        with pytest.raises(GeometryError):
            Geometry(n_angles=10, n_bins=20, image_size=32)

    def test_round_trip_through_dict(self):
        g = Geometry(n_angles=30, n_bins=24, image_size=16, ray_step=0.5)
        assert Geometry.from_dict(g.to_dict()) == g

    def test_sinogram_shape_checked(self):
        g = Geometry.default(8, n_angles=4)
        with pytest.raises(GeometryError):
            Sinogram(np.zeros((4, g.n_bins + 1, 1)), g)


# =============================================================================
# forward_project / back_project
# =============================================================================

class TestProjectors:

    def test_zero_volume_projects_to_zero(self):
        g = Geometry.default(16, n_angles=12)
        sino = forward_project(np.zeros((16, 16, 3)), g)
        assert sino.data.shape == (12, g.n_bins, 3)
        assert not sino.data.any()

    def test_centred_blob_gives_identical_rows(self):
        g = Geometry.default(32, n_angles=24)
        sino = forward_project(_blob(32, 3.0), g).data[:, :, 0]
        peak = float(sino.max())
        for row in sino[1:]:
            np.testing.assert_allclose(row, sino[0], atol=1e-3 * peak * 10)

    def test_matches_interpolated_ray_oracle(self, rng):
        g = Geometry.default(12, n_angles=7)
        image = rng.uniform(0, 1, size=(12, 12))
        sino = forward_project(image[:, :, None], g).data[:, :, 0]
        for a, b in [(0, 8), (3, 5), (6, 9), (2, 0), (5, g.n_bins - 1)]:
            expected = _ray_oracle(image, g, a, b)
            assert sino[a, b] == pytest.approx(expected, rel=1e-2, abs=1e-5)

    def test_pixel_impulse_has_unit_mass_per_angle(self):
        g = Geometry.default(16, n_angles=9)
        image = np.zeros((16, 16, 1))
        image[8, 7, 0] = 1.0
        sino = forward_project(image, g).data[:, :, 0]
        assert np.all(sino >= 0)
        np.testing.assert_allclose(sino.sum(axis=1), 1.0, rtol=0.05)

    @pytest.mark.parametrize("trial", range(10))
    def test_back_project_is_adjoint(self, trial):
        r = np.random.default_rng(trial)
        n = int(r.integers(4, 20))
        g = Geometry.default(n, n_angles=int(r.integers(1, 16)))
        x = r.standard_normal((n, n, 2))
        y = Sinogram(r.standard_normal((g.n_angles, g.n_bins, 2)), g)
        lhs = float(np.sum(forward_project(x, g).data.astype(np.float64) * y.data))
        rhs = float(np.sum(x * back_project(y)))
        assert lhs == pytest.approx(rhs, rel=1e-4, abs=1e-6)

    def test_volume_size_must_match(self):
        g = Geometry.default(16, n_angles=4)
        with pytest.raises(GeometryError):
            forward_project(np.zeros((15, 16, 1)), g)


# =============================================================================
# FBP
# =============================================================================

class TestFBP:

    def test_disk_reconstruction_quality(self):
        g = Geometry.default(64, n_angles=180)
        disk = _disk(64, 16.0)
        image = fbp(forward_project(disk, g), filter="ramp")
        assert psnr(image, disk) >= 25.0

    def test_zero_sinogram(self):
        g = Geometry.default(16, n_angles=8)
        assert not fbp(Sinogram(np.zeros((8, g.n_bins, 2)), g)).any()

    def test_linearity(self, rng):
        g = Geometry.default(16, n_angles=8)
        a = Sinogram(rng.standard_normal((8, g.n_bins, 1)), g)
        b = Sinogram(rng.standard_normal((8, g.n_bins, 1)), g)
        combined = fbp(Sinogram(2.0 * a.data + b.data, g))
        np.testing.assert_allclose(combined, 2.0 * fbp(a) + fbp(b), atol=1e-4)

    def test_unknown_filter(self):
        g = Geometry.default(8, n_angles=4)
        with pytest.raises(ConfigError):
            fbp(Sinogram(np.zeros((4, g.n_bins, 1)), g), filter="shepp")

    def test_single_angle_rejected(self):
        g = Geometry.default(8, n_angles=1)
        with pytest.raises(GeometryError):
            fbp(Sinogram(np.zeros((1, g.n_bins, 1)), g))


class TestFilteredBackprojectionLayer:

    def test_matches_fbp_per_batch_item(self, rng):
        g = Geometry.default(12, n_angles=6)
        data = rng.standard_normal((2, 1, 6, g.n_bins, 3))
        out = FilteredBackprojection(g, "hann")(Tensor(data)).data
        assert out.shape == (2, 1, 12, 12, 3)
        for b in range(2):
            np.testing.assert_allclose(out[b, 0], fbp(Sinogram(data[b, 0], g), "hann"), atol=1e-4)

    def test_gradient(self, rng):
        g = Geometry.default(6, n_angles=4)
        layer = FilteredBackprojection(g, "ramp")
        w = rng.standard_normal((1, 1, 6, 6, 1))
        x = Tensor(rng.standard_normal((1, 1, 4, g.n_bins, 1)))
        report = grad_check(lambda t: T.tsum(layer(t) * w), x)
        assert report.passed, report.summary()

    def test_rejects_wrong_geometry(self):
        g = Geometry.default(6, n_angles=4)
        with pytest.raises(GeometryError):
            FilteredBackprojection(g)(Tensor(np.zeros((1, 1, 5, g.n_bins, 1))))


# =============================================================================
# Dose simulation
# =============================================================================

class TestLowDose:

    def _sino(self):
        g = Geometry.default(16, n_angles=12)
        return forward_project(_disk(16, 5.0, slices=2), g)

    def test_high_count_full_dose_is_nearly_exact(self):
        sino = self._sino()
        noisy = simulate_low_dose(sino, dose_factor=1.0, scale_counts=1e6, seed=0)
        rel = np.linalg.norm(noisy.data - sino.data) / np.linalg.norm(sino.data)
        assert rel <= 1e-2

    def test_unbiased_over_many_draws(self):
        sino = self._sino()
        mean = np.mean([simulate_low_dose(sino, 0.1, 100.0, seed=s).data for s in range(200)], axis=0)
        assert float(mean.sum()) == pytest.approx(float(sino.data.sum()), rel=1e-2)

    def test_variance_grows_as_dose_falls(self):
        sino = self._sino()
        variances = []
        for dose in (1.0, 0.5, 0.1):
            draws = np.stack([simulate_low_dose(sino, dose, 20.0, seed=s).data for s in range(100)])
            variances.append(float(draws.var(axis=0).mean()))
        assert variances[0] < variances[1] < variances[2]

    def test_zero_stays_zero(self):
        g = Geometry.default(8, n_angles=4)
        out = simulate_low_dose(Sinogram(np.zeros((4, g.n_bins, 1)), g), 0.05, 10.0, seed=3)
        assert not out.data.any()

    def test_seed_reproducible(self):
        sino = self._sino()
        a = simulate_low_dose(sino, 0.1, 10.0, seed=42)
        b = simulate_low_dose(sino, 0.1, 10.0, seed=42)
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("dose", [0.0, -0.1, 1.5])
    def test_dose_out_of_range(self, dose):
        with pytest.raises(ConfigError):
            simulate_low_dose(self._sino(), dose_factor=dose)


# =============================================================================
# MLEM / OSEM
# =============================================================================

class TestMLEM:

    def _noisy(self, n_angles=24):
        g = Geometry.default(16, n_angles=n_angles)
        truth = _disk(16, 5.0, value=4.0) + _disk(16, 2.0, value=4.0)
        return g, truth, simulate_low_dose(forward_project(truth, g), 0.5, 50.0, seed=7)

    def test_log_likelihood_is_monotone(self):
        g, truth, _ = self._noisy()
        values = []
        mlem_osem(forward_project(truth, g), iterations=20, on_iteration=lambda i, x, ll: values.append(ll))
        assert len(values) == 20
        for before, after in zip(values, values[1:]):
            assert after >= before - 1e-6 * abs(before)

    def test_log_likelihood_is_monotone_on_noisy_data(self):
        _, _, sino = self._noisy()
        values = []
        mlem_osem(sino, iterations=10, on_iteration=lambda i, x, ll: values.append(ll))
        for before, after in zip(values, values[1:]):
            assert after >= before - 1e-6 * abs(before)

    def test_zero_data_gives_zero_image(self):
        g = Geometry.default(8, n_angles=6)
        out = mlem_osem(Sinogram(np.zeros((6, g.n_bins, 1)), g), iterations=2)
        assert float(out.max()) <= 1e-6

    def test_osem_matches_mlem_quality(self):
        g = Geometry.default(32, n_angles=60)
        truth = _disk(32, 10.0, value=2.0)
        sino = forward_project(truth, g)
        mlem = mlem_osem(sino, iterations=20)
        osem = mlem_osem(sino, iterations=5, subsets=4)
        assert abs(psnr(osem, truth) - psnr(mlem, truth)) <= 1.0

    def test_subsets_must_divide_angles(self):
        _, _, sino = self._noisy(n_angles=24)
        with pytest.raises(GeometryError):
            mlem_osem(sino, subsets=5)

    def test_non_positive_init_rejected(self):
        g, _, sino = self._noisy()
        with pytest.raises(ConfigError):
            mlem_osem(sino, init=np.zeros((16, 16, 1)))

    def test_reconstruct_dispatch(self):
        _, _, sino = self._noisy()
        assert reconstruct(sino, "fbp").shape == (16, 16, 1)
        assert reconstruct(sino, "osem", iterations=1, subsets=4).shape == (16, 16, 1)
        with pytest.raises(ConfigError):
            reconstruct(sino, "art")
