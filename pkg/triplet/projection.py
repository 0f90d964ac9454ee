"""
Parallel-beam projection physics applied slice-wise to 3D volumes.

Layouts:
    volume    [N, N, Z]   image rows (y), columns (x), slices
    sinogram  [A, bins, Z] angles over [0, pi), radial bins, slices

The forward projector samples every ray at a fixed step with bilinear
interpolation; its weights form one sparse matrix per Geometry, cached, so
back_project is its exact transpose.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Callable, List, Optional

import numpy as np
from scipy import sparse

from .errors import ConfigError, GeometryError
from .tensor import Tensor, _make

logger = logging.getLogger("triplet.projection")

SENSITIVITY_FLOOR = 1e-8


@dataclass(frozen=True)
class Geometry:
    """2D parallel-beam geometry shared by every slice."""

    n_angles: int
    n_bins: int
    image_size: int
    bin_spacing: float = 1.0
    ray_step: float = 0.25

    def __post_init__(self) -> None:
        if self.n_angles < 1:
            raise GeometryError(f"n_angles must be >= 1, got {self.n_angles}")
        if self.n_bins < 1 or self.image_size < 1:
            raise GeometryError("n_bins and image_size must be positive")
        if self.bin_spacing <= 0 or self.ray_step <= 0:
            raise GeometryError("bin_spacing and ray_step must be positive")
        diagonal = self.image_size * math.sqrt(2.0)
        if self.n_bins * self.bin_spacing < diagonal:
            raise GeometryError(
                f"detector covers {self.n_bins * self.bin_spacing:.2f} units, "
                f"less than the image diagonal {diagonal:.2f}"
            )

    @classmethod
    def default(cls, image_size: int, n_angles: int = 120) -> "Geometry":
        bins = math.ceil(math.sqrt(2.0) * image_size)
        bins += bins % 2
        return cls(n_angles=n_angles, n_bins=bins, image_size=image_size)

    @property
    def angles(self) -> np.ndarray:
        return np.pi * np.arange(self.n_angles) / self.n_angles

    @property
    def bin_positions(self) -> np.ndarray:
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2.0) * self.bin_spacing

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Geometry":
        return cls(**{k: data[k] for k in ("n_angles", "n_bins", "image_size", "bin_spacing", "ray_step") if k in data})


@dataclass
class Sinogram:
    """Projection data [n_angles, n_bins, n_slices] tagged with its geometry."""

    data: np.ndarray
    geometry: Geometry

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        g = self.geometry
        if self.data.ndim != 3 or self.data.shape[:2] != (g.n_angles, g.n_bins):
            raise GeometryError(
                f"sinogram shape {self.data.shape} does not match geometry "
                f"({g.n_angles} angles, {g.n_bins} bins)"
            )

    @property
    def n_slices(self) -> int:
        return self.data.shape[2]

    def __mul__(self, factor: float) -> "Sinogram":
        return Sinogram(self.data * factor, self.geometry)

    __rmul__ = __mul__


# ============================================================================
# System matrix
# ============================================================================

@lru_cache(maxsize=16)
def system_matrix(geom: Geometry) -> sparse.csr_matrix:
    """
    Sparse [n_angles * n_bins, N * N] matrix of bilinear ray-sampling weights.

    Ray (theta, s) is sampled at points s*(cos, sin) + t*(-sin, cos) with
    t stepping by ray_step across the image disk; pixel centres sit at
    integer offsets from (N - 1) / 2 and samples falling off the grid
    contribute nothing.
    """
    N = geom.image_size
    centre = (N - 1) / 2.0
    half = N * math.sqrt(2.0) / 2.0 + 1.0
    n_steps = int(math.ceil(2 * half / geom.ray_step))
    t = -half + (np.arange(n_steps) + 0.5) * geom.ray_step
    s = geom.bin_positions

    blocks = []
    for a, theta in enumerate(geom.angles):
        c, sn = math.cos(theta), math.sin(theta)
        x = s[:, None] * c - t[None, :] * sn + centre
        y = s[:, None] * sn + t[None, :] * c + centre
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = x - x0
        fy = y - y0
        rows_all, cols_all, vals_all = [], [], []
        bins = np.broadcast_to(np.arange(geom.n_bins)[:, None], x.shape)
        for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                          (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
            yi = y0 + dy
            xi = x0 + dx
            keep = (xi >= 0) & (xi < N) & (yi >= 0) & (yi < N) & (w > 0)
            rows_all.append(bins[keep])
            cols_all.append(yi[keep] * N + xi[keep])
            vals_all.append(w[keep] * geom.ray_step)
        block = sparse.coo_matrix(
            (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(geom.n_bins, N * N),
        ).tocsr()
        block.sum_duplicates()
        blocks.append(block)
    matrix = sparse.vstack(blocks, format="csr")
    logger.debug("System matrix for %s: %d non-zeros", geom, matrix.nnz)
    return matrix


@lru_cache(maxsize=16)
def _subset_operators(geom: Geometry, subsets: int):
    matrix = system_matrix(geom)
    ops = []
    for k in range(subsets):
        angles = np.arange(k, geom.n_angles, subsets)
        rows = (angles[:, None] * geom.n_bins + np.arange(geom.n_bins)[None, :]).reshape(-1)
        sub = matrix[rows]
        sens = np.asarray(sub.sum(axis=0)).reshape(-1)
        ops.append((rows, sub, np.maximum(sens, SENSITIVITY_FLOOR)))
    return ops


def _check_volume(volume: np.ndarray, geom: Geometry) -> np.ndarray:
    volume = np.asarray(volume)
    if volume.ndim == 2:
        volume = volume[:, :, None]
    if volume.ndim != 3 or volume.shape[:2] != (geom.image_size, geom.image_size):
        raise GeometryError(f"volume shape {volume.shape} does not match image size {geom.image_size}")
    return volume


def forward_project(volume: np.ndarray, geom: Geometry) -> Sinogram:
    """Line integrals of volume [N, N, Z] for every angle, bin and slice."""
    volume = _check_volume(volume, geom)
    if np.any(volume < 0):
        logger.warning("forward_project received negative activity (min %.3g)", float(volume.min()))
    N, _, Z = volume.shape
    data = system_matrix(geom) @ volume.reshape(N * N, Z).astype(np.float64)
    return Sinogram(data.reshape(geom.n_angles, geom.n_bins, Z), geom)


def back_project(sino: Sinogram, geom: Optional[Geometry] = None) -> np.ndarray:
    """Exact transpose of forward_project."""
    if geom is not None and geom != sino.geometry:
        raise GeometryError(f"back_project: sinogram geometry {sino.geometry} differs from {geom}")
    g = sino.geometry
    Z = sino.n_slices
    data = system_matrix(g).T @ sino.data.reshape(g.n_angles * g.n_bins, Z).astype(np.float64)
    return data.reshape(g.image_size, g.image_size, Z).astype(np.float32)


# ============================================================================
# Filtered backprojection
# ============================================================================

FILTERS = ("ramp", "hann")


@lru_cache(maxsize=32)
def _frequency_filter(n_bins: int, spacing: float, name: str) -> np.ndarray:
    if name not in FILTERS:
        raise ConfigError(f"unknown FBP filter {name!r}; expected one of {FILTERS}")
    size = max(64, int(2 ** math.ceil(math.log2(2 * n_bins))))
    n = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    kernel = np.zeros(size)
    kernel[0] = 0.25 / spacing ** 2
    odd = n % 2 == 1
    kernel[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    response = np.real(np.fft.fft(kernel)) * spacing
    if name == "hann":
        response *= 0.5 * (1.0 + np.cos(2.0 * np.pi * np.fft.fftfreq(size)))
    return response


def filter_rows(data: np.ndarray, spacing: float = 1.0, name: str = "hann", axis: int = 1) -> np.ndarray:
    """Convolve every projection row (along `axis`) with the ramp kernel."""
    n_bins = data.shape[axis]
    response = _frequency_filter(n_bins, spacing, name)
    size = response.shape[0]
    spectrum = np.fft.fft(data, n=size, axis=axis)
    shape = [1] * data.ndim
    shape[axis] = size
    filtered = np.real(np.fft.ifft(spectrum * response.reshape(shape), axis=axis))
    return np.take(filtered, np.arange(n_bins), axis=axis)


def fbp(sino: Sinogram, filter: str = "hann") -> np.ndarray:
    """
    Filtered backprojection of every slice.

    Rows are convolved with a spatially designed ramp kernel (optionally
    Hann-apodized), backprojected with back_project and scaled by
    pi / n_angles.
    """
    g = sino.geometry
    if g.n_angles < 2:
        raise GeometryError("fbp needs at least two angles")
    filtered = filter_rows(sino.data.astype(np.float64), g.bin_spacing, filter, axis=1)
    image = back_project(Sinogram(filtered, g))
    return (image * (np.pi * g.bin_spacing / g.n_angles)).astype(np.float32)


class FilteredBackprojection:
    """
    fbp as a differentiable layer on batched tensors.

    Maps [B, 1, A, bins, Z] to [B, 1, N, N, Z]. The operator is linear and
    its adjoint is the same row filter applied to the forward projection.
    """

    def __init__(self, geom: Geometry, filter: str = "hann") -> None:
        if geom.n_angles < 2:
            raise GeometryError("fbp needs at least two angles")
        self.geometry = geom
        self.filter = filter
        self.scale = np.pi * geom.bin_spacing / geom.n_angles

    def _apply(self, data: np.ndarray) -> np.ndarray:
        g = self.geometry
        B, C, A, nb, Z = data.shape
        rows = np.moveaxis(data, (0, 1), (3, 4)).reshape(A * nb, Z * B * C)
        filtered = filter_rows(rows.reshape(A, nb, -1), g.bin_spacing, self.filter, axis=1).reshape(A * nb, -1)
        image = system_matrix(g).T @ filtered
        image = image.reshape(g.image_size, g.image_size, Z, B, C)
        return np.moveaxis(image, (3, 4), (0, 1)) * self.scale

    def _adjoint(self, grad: np.ndarray) -> np.ndarray:
        g = self.geometry
        B, C, N, _, Z = grad.shape
        cols = np.moveaxis(grad, (0, 1), (3, 4)).reshape(N * N, Z * B * C)
        sino = (system_matrix(g) @ cols).reshape(g.n_angles, g.n_bins, -1)
        sino = filter_rows(sino, g.bin_spacing, self.filter, axis=1) * self.scale
        return np.moveaxis(sino.reshape(g.n_angles, g.n_bins, Z, B, C), (3, 4), (0, 1))

    def __call__(self, sino: Tensor) -> Tensor:
        g = self.geometry
        if sino.ndim != 5 or sino.shape[2:4] != (g.n_angles, g.n_bins):
            raise GeometryError(f"FilteredBackprojection: input {sino.shape} does not match geometry {g}")
        out = self._apply(sino.data.astype(np.float64))
        return _make(out, (sino,), "fbp", lambda grad: (self._adjoint(grad.astype(np.float64)),))


# ============================================================================
# Dose simulation and statistical reconstruction
# ============================================================================

def simulate_low_dose(sino_std: Sinogram, dose_factor: float = 0.1, scale_counts: float = 1.0,
                      seed: Optional[int] = None) -> Sinogram:
    """
    Poisson-resample a standard-dose sinogram at reduced dose.

    Each cell draws Poisson(dose_factor * scale_counts * S) and is divided
    back by dose_factor * scale_counts, so the result is unbiased with
    variance S / (dose_factor * scale_counts).
    """
    if dose_factor <= 0 or dose_factor > 1:
        raise ConfigError(f"dose_factor must lie in (0, 1], got {dose_factor}")
    if scale_counts <= 0:
        raise ConfigError(f"scale_counts must be positive, got {scale_counts}")
    data = sino_std.data.astype(np.float64)
    if np.any(data < 0):
        logger.warning("simulate_low_dose clipped negative expected counts (min %.3g)", float(data.min()))
        data = np.clip(data, 0.0, None)
    factor = dose_factor * scale_counts
    counts = np.random.default_rng(seed).poisson(data * factor)
    return Sinogram(counts / factor, sino_std.geometry)


def poisson_log_likelihood(sino: Sinogram, estimate: np.ndarray) -> float:
    """sum(y * log(Ax) - Ax), ignoring the constant log(y!) term."""
    g = sino.geometry
    volume = _check_volume(estimate, g)
    expected = system_matrix(g) @ volume.reshape(g.image_size ** 2, -1).astype(np.float64)
    y = sino.data.reshape(g.n_angles * g.n_bins, -1).astype(np.float64)
    positive = y > 0
    if np.any(positive & (expected <= 0)):
        return float("-inf")
    log_term = np.zeros_like(y)
    log_term[positive] = y[positive] * np.log(expected[positive])
    return float(log_term.sum() - expected.sum())


def mlem_osem(
    sino: Sinogram,
    geom: Optional[Geometry] = None,
    iterations: int = 10,
    subsets: int = 1,
    init: Optional[np.ndarray] = None,
    on_iteration: Optional[Callable[[int, np.ndarray, float], None]] = None,
) -> np.ndarray:
    """
    Ordered-subsets expectation maximization; subsets=1 is plain MLEM.

    Subset k holds the angles a with a % subsets == k. One iteration visits
    every subset once. on_iteration, if given, receives
    (iteration, estimate, log-likelihood) after each iteration.

    Raises:
        GeometryError: when subsets does not divide n_angles or the
            geometry differs from the sinogram's
    """
    g = sino.geometry if geom is None else geom
    if g != sino.geometry:
        raise GeometryError(f"mlem_osem: sinogram geometry {sino.geometry} differs from {g}")
    if subsets < 1 or g.n_angles % subsets:
        raise GeometryError(f"subsets={subsets} must divide n_angles={g.n_angles}")
    N, Z = g.image_size, sino.n_slices
    y = np.clip(sino.data.reshape(g.n_angles * g.n_bins, Z).astype(np.float64), 0.0, None)
    if init is None:
        x = np.ones((N * N, Z))
    else:
        x = np.array(_check_volume(init, g), dtype=np.float64).reshape(N * N, Z)
        if np.any(x <= 0):
            raise ConfigError("mlem_osem init must be strictly positive")

    operators: List = _subset_operators(g, subsets)
    for iteration in range(1, iterations + 1):
        for rows, sub, sens in operators:
            expected = sub @ x
            ratio = np.divide(y[rows], expected, out=np.zeros_like(expected), where=expected > 0)
            x *= (sub.T @ ratio) / sens[:, None]
        if on_iteration is not None:
            estimate = x.reshape(N, N, Z)
            on_iteration(iteration, estimate, poisson_log_likelihood(sino, estimate))
    return x.reshape(N, N, Z).astype(np.float32)


def reconstruct(sino: Sinogram, method: str = "fbp", filter: str = "hann",
                iterations: int = 4, subsets: int = 6) -> np.ndarray:
    """Classical reconstruction used to build image-domain pairs."""
    if method == "fbp":
        return fbp(sino, filter)
    if method == "osem":
        return mlem_osem(sino, iterations=iterations, subsets=subsets)
    raise ConfigError(f"unknown reconstructor {method!r}; expected fbp or osem")
