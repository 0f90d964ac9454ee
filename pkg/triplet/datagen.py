"""
Synthetic phantoms and the paired-sample pipeline.

phantom -> preprocess -> patches -> (s_std, s_low, i_std, i_low) per patch,
written as dataset/<phantom_id>/<patch_id>/{s_std,s_low,i_std,i_low}.tnsr
with dataset/manifest.json describing folds, origins and seeds.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .config import RunConfig, config_hash
from .errors import DatasetError, ShapeError, TensorFormatError
from .projection import Geometry, Sinogram, forward_project, reconstruct, simulate_low_dose
from .storage import load_json, read_tnsr, save_json, write_tnsr

logger = logging.getLogger("triplet.datagen")

FIELDS = ("s_std", "s_low", "i_std", "i_low")
LESION_PROBABILITY = 0.3
BLUR_SIGMA = 1.0


@dataclass(frozen=True)
class Structure:
    """One placed ellipsoid; kind is background, organ or lesion."""
    kind: str
    center: Tuple[float, float, float]
    axes: Tuple[float, float, float]
    intensity: float


@dataclass
class Phantom:
    volume: np.ndarray
    seed: int
    structures: List[Structure] = field(default_factory=list)


@dataclass
class Patch:
    origin: Tuple[int, int, int]
    data: np.ndarray


@dataclass
class SamplePair:
    s_std: Sinogram
    s_low: Sinogram
    i_std: np.ndarray
    i_low: np.ndarray
    origin: Tuple[int, int, int] = (0, 0, 0)
    fold: int = 0
    phantom_id: str = ""
    patch_id: str = ""

    @property
    def sample_id(self) -> str:
        return f"{self.phantom_id}/{self.patch_id}"


# ============================================================================
# Phantoms
# ============================================================================

def _ellipsoid_mask(shape, center, axes) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, axes))
    return r <= 1.0


def generate_phantom(
    size: Sequence[int] = (64, 64, 16),
    n_structures: int = 6,
    intensity_range: Tuple[float, float] = (0.2, 1.0),
    seed: int = 0,
) -> Phantom:
    """
    Background ellipsoid with random interior organs and small lesions.

    The background sits at the low end of the intensity range, organs draw
    uniformly from the range and lesions (one per organ with probability
    0.3) sit at the high end. The volume is smoothed with a Gaussian of
    sigma 1 voxel.
    """
    N1, N2, Z = (int(s) for s in size)
    if min(N1, N2, Z) < 8:
        raise ShapeError("generate_phantom", "extents must be at least 8", tuple(size))
    lo, hi = intensity_range
    rng = np.random.default_rng(seed)
    shape = (N1, N2, Z)
    volume = np.zeros(shape)
    mid = tuple((n - 1) / 2.0 for n in shape)

    body_axes = (0.42 * N1, 0.36 * N2, 0.48 * Z)
    structures = [Structure("background", mid, body_axes, float(lo))]
    volume[_ellipsoid_mask(shape, mid, body_axes)] = lo

    for _ in range(n_structures):
        # Centre drawn inside the inner 60% of the body.
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction) or 1.0
        radius = 0.6 * rng.random() ** (1 / 3)
        center = tuple(m + radius * d * a for m, d, a in zip(mid, direction, body_axes))
        axes = (rng.uniform(0.08, 0.2) * N1, rng.uniform(0.08, 0.2) * N2, rng.uniform(0.15, 0.35) * Z)
        intensity = float(rng.uniform(lo, hi))
        volume[_ellipsoid_mask(shape, center, axes)] = intensity
        structures.append(Structure("organ", center, axes, intensity))
        if rng.random() < LESION_PROBABILITY:
            r = rng.uniform(2.0, 4.0)
            offset = rng.uniform(-0.5, 0.5, size=3) * np.array(axes)
            lesion_center = tuple(c + o for c, o in zip(center, offset))
            volume[_ellipsoid_mask(shape, lesion_center, (r, r, r))] = hi
            structures.append(Structure("lesion", lesion_center, (r, r, r), float(hi)))

    volume = ndimage.gaussian_filter(volume, BLUR_SIGMA)
    return Phantom(np.clip(volume, 0.0, None).astype(np.float32), seed, structures)


# ============================================================================
# Preprocessing and patches
# ============================================================================

def preprocess(volume: np.ndarray, method: str = "minmax") -> np.ndarray:
    """
    Clamp to the [5th, 95th] percentile, then rescale.

    The low percentile uses the lower rank and the high one the higher
    rank, so both bounds are data values and the operation is idempotent.
    A volume with equal bounds maps to zeros.

    Args:
        method: "minmax" to [0, 1] or "zscore"
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.size == 0:
        raise ShapeError("preprocess", "volume is empty", v.shape)
    p5 = np.percentile(v, 5, method="lower")
    p95 = np.percentile(v, 95, method="higher")
    if p95 <= p5:
        return np.zeros(v.shape, np.float32)
    clipped = np.clip(v, p5, p95)
    if method == "minmax":
        return ((clipped - p5) / (p95 - p5)).astype(np.float32)
    if method == "zscore":
        std = clipped.std()
        return ((clipped - clipped.mean()) / std).astype(np.float32) if std > 0 else np.zeros(v.shape, np.float32)
    raise ValueError(f"unknown normalization {method!r}")


def _grid_starts(extent: int, size: int) -> List[int]:
    count = -(-extent // size)
    return sorted({int(round(s)) for s in np.linspace(0, extent - size, count)})


def extract_patches(
    volume: np.ndarray,
    patch: Sequence[int],
    n_patches: int,
    seed: int = 0,
    threshold: float = 0.1,
) -> List[Patch]:
    """
    Pick n_patches patches covering the active region first.

    Grid tiles that contain voxels above `threshold` come first, most
    active first; remaining slots go to overlapping patches centred on
    active voxels drawn with probability proportional to their activity.
    Every origin keeps the patch inside the volume.
    """
    patch = tuple(int(p) for p in patch)
    if len(patch) != volume.ndim or any(p > n for p, n in zip(patch, volume.shape)):
        raise ShapeError("extract_patches", "patch exceeds volume extent", volume.shape, patch)
    rng = np.random.default_rng(seed)
    active = volume > threshold

    tiles = []
    for origin in np.ndindex(*(len(_grid_starts(n, p)) for n, p in zip(volume.shape, patch))):
        start = tuple(_grid_starts(n, p)[i] for n, p, i in zip(volume.shape, patch, origin))
        region = tuple(slice(s, s + p) for s, p in zip(start, patch))
        count = int(active[region].sum())
        if count:
            tiles.append((count, start))
    tiles.sort(key=lambda t: (-t[0], t[1]))
    origins = [start for _, start in tiles[:n_patches]]

    candidates = np.argwhere(active)
    weights = volume[active].astype(np.float64)
    while len(origins) < n_patches:
        if len(candidates):
            centre = candidates[rng.choice(len(candidates), p=weights / weights.sum())]
        else:
            centre = np.array([rng.integers(0, n) for n in volume.shape])
        origin = tuple(int(np.clip(c - p // 2, 0, n - p)) for c, p, n in zip(centre, patch, volume.shape))
        origins.append(origin)

    return [Patch(o, np.ascontiguousarray(volume[tuple(slice(s, s + p) for s, p in zip(o, patch))]))
            for o in origins]


def counts_per_cell(sino: Sinogram, total_counts: float) -> float:
    """Per-cell scale giving `total_counts` expected counts over the whole sinogram at standard dose."""
    total = float(sino.data.sum())
    return total_counts / total if total > 0 else 1.0


def make_pair(
    patch: np.ndarray,
    geom: Geometry,
    dose_factor: float = 0.1,
    reconstructor: str = "fbp",
    seed: int = 0,
    count_scale: float = 1e5,
    filter: str = "hann",
    osem_iterations: int = 4,
    osem_subsets: int = 6,
) -> SamplePair:
    """Project, dose-reduce and reconstruct one image patch [N, N, Z]."""
    s_std = forward_project(patch, geom)
    scale = counts_per_cell(s_std, count_scale)
    s_low = simulate_low_dose(s_std, dose_factor, scale, seed)
    kwargs = dict(method=reconstructor, filter=filter, iterations=osem_iterations, subsets=osem_subsets)
    return SamplePair(s_std, s_low, reconstruct(s_std, **kwargs), reconstruct(s_low, **kwargs))


def split_folds(phantom_ids: Sequence[str], k: int = 5, seed: int = 0) -> Dict[str, int]:
    """Assign phantoms (never patches) to k folds, round-robin after a seeded shuffle."""
    ids = list(dict.fromkeys(phantom_ids))
    if k < 1:
        raise DatasetError(f"fold count must be positive, got {k}")
    if len(ids) < k:
        raise DatasetError(f"{len(ids)} phantoms cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[j]: position % k for position, j in enumerate(order)}


# ============================================================================
# Dataset on disk
# ============================================================================

def derive_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([master, *keys]).generate_state(1)[0])


def _phantom_id(index: int) -> str:
    return f"p{index:03d}"


def _build_phantom(config: RunConfig, index: int, root: Path, geom: Geometry) -> Dict:
    data = config.data
    seed = derive_seed(config.seed, index)
    phantom = generate_phantom(data.volume_size, data.n_structures, data.intensity_range, seed)
    volume = preprocess(phantom.volume, data.normalization)
    patches = extract_patches(volume, data.patch_size, data.patches_per_phantom,
                              derive_seed(seed, 1), data.activity_threshold)
    pid = _phantom_id(index)
    entries = []
    for j, patch in enumerate(patches):
        patch_seed = derive_seed(seed, 2, j)
        pair = make_pair(patch.data, geom, data.dose_factor, data.reconstructor, patch_seed,
                         data.count_scale, config.geometry.filter, data.osem_iterations, data.osem_subsets)
        folder = root / pid / f"{j:03d}"
        write_tnsr(folder / "s_std.tnsr", pair.s_std.data)
        write_tnsr(folder / "s_low.tnsr", pair.s_low.data)
        write_tnsr(folder / "i_std.tnsr", pair.i_std)
        write_tnsr(folder / "i_low.tnsr", pair.i_low)
        entries.append({"id": f"{j:03d}", "origin": list(patch.origin), "seed": patch_seed})
    return {"seed": seed, "structures": len(phantom.structures), "patches": entries}


def build_dataset(config: RunConfig, out_dir: Path) -> Dict:
    """
    Generate every phantom in a thread pool and write the dataset layout.

    Returns:
        the manifest written to <out_dir>/manifest.json
    """
    started = time.time()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    geom = config.patch_geometry()
    ids = [_phantom_id(i) for i in range(config.data.n_phantoms)]
    folds = split_folds(ids, max(config.data.folds, 1), config.seed)

    workers = min(config.data.workers, len(ids))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda i: _build_phantom(config, i, root, geom), range(len(ids))))
    else:
        results = [_build_phantom(config, i, root, geom) for i in range(len(ids))]

    phantoms = {}
    for pid, result in zip(ids, results):
        result["fold"] = folds[pid]
        phantoms[pid] = result
    manifest = {
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "geometry": geom.to_dict(),
        "folds": folds,
        "phantoms": phantoms,
    }
    save_json(root / "manifest.json", manifest)
    n_samples = sum(len(p["patches"]) for p in phantoms.values())
    logger.info("Dataset built in %.2fs (%d phantoms, %d samples) at %s",
                time.time() - started, len(ids), n_samples, root)
    return manifest


@dataclass
class Dataset:
    """All samples of one dataset directory, loaded into memory."""
    root: Path
    manifest: Dict
    geometry: Geometry
    samples: List[SamplePair]

    @property
    def folds(self) -> List[int]:
        return sorted(set(self.manifest["folds"].values()))

    @property
    def phantom_ids(self) -> List[str]:
        return sorted(self.manifest["phantoms"])

    def select(self, phantom_ids: Iterable[str]) -> List[SamplePair]:
        wanted = set(phantom_ids)
        return [s for s in self.samples if s.phantom_id in wanted]

    def in_folds(self, folds: Iterable[int]) -> List[SamplePair]:
        wanted = set(folds)
        return [s for s in self.samples if s.fold in wanted]


def load_dataset(directory: Path) -> Dataset:
    """
    Read a dataset written by build_dataset.

    Raises:
        DatasetError: when the manifest or any sample file is missing
    """
    root = Path(directory)
    try:
        manifest = load_json(root / "manifest.json")
    except TensorFormatError as e:
        raise DatasetError(f"{root}: no readable dataset manifest ({e})") from None
    try:
        geom = Geometry.from_dict(manifest["geometry"])
        phantoms = manifest["phantoms"]
    except (KeyError, TypeError) as e:
        raise DatasetError(f"{root}: incomplete manifest ({e})") from None

    samples = []
    for pid in sorted(phantoms):
        entry = phantoms[pid]
        for patch in entry["patches"]:
            folder = root / pid / patch["id"]
            try:
                arrays = {name: read_tnsr(folder / f"{name}.tnsr") for name in FIELDS}
            except TensorFormatError as e:
                raise DatasetError(f"missing or corrupt sample {pid}/{patch['id']}: {e}") from None
            samples.append(SamplePair(
                Sinogram(arrays["s_std"], geom), Sinogram(arrays["s_low"], geom),
                arrays["i_std"], arrays["i_low"],
                tuple(patch["origin"]), int(entry["fold"]), pid, patch["id"],
            ))
    logger.info("Loaded %d samples from %s", len(samples), root)
    return Dataset(root, manifest, geom, samples)
