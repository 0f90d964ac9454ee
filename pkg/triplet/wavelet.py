"""
Orthonormal 3D Haar wavelet analysis and synthesis.

Band order is fixed: at one level the band index is 4*bD + 2*bH + bW with
b = 0 for the low-pass (L) and 1 for the high-pass (H) half along that axis,
so index 0 is LLL and 7 is HHH. Deeper levels decompose every band again
(full packet tree) and index children parent-major, which makes the order
lexicographic over the per-level L/H words.

Low-pass is (x0 + x1)/sqrt(2), high-pass (x0 - x1)/sqrt(2).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, _make, getitem

BANDS_PER_LEVEL = 8
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))

Band = Union[np.ndarray, Tensor]


def band_names(level: int = 1) -> List[str]:
    """Names in storage order, e.g. LLL, LLH, ... for one level."""
    names = [""]
    for _ in range(level):
        names = [prefix + (("-" if prefix else "") + "".join("LH"[(i >> s) & 1] for s in (2, 1, 0)))
                 for prefix in names for i in range(BANDS_PER_LEVEL)]
    return names


# ============================================================================
# numpy kernels on the three trailing axes
# ============================================================================

def _split(x: np.ndarray, axis: int):
    even = np.take(x, np.arange(0, x.shape[axis], 2), axis=axis)
    odd = np.take(x, np.arange(1, x.shape[axis], 2), axis=axis)
    return (even + odd) * _INV_SQRT2, (even - odd) * _INV_SQRT2


def _merge(low: np.ndarray, high: np.ndarray, axis: int) -> np.ndarray:
    shape = list(low.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=np.result_type(low, high))
    index = [slice(None)] * low.ndim
    index[axis] = slice(0, None, 2)
    out[tuple(index)] = (low + high) * _INV_SQRT2
    index[axis] = slice(1, None, 2)
    out[tuple(index)] = (low - high) * _INV_SQRT2
    return out


def _check_even(op: str, shape: Sequence[int], levels: int = 1) -> None:
    factor = 2 ** levels
    if any(n % factor for n in shape[-3:]):
        raise ShapeError(op, f"spatial extents must be divisible by {factor}", tuple(shape))


def analyze(x: np.ndarray) -> List[np.ndarray]:
    """One-level analysis of [..., D, H, W] into 8 bands [..., D/2, H/2, W/2]."""
    _check_even("dwt3", x.shape)
    bands = [x]
    for axis in (-3, -2, -1):
        bands = [half for b in bands for half in _split(b, axis)]
    return bands


def synthesize(bands: Sequence[np.ndarray]) -> np.ndarray:
    """Inverse of analyze."""
    bands = list(bands)
    for axis in (-1, -2, -3):
        bands = [_merge(bands[i], bands[i + 1], axis) for i in range(0, len(bands), 2)]
    return bands[0]


# ============================================================================
# SubbandSet
# ============================================================================

@dataclass
class SubbandSet:
    """8^level bands of identical shape in the documented order."""
    level: int
    bands: List[Band]

    def __post_init__(self) -> None:
        if self.level < 1:
            raise ShapeError("SubbandSet", f"level must be >= 1, got {self.level}")
        expected = BANDS_PER_LEVEL ** self.level
        if len(self.bands) != expected:
            raise ShapeError("SubbandSet", f"expected {expected} bands for level {self.level}, got {len(self.bands)}")
        shapes = {tuple(b.shape) for b in self.bands}
        if len(shapes) != 1:
            raise ShapeError("SubbandSet", "bands have inconsistent shapes", *sorted(shapes))

    def __len__(self) -> int:
        return len(self.bands)

    def __getitem__(self, index: int) -> Band:
        return self.bands[index]

    @property
    def band_shape(self):
        return tuple(self.bands[0].shape)

    def stacked(self) -> np.ndarray:
        """[8^L * C, d, h, w] with channel index band * C + c."""
        arrays = [b.data if isinstance(b, Tensor) else np.asarray(b) for b in self.bands]
        if arrays[0].ndim == 3:
            arrays = [a[None] for a in arrays]
        return np.concatenate(arrays, axis=0).astype(np.float32)

    @classmethod
    def from_stacked(cls, array: np.ndarray, level: int, channels: int) -> "SubbandSet":
        n = BANDS_PER_LEVEL ** level
        if array.ndim != 4 or array.shape[0] != n * channels:
            raise ShapeError("SubbandSet.from_stacked", f"expected {n * channels} channels", array.shape)
        return cls(level, [array[i * channels:(i + 1) * channels] for i in range(n)])


def dwt3(x: np.ndarray, levels: int) -> SubbandSet:
    """
    Full packet decomposition of x [C, D, H, W] to `levels` levels.

    Raises:
        ShapeError: when an extent is not divisible by 2**levels
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError("dwt3", "input must be [C,D,H,W]", x.shape)
    if levels < 1:
        raise ShapeError("dwt3", f"levels must be >= 1, got {levels}", x.shape)
    _check_even("dwt3", x.shape, levels)
    bands = [x.astype(np.float64)]
    for _ in range(levels):
        bands = [child for b in bands for child in analyze(b)]
    return SubbandSet(levels, [b.astype(np.float32) for b in bands])


def idwt3(subbands: SubbandSet) -> np.ndarray:
    """Exact inverse of dwt3."""
    bands = [np.asarray(b.data if isinstance(b, Tensor) else b, np.float64) for b in subbands.bands]
    for _ in range(subbands.level):
        bands = [synthesize(bands[i:i + BANDS_PER_LEVEL]) for i in range(0, len(bands), BANDS_PER_LEVEL)]
    return bands[0].astype(np.float32)


# ============================================================================
# Differentiable one-level layers on [B, C, D, H, W]
# ============================================================================

def _down(data: np.ndarray) -> np.ndarray:
    B, C = data.shape[:2]
    bands = analyze(data)
    return np.stack(bands, axis=1).reshape((B, BANDS_PER_LEVEL * C) + bands[0].shape[2:])


def _up(data: np.ndarray) -> np.ndarray:
    B, C8 = data.shape[:2]
    C = C8 // BANDS_PER_LEVEL
    grouped = data.reshape((B, BANDS_PER_LEVEL, C) + data.shape[2:])
    return synthesize([grouped[:, i] for i in range(BANDS_PER_LEVEL)])


def wavelet_down(x: Tensor) -> Tensor:
    """One-level analysis, bands concatenated on channels: [B,C,...] -> [B,8C,.../2]."""
    if x.ndim != 5:
        raise ShapeError("wavelet_down", "input must be [B,C,D,H,W]", x.shape)
    _check_even("wavelet_down", x.shape)
    return _make(_down(x.data), (x,), "wavelet_down", lambda g: (_up(g),))


def wavelet_up(x: Tensor) -> Tensor:
    """One-level synthesis: [B,8C,...] -> [B,C,...*2]."""
    if x.ndim != 5 or x.shape[1] % BANDS_PER_LEVEL:
        raise ShapeError("wavelet_up", "input must be [B,8C,D,H,W]", x.shape)
    return _make(_up(x.data), (x,), "wavelet_up", lambda g: (_down(g),))


def subbands(x: Tensor) -> SubbandSet:
    """One-level SubbandSet of Tensors [B, C, ...] cut from wavelet_down(x)."""
    stacked = wavelet_down(x)
    C = x.shape[1]
    return SubbandSet(1, [getitem(stacked, (slice(None), slice(i * C, (i + 1) * C)))
                          for i in range(BANDS_PER_LEVEL)])
