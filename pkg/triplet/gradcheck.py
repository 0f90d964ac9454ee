"""
Finite-difference gradient checking.

The check runs in float64: the tensor under test is rebuilt in double
precision and every tensor created while `f` runs inherits it, so the
central differences are not swamped by float32 rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import ComputationTape, Tensor, backward, float64_precision


@dataclass
class GradCheckReport:
    """Outcome of one grad_check call."""
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    kinks: np.ndarray
    tol: float
    checked: np.ndarray = field(default=None)

    @property
    def max_error(self) -> float:
        usable = self.rel_error[self.checked & ~self.kinks]
        return float(usable.max()) if usable.size else 0.0

    @property
    def failures(self) -> int:
        return int(np.count_nonzero((self.rel_error > self.tol) & self.checked & ~self.kinks))

    @property
    def n_kinks(self) -> int:
        return int(np.count_nonzero(self.kinks & self.checked))

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def summary(self) -> str:
        return (f"max rel. error {self.max_error:.2e} (tol {self.tol:.0e}), "
                f"{self.failures} failures, {self.n_kinks} kinks excluded")


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-3,
    tol: float = 1e-3,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare the tape gradient of scalar `f` at `x` with central differences.

    Args:
        f: tensor function returning a scalar Tensor
        x: point of evaluation (left untouched)
        step: finite-difference step
        tol: per-element relative error threshold
        max_elements: if set, only a seeded random subset of elements is checked

    Returns:
        GradCheckReport; elements whose one-sided slopes disagree are
        flagged as kinks and excluded from the failure count.
    """
    with float64_precision():
        base = np.asarray(x.data, dtype=np.float64)
        leaf = Tensor(base.copy(), requires_grad=True)
        with ComputationTape() as tape:
            out = f(leaf)
        backward(out, tape, leaves=[leaf])
        analytic = leaf.grad.astype(np.float64).reshape(base.shape)

        def evaluate(values: np.ndarray) -> float:
            return float(f(Tensor(values)).data.reshape(-1)[0])

        f0 = evaluate(base)
        numeric = np.zeros_like(base)
        forward_slope = np.zeros_like(base)
        backward_slope = np.zeros_like(base)
        checked = np.zeros(base.shape, dtype=bool)

        flat_indices = np.arange(base.size)
        if max_elements is not None and base.size > max_elements:
            flat_indices = np.sort(np.random.default_rng(seed).choice(base.size, max_elements, replace=False))

        for flat in flat_indices:
            idx = np.unravel_index(flat, base.shape)
            shifted = base.copy()
            shifted[idx] += step
            f_plus = evaluate(shifted)
            shifted[idx] -= 2 * step
            f_minus = evaluate(shifted)
            numeric[idx] = (f_plus - f_minus) / (2 * step)
            forward_slope[idx] = (f_plus - f0) / step
            backward_slope[idx] = (f0 - f_minus) / step
            checked[idx] = True

    floor = 1e-4 * max(1.0, float(np.abs(numeric).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel_error = np.abs(analytic - numeric) / denom
    slope_gap = np.abs(forward_slope - backward_slope)
    kinks = checked & (slope_gap > 0.25 * (np.abs(forward_slope) + np.abs(backward_slope))) & (slope_gap > floor)
    rel_error[~checked] = 0.0
    return GradCheckReport(analytic, numeric, rel_error, kinks, tol, checked)
