"""
Projection, frequency and image-domain losses plus GradNorm task weighting.
"""

from __future__ import annotations

import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor
from .wavelet import BANDS_PER_LEVEL, SubbandSet

logger = logging.getLogger("triplet.losses")

TASKS = ("projection", "frequency", "image")


def mse(prediction: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean squared error; shapes must match exactly."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.shape != target.shape:
        raise ShapeError("mse", "prediction and target shapes differ", prediction.shape, target.shape)
    return T.mean(T.square(prediction - target))


def loss_projection(s_den: Tensor, s_std: Union[Tensor, np.ndarray]) -> Tensor:
    """MSE between the denoised and the standard-dose sinogram."""
    return mse(s_den, s_std)


def frequency_weights(diff: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """
    Normalized focal weights |diff|^alpha / max for one band.

    `diff` holds a single band [B, ...]; the max runs over every axis but
    the first, so each band of each sample is scaled by its own peak. A
    sample whose band matches exactly gets all-zero weights.
    """
    w = np.abs(diff) ** alpha
    peak = w.reshape(w.shape[0], -1).max(axis=1).reshape((-1,) + (1,) * (w.ndim - 1))
    return np.divide(w, peak, out=np.zeros_like(w), where=peak > 0)


def loss_frequency(f_hat: SubbandSet, f_std: SubbandSet, alpha: float = 1.0) -> Tensor:
    """
    Focal wavelet loss: sum over bands of mean(w_bar * (f - f_hat)^2).

    The weights are computed from the current error and held constant, so
    no gradient flows through them.
    """
    if len(f_hat) != BANDS_PER_LEVEL or len(f_std) != BANDS_PER_LEVEL:
        raise ShapeError("loss_frequency", f"expected {BANDS_PER_LEVEL} bands, got {len(f_hat)} and {len(f_std)}")
    total: Optional[Tensor] = None
    for predicted, reference in zip(f_hat.bands, f_std.bands):
        predicted = predicted if isinstance(predicted, Tensor) else Tensor(predicted)
        reference = reference.data if isinstance(reference, Tensor) else np.asarray(reference)
        if predicted.shape != reference.shape:
            raise ShapeError("loss_frequency", "band shapes differ", predicted.shape, reference.shape)
        diff = Tensor(reference) - predicted
        weights = frequency_weights(diff.data, alpha)
        term = T.mean(T.square(diff) * Tensor(weights))
        total = term if total is None else total + term
    return total


# ============================================================================
# Adversarial terms
# ============================================================================

def discriminator_loss(p_real: Tensor, p_fake: Tensor) -> Tensor:
    """(A(real) - 1)^2 + A(fake)^2, averaged over the batch."""
    return T.mean(T.square(p_real - 1.0) + T.square(p_fake))


def generator_adversarial_loss(p_fake: Tensor) -> Tensor:
    """Least-squares complement: (A(fake) - 1)^2, averaged over the batch."""
    return T.mean(T.square(p_fake - 1.0))


def loss_image(i_hat: Tensor, i_std, i_low, advnet) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Image-domain losses.

    Returns:
        (l_i_mse, l_g_adv, l_d_adv); the candidate is detached inside
        l_d_adv so it only trains the discriminator.
    """
    i_std = i_std if isinstance(i_std, Tensor) else Tensor(i_std)
    i_low = i_low if isinstance(i_low, Tensor) else Tensor(i_low)
    if not (i_hat.shape == i_std.shape == i_low.shape):
        raise ShapeError("loss_image", "image shapes differ", i_hat.shape, i_std.shape, i_low.shape)
    l_i_mse = mse(i_hat, i_std)
    l_g_adv = generator_adversarial_loss(advnet(i_low, i_hat))
    l_d_adv = discriminator_loss(advnet(i_low, i_std), advnet(i_low, i_hat.detach()))
    return l_i_mse, l_g_adv, l_d_adv


# ============================================================================
# GradNorm
# ============================================================================

def gradnorm_update(
    weights: Sequence[float],
    losses: Sequence[float],
    grad_norms: Sequence[float],
    initial_losses: Sequence[float],
    alpha: float = 1.5,
    lr: float = 0.025,
    min_weight: float = 1e-3,
) -> np.ndarray:
    """
    One step on the GradNorm objective sum_i |G_i - mean(G) * r_i^alpha|.

    G_i = w_i * grad_norms[i]; r_i is the task's loss ratio L_i / L_i(0)
    divided by the mean ratio. The mean gradient target is held constant
    and the step is divided by it, so the update does not depend on the
    overall gradient scale. Weights are clamped to min_weight and
    renormalized to sum to the number of tasks.
    """
    w = np.asarray(weights, dtype=np.float64)
    L = np.asarray(losses, dtype=np.float64)
    g = np.asarray(grad_norms, dtype=np.float64)
    L0 = np.asarray(initial_losses, dtype=np.float64)
    if not (w.shape == L.shape == g.shape == L0.shape):
        raise ShapeError("gradnorm_update", "inputs must have one entry per task", w.shape, L.shape, g.shape, L0.shape)
    n = w.size

    ratio = np.divide(L, L0, out=np.ones_like(L), where=L0 != 0)
    mean_ratio = ratio.mean()
    r = ratio / mean_ratio if mean_ratio > 0 else np.ones_like(ratio)
    G = w * g
    G_bar = G.mean()
    if G_bar > 0 and np.isfinite(G_bar):
        step = np.sign(G - G_bar * r ** alpha) * g / G_bar
        w = w - lr * step
    w = np.maximum(w, min_weight)
    return w * (n / w.sum())


class GradNormBalancer:
    """Keeps task weights and initial losses for the active tasks of one stage."""

    def __init__(self, tasks: Sequence[str], alpha: float = 1.5, lr: float = 0.025) -> None:
        self.tasks: List[str] = list(tasks)
        self.alpha = alpha
        self.lr = lr
        self.weights = np.ones(len(self.tasks))
        self.initial_losses: Optional[np.ndarray] = None

    def weight(self, task: str) -> float:
        return float(self.weights[self.tasks.index(task)]) if task in self.tasks else 0.0

    def combine(self, losses: Mapping[str, Tensor]) -> Tensor:
        """Weighted sum of the task losses with the current weights."""
        total = None
        for i, task in enumerate(self.tasks):
            term = losses[task] * float(self.weights[i])
            total = term if total is None else total + term
        return total

    def update(self, losses: Mapping[str, float], grad_norms: Mapping[str, float]) -> np.ndarray:
        values = np.array([float(losses[t]) for t in self.tasks])
        if self.initial_losses is None:
            self.initial_losses = values.copy()
        if len(self.tasks) > 1:
            self.weights = gradnorm_update(
                self.weights, values, [float(grad_norms[t]) for t in self.tasks],
                self.initial_losses, self.alpha, self.lr,
            )
        return self.weights

    def as_dict(self) -> Dict[str, float]:
        return {task: self.weight(task) for task in TASKS}
