"""
Network building blocks on top of the tensor primitives.

ParamGroup holds one network's parameters, running-statistic buffers and
Adam moments; the functional layers (conv3, batch_norm, layer_norm, linear,
window_msa) take their parameters explicitly, and the thin layer classes at
the bottom bind them to names inside a ParamGroup.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError, TripletError
from .tensor import Tensor, _make

logger = logging.getLogger("triplet.layers")


# ============================================================================
# Parameters and optimizer state
# ============================================================================

@dataclass
class RunningStats:
    """Per-channel running mean/variance of one normalization layer."""
    mean: np.ndarray
    var: np.ndarray
    tracked: bool = False

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), False)


@dataclass
class AdamMoments:
    first: np.ndarray
    second: np.ndarray


class ParamGroup:
    """
    Named parameters of one network plus its optimizer state.

    Freezing a group turns off requires_grad on every parameter, so a frozen
    network neither records on the tape nor receives optimizer updates.
    """

    def __init__(self, name: str, seed: int = 0) -> None:
        self.name = name
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, RunningStats] = {}
        self.moments: Dict[str, AdamMoments] = {}
        self.adam_steps = 0
        self.frozen = False
        self._rng = np.random.default_rng(seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def add(self, name: str, shape: Sequence[int], init: str = "he", fan_in: Optional[int] = None) -> Tensor:
        """Create a parameter. init is one of he, zeros, ones."""
        if name in self.params:
            raise TripletError(f"{self.name}: duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "he":
            fan = fan_in if fan_in is not None else int(np.prod(shape[1:]))
            data = self._rng.standard_normal(shape) * np.sqrt(2.0 / max(fan, 1))
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        param = Tensor(data.astype(np.float32), requires_grad=not self.frozen, name=f"{self.name}.{name}")
        self.params[name] = param
        return param

    def add_running_stats(self, name: str, channels: int) -> RunningStats:
        stats = RunningStats.fresh(channels)
        self.buffers[name] = stats
        return stats

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reset_moments(self) -> None:
        self.moments.clear()
        self.adam_steps = 0

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def buffer_arrays(self) -> Dict[str, np.ndarray]:
        """Flattened view of the running statistics for checkpointing."""
        out = {}
        for name, stats in self.buffers.items():
            out[f"{name}.running_mean"] = stats.mean
            out[f"{name}.running_var"] = stats.var
            out[f"{name}.tracked"] = np.array([1.0 if stats.tracked else 0.0], np.float32)
        return out

    def load_buffer_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, stats in self.buffers.items():
            stats.mean = np.asarray(arrays[f"{name}.running_mean"], np.float32).copy()
            stats.var = np.asarray(arrays[f"{name}.running_var"], np.float32).copy()
            stats.tracked = bool(np.asarray(arrays[f"{name}.tracked"]).reshape(-1)[0] > 0.5)

    def digest(self) -> str:
        """SHA-256 over parameter and buffer bytes in name order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.params[name].data, np.float32).tobytes())
        for name, array in sorted(self.buffer_arrays().items()):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(array, np.float32).tobytes())
        return h.hexdigest()


class Adam:
    """Adam over ParamGroups; moments live on the groups themselves."""

    def __init__(self, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps

    def step(self, groups: Iterable[ParamGroup]) -> None:
        for group in groups:
            if group.frozen:
                continue
            group.adam_steps += 1
            t = group.adam_steps
            c1 = 1.0 - self.beta1 ** t
            c2 = 1.0 - self.beta2 ** t
            for name, param in group.params.items():
                if param.grad is None:
                    continue
                g = param.grad.astype(np.float32, copy=False)
                state = group.moments.get(name)
                if state is None:
                    state = AdamMoments(np.zeros_like(param.data), np.zeros_like(param.data))
                    group.moments[name] = state
                state.first *= self.beta1
                state.first += (1.0 - self.beta1) * g
                state.second *= self.beta2
                state.second += (1.0 - self.beta2) * g * g
                update = (state.first / c1) / (np.sqrt(state.second / c2) + self.eps)
                param.data -= (self.lr * update).astype(param.data.dtype)

    @staticmethod
    def reset(groups: Iterable[ParamGroup]) -> None:
        for group in groups:
            group.reset_moments()
            logger.info("Adam moments reset for %s", group.name)


# ============================================================================
# Convolution
# ============================================================================

def _offsets() -> List[Tuple[int, int, int]]:
    return [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def conv3(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """
    3x3x3 convolution with one voxel of zero padding.

    Stride 1 preserves the spatial shape; stride s gives (n - 1) // s + 1 per
    axis. Summation runs over the 27 kernel offsets in a fixed order.

    Args:
        x: input [B, C, D, H, W]
        kernel: [Co, C, 3, 3, 3]
        bias: [Co] or None

    Returns:
        Tensor [B, Co, D', H', W']
    """
    if x.ndim != 5:
        raise ShapeError("conv3", "input must be [B,C,D,H,W]", x.shape)
    if kernel.ndim != 5 or kernel.shape[2:] != (3, 3, 3) or kernel.shape[1] != x.shape[1]:
        raise ShapeError("conv3", "kernel must be [Co,C,3,3,3] with C matching the input", x.shape, kernel.shape)
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError("conv3", "bias must be [Co]", kernel.shape, bias.shape)
    if stride < 1:
        raise ShapeError("conv3", f"stride must be positive, got {stride}", x.shape)

    B, C, D, H, W = x.shape
    Co = kernel.shape[0]
    out_shape = tuple((n - 1) // stride + 1 for n in (D, H, W))
    dtype = np.result_type(x.data, kernel.data)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    k = kernel.data.astype(dtype, copy=False)

    def window(i, j, l):
        return (slice(None), slice(None),
                slice(i, i + stride * (out_shape[0] - 1) + 1, stride),
                slice(j, j + stride * (out_shape[1] - 1) + 1, stride),
                slice(l, l + stride * (out_shape[2] - 1) + 1, stride))

    acc = np.zeros((Co, B) + out_shape, dtype=dtype)
    for i, j, l in _offsets():
        acc += np.tensordot(k[:, :, i, j, l], xp[window(i, j, l)], axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data.reshape(1, Co, 1, 1, 1)

    def _backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4), dtype=dtype)
        gx = np.zeros_like(xp, dtype=dtype)
        gk = np.zeros_like(k, dtype=dtype)
        for i, j, l in _offsets():
            sl = window(i, j, l)
            gk[:, :, i, j, l] = np.tensordot(gt, xp[sl], axes=([1, 2, 3, 4], [0, 2, 3, 4]))
            gx[sl] += np.tensordot(k[:, :, i, j, l], gt, axes=([0], [0])).transpose(1, 0, 2, 3, 4)
        grads = [gx[:, :, 1:-1, 1:-1, 1:-1], gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, "conv3", _backward)


# ============================================================================
# Normalization
# ============================================================================

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    running: Optional[RunningStats] = None,
    momentum: float = 0.1,
    track: bool = True,
) -> Tensor:
    """
    Per-channel normalization over batch and spatial axes.

    Train mode uses batch statistics and, when `running` is given and
    `track` is set, folds them into the running mean and the unbiased
    running variance. Eval mode normalizes with the running statistics and
    refuses to run before any have been tracked.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batch_norm", "gamma/beta must be [C] for input [B,C,...]", x.shape, gamma.shape, beta.shape)
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    g_b = gamma.data.reshape(bshape)

    if mode == "eval":
        if running is None or not running.tracked:
            raise TripletError("batch_norm: eval mode requested before any train-mode statistics")
        inv_std = 1.0 / np.sqrt(running.var.reshape(bshape) + eps)
        xhat = (x.data - running.mean.reshape(bshape)) * inv_std
        out = g_b * xhat + beta.data.reshape(bshape)

        def _backward_eval(g):
            return (g * g_b * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return _make(out.astype(np.result_type(x.data, gamma.data, beta.data)), (x, gamma, beta), "batch_norm", _backward_eval)

    if mode != "train":
        raise ValueError(f"batch_norm mode must be train or eval, got {mode!r}")
    n = x.size // C
    if n <= 1:
        raise ShapeError("batch_norm", "train mode needs more than one value per channel", x.shape)

    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = g_b * xhat + beta.data.reshape(bshape)

    if running is not None and track:
        running.mean = ((1 - momentum) * running.mean + momentum * mu.reshape(C)).astype(np.float32)
        running.var = ((1 - momentum) * running.var + momentum * var.reshape(C) * n / (n - 1)).astype(np.float32)
        running.tracked = True

    def _backward(g):
        dxhat = g * g_b
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), "batch_norm", _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each position over the last (embedding) axis."""
    E = x.shape[-1]
    if gamma.shape != (E,) or beta.shape != (E,):
        raise ShapeError("layer_norm", "gamma/beta must match the last axis", x.shape, gamma.shape, beta.shape)
    centered = x - T.mean(x, axis=-1, keepdims=True)
    var = T.mean(T.square(centered), axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps) * gamma + beta


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[..., In] @ weight[In, Out] + bias[Out]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", "weight must be [In, Out] with In matching the last axis", x.shape, weight.shape)
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else T.reshape(x, (-1, x.shape[-1]))
    out = T.matmul(flat, weight)
    if bias is not None:
        out = out + bias
    return out if x.ndim == 2 else T.reshape(out, lead + (weight.shape[1],))


# ============================================================================
# Windowed self-attention
# ============================================================================

def position_encoding(shape: Tuple[int, int, int], dims_per_axis: int) -> Tensor:
    """
    Sinusoidal encoding per spatial axis, concatenated channel-wise.

    Each axis contributes dims_per_axis channels interleaved as
    sin(p*w_0), cos(p*w_0), sin(p*w_1), ... with w_k = 10000^(-2k/dims).

    Returns:
        constant Tensor [3 * dims_per_axis, D, H, W]
    """
    if dims_per_axis <= 0 or dims_per_axis % 2:
        raise ShapeError("position_encoding", f"dims_per_axis must be positive and even, got {dims_per_axis}", shape)
    D, H, W = shape
    freqs = 1.0 / 10000.0 ** (2.0 * np.arange(dims_per_axis // 2) / dims_per_axis)
    blocks = []
    for axis, extent in enumerate((D, H, W)):
        angles = np.arange(extent)[:, None] * freqs[None, :]
        enc = np.empty((extent, dims_per_axis))
        enc[:, 0::2] = np.sin(angles)
        enc[:, 1::2] = np.cos(angles)
        view = [1, 1, 1]
        view[axis] = extent
        full = np.broadcast_to(enc.T.reshape((dims_per_axis,) + tuple(view)), (dims_per_axis, D, H, W))
        blocks.append(full)
    return Tensor(np.concatenate(blocks, axis=0))


def encoding_dims(channels: int) -> int:
    """Channels per axis for a C-channel token: C/3 rounded down to even."""
    return (channels // 3) // 2 * 2


def window_msa(
    x: Tensor,
    heads: int,
    window: Tuple[int, int, int],
    proj: ParamGroup,
    prefix: str = "",
    position_encoding_on: bool = True,
) -> Tensor:
    """
    Multi-head self-attention inside non-overlapping 3D windows.

    Extents are zero-padded up to window multiples and padded tokens are
    masked out as keys; the output is cropped back to the input shape.
    proj holds {prefix}wq/bq/wk/bk/wv/bv/wo/bo with weights [C, C].
    """
    if x.ndim != 5:
        raise ShapeError("window_msa", "input must be [B,C,D,H,W]", x.shape)
    B, C, D, H, W = x.shape
    if heads <= 0 or C % heads:
        raise ShapeError("window_msa", f"heads={heads} must divide C={C}", x.shape)
    wd, wh, ww = window
    pads = [(-n) % w for n, w in zip((D, H, W), window)]
    Dp, Hp, Wp = D + pads[0], H + pads[1], W + pads[2]
    xp = T.pad(x, ((0, 0), (0, 0), (0, pads[0]), (0, pads[1]), (0, pads[2])))

    if position_encoding_on:
        dpa = encoding_dims(C)
        if dpa:
            pe = position_encoding((Dp, Hp, Wp), dpa).data
            pe = np.concatenate([pe, np.zeros((C - pe.shape[0], Dp, Hp, Wp), pe.dtype)], axis=0)
            xp = xp + Tensor(pe[None])

    nd, nh, nw = Dp // wd, Hp // wh, Wp // ww
    n_tokens = wd * wh * ww
    tokens = T.reshape(xp, (B, C, nd, wd, nh, wh, nw, ww))
    tokens = T.transpose(tokens, (0, 2, 4, 6, 3, 5, 7, 1))
    tokens = T.reshape(tokens, (B * nd * nh * nw, n_tokens, C))

    hd = C // heads

    def split_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (-1, n_tokens, heads, hd)), (0, 2, 1, 3))

    q = split_heads(linear(tokens, proj[prefix + "wq"], proj[prefix + "bq"]))
    k = split_heads(linear(tokens, proj[prefix + "wk"], proj[prefix + "bk"]))
    v = split_heads(linear(tokens, proj[prefix + "wv"], proj[prefix + "bv"]))

    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    if any(pads):
        valid = np.zeros((Dp, Hp, Wp), dtype=bool)
        valid[:D, :H, :W] = True
        valid = valid.reshape(nd, wd, nh, wh, nw, ww).transpose(0, 2, 4, 1, 3, 5).reshape(nd * nh * nw, n_tokens)
        mask = np.where(valid, 0.0, -1e9)
        mask = np.tile(mask, (B, 1)).reshape(-1, 1, 1, n_tokens)
        logits = logits + Tensor(mask)
    attn = T.softmax(logits, axis=-1)

    mixed = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (-1, n_tokens, C))
    mixed = linear(mixed, proj[prefix + "wo"], proj[prefix + "bo"])

    out = T.reshape(mixed, (B, nd, nh, nw, wd, wh, ww, C))
    out = T.transpose(out, (0, 7, 1, 4, 2, 5, 3, 6))
    out = T.reshape(out, (B, C, Dp, Hp, Wp))
    if any(pads):
        out = T.getitem(out, (slice(None), slice(None), slice(0, D), slice(0, H), slice(0, W)))
    return out


# ============================================================================
# Layer classes bound to a ParamGroup
# ============================================================================

@dataclass
class Conv3d:
    group: ParamGroup
    name: str
    in_channels: int
    out_channels: int
    stride: int = 1
    zero_init: bool = False

    def __post_init__(self) -> None:
        init = "zeros" if self.zero_init else "he"
        self.group.add(f"{self.name}.weight", (self.out_channels, self.in_channels, 3, 3, 3), init)
        self.group.add(f"{self.name}.bias", (self.out_channels,), "zeros")

    @property
    def weight(self) -> Tensor:
        return self.group[f"{self.name}.weight"]

    def __call__(self, x: Tensor) -> Tensor:
        return conv3(x, self.weight, self.group[f"{self.name}.bias"], self.stride)


@dataclass
class BatchNorm:
    group: ParamGroup
    name: str
    channels: int
    eps: float = 1e-5
    running: RunningStats = field(init=False)

    def __post_init__(self) -> None:
        self.group.add(f"{self.name}.gamma", (self.channels,), "ones")
        self.group.add(f"{self.name}.beta", (self.channels,), "zeros")
        self.running = self.group.add_running_stats(self.name, self.channels)

    def __call__(self, x: Tensor, mode: str = "train", track: bool = True) -> Tensor:
        stats = self.group.buffers[self.name]
        return batch_norm(x, self.group[f"{self.name}.gamma"], self.group[f"{self.name}.beta"],
                          self.eps, mode, stats, track=track)


@dataclass
class LayerNorm:
    group: ParamGroup
    name: str
    dim: int

    def __post_init__(self) -> None:
        self.group.add(f"{self.name}.gamma", (self.dim,), "ones")
        self.group.add(f"{self.name}.beta", (self.dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.group[f"{self.name}.gamma"], self.group[f"{self.name}.beta"])


@dataclass
class Linear:
    group: ParamGroup
    name: str
    in_features: int
    out_features: int

    def __post_init__(self) -> None:
        self.group.add(f"{self.name}.weight", (self.in_features, self.out_features), "he", fan_in=self.in_features)
        self.group.add(f"{self.name}.bias", (self.out_features,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.group[f"{self.name}.weight"], self.group[f"{self.name}.bias"])


def add_attention_params(group: ParamGroup, prefix: str, channels: int) -> None:
    """Register the Q/K/V/output projections window_msa expects."""
    for p in ("q", "k", "v", "o"):
        group.add(f"{prefix}w{p}", (channels, channels), "he", fan_in=channels)
        group.add(f"{prefix}b{p}", (channels,), "zeros")
