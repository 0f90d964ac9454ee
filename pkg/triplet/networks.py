"""
The three networks: DenNet (projection-domain residual denoiser), RecNet
(wavelet U-Net reconstructor) and AdvNet (pair-conditioned discriminator).

All tensors are [B, C, D, H, W]. A sinogram enters DenNet as a single
channel grid over (angle, bin, slice); images enter RecNet and AdvNet as
[B, 1, N, N, Z].
"""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import (
    BatchNorm,
    Conv3d,
    LayerNorm,
    Linear,
    ParamGroup,
    add_attention_params,
    window_msa,
)
from .tensor import Tensor
from .wavelet import BANDS_PER_LEVEL, SubbandSet, subbands, wavelet_down, wavelet_up

logger = logging.getLogger("triplet.networks")


class Network:
    """Shared train/eval bookkeeping around a ParamGroup."""

    def __init__(self, name: str, seed: int, dropout: float = 0.0) -> None:
        self.params = ParamGroup(name, seed)
        self.training = True
        self.dropout = dropout
        self._dropout_rng = np.random.default_rng(seed + 7919)
        self._warned_untracked = False

    @property
    def name(self) -> str:
        return self.params.name

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def _norm(self, bn: BatchNorm, x: Tensor) -> Tensor:
        if self.training:
            return bn(x, "train")
        if bn.group.buffers[bn.name].tracked:
            return bn(x, "eval")
        # Never trained in train mode: fall back to batch statistics.
        if not self._warned_untracked:
            logger.warning("%s: no running statistics yet, normalizing with batch statistics", self.name)
            self._warned_untracked = True
        return bn(x, "train", track=False)

    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.dropout, self._dropout_rng, self.training)


class ConvBlock:
    """Conv + BN + ReLU, the unit every CNN stage is made of."""

    def __init__(self, net: Network, name: str, cin: int, cout: int, stride: int = 1) -> None:
        self.net = net
        self.conv = Conv3d(net.params, f"{name}.conv", cin, cout, stride)
        self.bn = BatchNorm(net.params, f"{name}.bn", cout)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.net._norm(self.bn, self.conv(x)))


# ============================================================================
# DenNet
# ============================================================================

class TransformerBlock:
    """LN -> W-MSA -> add, then LN -> MLP(GELU) -> add, on channel tokens."""

    def __init__(self, net: Network, name: str, channels: int, heads: int,
                 window: Tuple[int, int, int], mlp_ratio: int = 2) -> None:
        if channels % heads:
            raise ConfigError(f"{name}: heads={heads} must divide channels={channels}")
        self.net = net
        self.prefix = f"{name}.attn."
        self.heads = heads
        self.window = tuple(window)
        self.ln1 = LayerNorm(net.params, f"{name}.ln1", channels)
        add_attention_params(net.params, self.prefix, channels)
        self.ln2 = LayerNorm(net.params, f"{name}.ln2", channels)
        self.fc1 = Linear(net.params, f"{name}.mlp.fc1", channels, mlp_ratio * channels)
        self.fc2 = Linear(net.params, f"{name}.mlp.fc2", mlp_ratio * channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        to_last = (0, 2, 3, 4, 1)
        to_first = (0, 4, 1, 2, 3)
        normed = T.transpose(self.ln1(T.transpose(x, to_last)), to_first)
        x = x + window_msa(normed, self.heads, self.window, self.net.params, self.prefix)
        tokens = T.transpose(x, to_last)
        mlp = self.fc2(T.gelu(self.fc1(self.ln2(tokens))))
        return x + T.transpose(mlp, to_first)


class DenNet(Network):
    """
    Residual sinogram denoiser.

    pattern is a string over {C, T}: C is a Conv+BN+ReLU block, T a
    Transformer block. The residual head is a zero-initialized conv, so an
    untrained network returns s_low unchanged.
    """

    def __init__(
        self,
        channels: int = 16,
        pattern: str = "CTCTCTC",
        heads: int = 4,
        window: Sequence[int] = (4, 4, 4),
        mlp_ratio: int = 2,
        circular_padding: bool = False,
        dropout: float = 0.0,
        seed: int = 0,
    ) -> None:
        super().__init__("dennet", seed, dropout)
        if not pattern or set(pattern) - {"C", "T"} or pattern[0] != "C":
            raise ConfigError(f"DenNet pattern must be a C/T string starting with C, got {pattern!r}")
        self.pattern = pattern
        self.channels = channels
        self.circular_padding = circular_padding
        self.angle_pad = int(window[0])
        self.blocks = []
        for i, kind in enumerate(pattern, start=1):
            if kind == "C":
                cin = 1 if i == 1 else channels
                self.blocks.append(ConvBlock(self, f"block{i}", cin, channels))
            else:
                self.blocks.append(TransformerBlock(self, f"block{i}", channels, heads, tuple(window), mlp_ratio))
        self.head = Conv3d(self.params, "head", channels, 1, zero_init=True)

    def _wrap_angles(self, x: Tensor) -> Tensor:
        # Rows past pi are the first rows with the radial axis mirrored.
        p = min(self.angle_pad, x.shape[2])
        A = x.shape[2]
        before = T.flip(x[:, :, A - p:A], axis=3)
        after = T.flip(x[:, :, 0:p], axis=3)
        return T.concat([before, x, after], axis=2)

    def __call__(self, s_low: Tensor) -> Tuple[Tensor, Tensor]:
        """
        Args:
            s_low: [B, 1, n_angles, n_bins, n_slices]

        Returns:
            (s_den, residual), both shaped like s_low
        """
        if s_low.ndim != 5 or s_low.shape[1] != 1:
            raise ShapeError("dennet", "input must be [B,1,A,bins,Z]", s_low.shape)
        h = self._wrap_angles(s_low) if self.circular_padding else s_low
        for block in self.blocks:
            h = self._drop(block(h))
        residual = self.head(h)
        if self.circular_padding:
            p = min(self.angle_pad, s_low.shape[2])
            residual = residual[:, :, p:p + s_low.shape[2]]
        return s_low - residual, residual

    @property
    def shared_layer(self) -> Tensor:
        return self.head.weight


# ============================================================================
# RecNet
# ============================================================================

class CNNStage:
    """Four 3x3x3 convolutions; the last may drop BN/ReLU."""

    def __init__(self, net: Network, name: str, cin: int, cout: int,
                 max_width: Optional[int] = None, final_linear: bool = False) -> None:
        inner = cout if max_width is None else min(cout, max_width)
        widths = [cin, inner, inner, inner, cout]
        self.net = net
        self.layers = []
        for i in range(4):
            if final_linear and i == 3:
                self.layers.append(Conv3d(net.params, f"{name}.conv{i + 1}", widths[i], widths[i + 1]))
            else:
                self.layers.append(ConvBlock(net, f"{name}.conv{i + 1}", widths[i], widths[i + 1]))

    @property
    def last_conv(self) -> Conv3d:
        last = self.layers[-1]
        return last if isinstance(last, Conv3d) else last.conv

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.net._drop(x)


class RecNet(Network):
    """
    Wavelet U-Net: L x (one-level WT, CNN stage) down, L x (CNN stage, IWT) up.

    Encoder level l holds 8^l * base channels, so the bottleneck carries
    8^L * base sub-band maps. Encoder outputs are added back after each
    decoder IWT. resampling="strided" swaps the WT for a stride-2 conv and
    the IWT for nearest upsampling followed by a conv, with identical
    channel counts.

    max_block_width caps the two inner convolutions of each stage; None
    keeps every convolution at the full sub-band channel count.
    """

    def __init__(
        self,
        base_channels: int = 8,
        levels: int = 2,
        resampling: str = "wavelet",
        max_block_width: Optional[int] = 64,
        dropout: float = 0.0,
        seed: int = 0,
    ) -> None:
        super().__init__("recnet", seed, dropout)
        if levels < 1:
            raise ConfigError(f"RecNet levels must be >= 1, got {levels}")
        if resampling not in ("wavelet", "strided"):
            raise ConfigError(f"RecNet resampling must be wavelet or strided, got {resampling!r}")
        self.base_channels = base_channels
        self.levels = levels
        self.resampling = resampling
        C = base_channels
        self.down_convs: List[Conv3d] = []
        self.up_convs: List[Conv3d] = []
        self.encoder: List[CNNStage] = []
        self.decoder: List[CNNStage] = []
        for l in range(1, levels + 1):
            pre = 1 if l == 1 else BANDS_PER_LEVEL ** (l - 1) * C
            after_down = BANDS_PER_LEVEL * pre
            if resampling == "strided":
                self.down_convs.append(Conv3d(self.params, f"down{l}", pre, after_down, stride=2))
            self.encoder.append(CNNStage(self, f"enc{l}", after_down, BANDS_PER_LEVEL ** l * C, max_block_width))
        for l in range(levels, 0, -1):
            width = BANDS_PER_LEVEL ** l * C
            last = l == 1
            out = BANDS_PER_LEVEL if last else width
            self.decoder.append(CNNStage(self, f"dec{l}", width, out, max_block_width, final_linear=last))
            if resampling == "strided":
                self.up_convs.append(Conv3d(self.params, f"up{l}", out, out // BANDS_PER_LEVEL))

    @property
    def bottleneck_channels(self) -> int:
        return BANDS_PER_LEVEL ** self.levels * self.base_channels

    @property
    def shared_layer(self) -> Tensor:
        """Kernel of the last encoder convolution."""
        return self.encoder[-1].last_conv.weight

    def _down(self, x: Tensor, index: int) -> Tensor:
        if self.resampling == "wavelet":
            return wavelet_down(x)
        return self.down_convs[index](x)

    def _up(self, x: Tensor, index: int) -> Tensor:
        if self.resampling == "wavelet":
            return wavelet_up(x)
        return self.up_convs[index](T.upsample_nearest(x, 2))

    def encode(self, image: Tensor) -> List[Tensor]:
        """Encoder outputs from level 1 to L; the last one is the bottleneck."""
        if image.ndim != 5 or image.shape[1] != 1:
            raise ShapeError("recnet", "input must be [B,1,D,H,W]", image.shape)
        factor = 2 ** self.levels
        if any(n % factor for n in image.shape[2:]):
            raise ShapeError("recnet", f"spatial extents must be divisible by {factor}", image.shape)
        features = []
        h = image
        for l, stage in enumerate(self.encoder):
            h = stage(self._down(h, l))
            features.append(h)
        return features

    def __call__(self, image: Tensor) -> Tuple[Tensor, SubbandSet]:
        """
        Returns:
            (i_hat [B,1,D,H,W], one-level 8-band SubbandSet of i_hat)
        """
        features = self.encode(image)
        h = features[-1]
        for i, stage in enumerate(self.decoder):
            h = self._up(stage(h), i)
            skip_level = self.levels - 2 - i
            if skip_level >= 0:
                h = h + features[skip_level]
        return h, subbands(h)


# ============================================================================
# AdvNet
# ============================================================================

class AdvNet(Network):
    """Four convolutions over the channel-concatenated (i_low, candidate) pair."""

    def __init__(
        self,
        widths: Sequence[int] = (16, 32, 64),
        strides: Sequence[int] = (2, 2, 2, 1),
        slope: float = 0.2,
        seed: int = 0,
    ) -> None:
        super().__init__("advnet", seed)
        if len(widths) != 3 or len(strides) != 4:
            raise ConfigError("AdvNet needs three hidden widths and four strides")
        self.slope = slope
        channels = [2] + list(widths) + [1]
        self.convs = [Conv3d(self.params, f"conv{i + 1}", channels[i], channels[i + 1], strides[i])
                      for i in range(4)]

    def __call__(self, i_low: Tensor, candidate: Tensor) -> Tensor:
        """Probability in (0, 1) per pair, shape [B]."""
        if i_low.shape != candidate.shape or i_low.ndim != 5 or i_low.shape[1] != 1:
            raise ShapeError("advnet", "pair images must both be [B,1,D,H,W]", i_low.shape, candidate.shape)
        h = T.concat([i_low, candidate], axis=1)
        for conv in self.convs[:-1]:
            h = T.leaky_relu(conv(h), self.slope)
        h = T.sigmoid(self.convs[-1](h))
        return T.mean(h, axis=(1, 2, 3, 4))
