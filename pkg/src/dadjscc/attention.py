"""SNR-conditioned channel-wise and spatial attention blocks.

Both blocks take a feature map ``[C,H,W]`` (or batch ``[B,C,H,W]``) and the
channel SNR in dB (scalar, or one value per batch element) and return a
residually gated map of the same shape.
"""

from __future__ import annotations

import numpy as np

from .layers import (Conv2d, Conv2dSpec, Layer, Linear, PReLU, channel_mean, conv2d,
                     global_avg_pool)
from .tensor import DEFAULT_DTYPE, Tensor, add, mul, prelu, relu, reshape, sigmoid


def _snr_column(snr_db, batch: int | None, dtype) -> Tensor:
    """SNR as a ``[B, 1]`` tensor (or ``[1]`` for unbatched input)."""
    if isinstance(snr_db, Tensor):
        snr_db = snr_db.data
    snr = np.asarray(snr_db, dtype=dtype).reshape(-1)
    if not np.all(np.isfinite(snr)):
        raise ValueError("snr_db must be finite")
    if batch is None:
        if snr.size != 1:
            raise ValueError("unbatched input takes a single SNR value")
        return Tensor(snr.reshape(1))
    if snr.size == 1:
        snr = np.repeat(snr, batch)
    if snr.size != batch:
        raise ValueError(f"got {snr.size} SNR values for a batch of {batch}")
    return Tensor(snr.reshape(batch, 1))


class ChannelAttention(Layer):
    """Per-channel gate from pooled features plus an SNR embedding.

    SNR path ``1 -> C -> C`` (ReLU, Sigmoid); main path ``C -> C/2 -> C``
    (PReLU, Sigmoid). Output is ``F + w * F`` with ``w`` broadcast over H, W.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        if channels % 2:
            raise ValueError(f"channel attention needs an even channel count, got {channels}")
        self.channels = channels
        self.snr_fc1 = Linear(1, channels, rng, dtype)
        self.snr_fc2 = Linear(channels, channels, rng, dtype)
        self.main_fc1 = Linear(channels, channels // 2, rng, dtype)
        self.main_fc2 = Linear(channels // 2, channels, rng, dtype)
        self.prelu = PReLU(dtype=dtype)

    def weights(self, f: Tensor, snr_db) -> Tensor:
        """The attention vector ``w`` (``[C]`` or ``[B, C]``)."""
        if f.ndim not in (3, 4):
            raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {f.shape}")
        if f.shape[-3] != self.channels:
            raise ValueError(f"block built for {self.channels} channels, got {f.shape[-3]}")
        batch = f.shape[0] if f.ndim == 4 else None
        snr = _snr_column(snr_db, batch, f.dtype)
        e = sigmoid(self.snr_fc2(relu(self.snr_fc1(snr))))
        z = global_avg_pool(f)
        h = prelu(self.main_fc1(add(e, z)), self.prelu.slope)
        return sigmoid(self.main_fc2(h))

    def __call__(self, f: Tensor, snr_db) -> Tensor:
        w = self.weights(f, snr_db)
        w = reshape(w, w.shape + (1, 1))
        return add(f, mul(f, w))


class SpatialAttention(Layer):
    """Per-pixel gate from the channel-mean map plus a learned SNR map.

    ``M = sigmoid(conv3x3(mean_c(F) + reshape(fc(snr))))``; output ``F + F * M``.
    """

    def __init__(self, height: int, width: int, rng: np.random.Generator, kernel: int = 3,
                 dtype=DEFAULT_DTYPE):
        self.height, self.width = height, width
        self.snr_upsample = Linear(1, height * width, rng, dtype)
        self.conv = Conv2d(Conv2dSpec(1, 1, 1, kernel=kernel, padding=kernel // 2), rng, dtype)

    def attention_map(self, f: Tensor, snr_db) -> Tensor:
        """``M_s`` with a singleton channel axis: ``[1,H,W]`` or ``[B,1,H,W]``."""
        if f.ndim not in (3, 4):
            raise ValueError(f"expected [C,H,W] or [B,C,H,W], got {f.shape}")
        if f.shape[-2:] != (self.height, self.width):
            raise ValueError(f"block built for {self.height}x{self.width}, got "
                             f"{f.shape[-2]}x{f.shape[-1]}")
        batch = f.shape[0] if f.ndim == 4 else None
        snr = _snr_column(snr_db, batch, f.dtype)
        favg = channel_mean(f, keepdims=True)
        fsnr = reshape(self.snr_upsample(snr), favg.shape)
        return sigmoid(conv2d(add(favg, fsnr), self.conv.spec, self.conv.weight, self.conv.bias))

    def __call__(self, f: Tensor, snr_db) -> Tensor:
        return add(f, mul(f, self.attention_map(f, snr_db)))


def channel_attention(f: Tensor, snr_db, p: ChannelAttention) -> Tensor:
    return p(f, snr_db)


def spatial_attention(f: Tensor, snr_db, p: SpatialAttention) -> Tensor:
    return p(f, snr_db)
