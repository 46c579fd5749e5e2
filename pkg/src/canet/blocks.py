"""Composite layers: conv block, SE, CBAM, feature fusion and the ICM mask block."""
from __future__ import annotations

from typing import Optional, Tuple

from . import ops
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module
from .tensor import Tensor

__all__ = ["ConvBlock", "SEBlock", "CBAMBlock", "FFBlock", "ICMBlock", "POOL_MODES"]

POOL_MODES = ("channel", "spatial")
_ACTIVATIONS = {"relu": ops.relu, "relu6": ops.relu6, "none": None}


def _hidden(channels: int, ratio: int, floor: int = 4) -> int:
    return max(floor, channels // ratio)


class ConvBlock(Module):
    """conv (no bias) -> per-dataset BN -> activation."""

    def __init__(self, rng, c_in, c_out, k=3, stride=1, activation="relu", dataset_ids=()):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.conv = Conv2d(rng, c_in, c_out, k, stride=stride, padding=k // 2, bias=False)
        self.bn = BatchNorm2d(c_out, dataset_ids)
        self.activation = activation

    def __call__(self, x: Tensor, dataset_id: str, mode: str) -> Tensor:
        y = self.bn(self.conv(x), dataset_id, mode)
        act = _ACTIVATIONS[self.activation]
        return act(y) if act is not None else y


class SEBlock(Module):
    """Squeeze-and-excitation: per-channel sigmoid gate from globally pooled features."""

    def __init__(self, rng, channels, ratio=16):
        hidden = _hidden(channels, ratio)
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)

    def gate(self, x: Tensor) -> Tensor:
        s = ops.global_avg_pool(x)
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(s))))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.mul(x, self.gate(x))


class CBAMBlock(Module):
    """Channel attention (shared MLP over avg- and max-pooled descriptors)
    followed by spatial attention (7x7 conv over channel max/mean maps)."""

    def __init__(self, rng, channels, ratio=16, spatial_kernel=7):
        hidden = _hidden(channels, ratio)
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)
        self.spatial = Conv2d(rng, 2, 1, spatial_kernel, padding=spatial_kernel // 2)

    def _mlp(self, s: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.fc1(s)))

    def channel_gate(self, x: Tensor) -> Tensor:
        return ops.sigmoid(ops.add(self._mlp(ops.global_avg_pool(x)), self._mlp(ops.global_max_pool(x))))

    def spatial_gate(self, x: Tensor) -> Tensor:
        pooled = ops.concat_channels([ops.channel_reduce_max(x), ops.channel_reduce_mean(x)])
        return ops.sigmoid(self.spatial(pooled))

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.mul(x, self.channel_gate(x))
        return ops.mul(x, self.spatial_gate(x))


class FFBlock(Module):
    """Feature fusion: concat -> CBAM -> 2x transposed conv -> conv block."""

    def __init__(self, rng, c_in, c_out, ratio=16, dataset_ids=()):
        self.c_in, self.c_out = c_in, c_out
        self.cbam = CBAMBlock(rng, c_in, ratio)
        self.up = ConvTranspose2d(rng, c_in, c_out, k=2, stride=2)
        self.conv = ConvBlock(rng, c_out, c_out, dataset_ids=dataset_ids)

    def __call__(self, prev: Optional[Tensor], f1: Tensor, f2: Tensor, dataset_id: str, mode: str) -> Tensor:
        if f1.shape != f2.shape:
            raise ValueError(f"FF branches differ in shape: {f1.shape} vs {f2.shape}")
        parts = [f1, f2] if prev is None else [prev, f1, f2]
        x = ops.concat_channels(parts)
        if x.shape[1] != self.c_in:
            raise ValueError(f"FF block expects {self.c_in} input channels, got {x.shape[1]}")
        return self.conv(self.up(self.cbam(x)), dataset_id, mode)


class ICMBlock(Module):
    """Builds a two-channel mask (s, 1 - s) from the prediction and applies it.

    ``pool_mode="channel"`` appends per-pixel channel max/mean maps to the
    entry features; ``"spatial"`` appends 3x3 stride-1 window max/avg maps.
    """

    def __init__(self, rng, width=16, pool_mode="channel", ratio=16):
        if pool_mode not in POOL_MODES:
            raise ValueError(f"unknown pool mode {pool_mode!r}")
        self.pool_mode = pool_mode
        self.entry = Conv2d(rng, 2, width, 3, padding=1)
        fused = width + 2 if pool_mode == "channel" else 3 * width
        self.se = SEBlock(rng, fused, ratio)
        self.mask_conv = Conv2d(rng, fused, 1, 3, padding=1)

    def fuse(self, x: Tensor) -> Tensor:
        if self.pool_mode == "channel":
            mp, ap = ops.channel_reduce_max(x), ops.channel_reduce_mean(x)
        else:
            mp, ap = ops.maxpool2d(x, 3, 1, 1), ops.avgpool2d(x, 3, 1, 1)
        return ops.concat_channels([x, mp, ap])

    def mask(self, p: Tensor) -> Tensor:
        if p.data.ndim != 4 or p.shape[1] != 2:
            raise ValueError(f"ICM expects a 2-channel prediction, got shape {p.shape}")
        x_m = self.mask_conv(self.se(self.fuse(self.entry(p))))
        s = ops.sigmoid(x_m)
        return ops.concat_channels([s, ops.sub(1.0, s)])

    def __call__(self, p: Tensor) -> Tuple[Tensor, Tensor]:
        m = self.mask(p)
        return m, ops.mul(m, p)
