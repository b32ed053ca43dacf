"""Reversible feature extractor: 1x1 channel-lifting stem + additive
coupling blocks with an exact inverse.

Each block splits its input into two channel halves, applies
``y1 = x1 + f(x2); y2 = x2 + g(y1)`` and concatenates, so the inverse is
``x2 = y2 - g(y1); x1 = y1 - f(x2)``.  Invertibility holds exactly when the
normalization layers inside f/g run on frozen (running) statistics, i.e. in
eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class BackboneConfig:
    stem_out_channels: int = 64   # must be even (two-way channel split)
    num_blocks: int = 4
    hidden_channels: int | None = None  # residual width, default = half width

    def __post_init__(self):
        if self.stem_out_channels % 2 != 0 or self.stem_out_channels < 2:
            raise ValueError("stem_out_channels must be even and >= 2")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")


class ResidualFunction(nn.Module):
    """Channel-preserving conv3x3 -> BN -> LeakyReLU -> conv3x3 on one half."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, kernel_size=3, padding=1),
            nn.BatchNorm2d(hidden),
            nn.LeakyReLU(0.1),
            nn.Conv2d(hidden, channels, kernel_size=3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class ReversibleBlock(nn.Module):
    """One additive coupling block over a fixed positional channel split."""

    def __init__(self, f: nn.Module, g: nn.Module):
        super().__init__()
        self.f = f
        self.g = g

    @staticmethod
    def _split(x):
        if x.shape[1] % 2 != 0:
            raise ValueError(f"channel count must be even, got {x.shape[1]}")
        return torch.chunk(x, 2, dim=1)

    def forward(self, x):
        x1, x2 = self._split(x)
        y1 = x1 + self.f(x2)
        y2 = x2 + self.g(y1)
        return torch.cat([y1, y2], dim=1)

    def inverse(self, y):
        y1, y2 = self._split(y)
        x2 = y2 - self.g(y1)
        x1 = y1 - self.f(x2)
        return torch.cat([x1, x2], dim=1)


class ReversibleBackbone(nn.Module):
    """Channel-lifting stem followed by num_blocks reversible blocks."""

    def __init__(self, in_channels: int, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        width = config.stem_out_channels
        hidden = config.hidden_channels or width // 2
        self.stem = nn.Conv2d(in_channels, width, kernel_size=1)
        self.blocks = nn.ModuleList(
            ReversibleBlock(ResidualFunction(width // 2, hidden),
                            ResidualFunction(width // 2, hidden))
            for _ in range(config.num_blocks))

    def stem_lift(self, patches):
        """Pointwise linear channel mixing to the working width."""
        return self.stem(patches)

    def rfe_forward(self, f0):
        """Run all reversible blocks forward; shape preserved."""
        x = f0
        for block in self.blocks:
            x = block(x)
        return x

    def rfe_inverse(self, fb):
        """Undo all reversible blocks; exact inverse under frozen statistics."""
        x = fb
        for block in reversed(self.blocks):
            x = block.inverse(x)
        return x

    def forward(self, patches):
        return self.rfe_forward(self.stem_lift(patches))
