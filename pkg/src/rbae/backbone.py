"""Five-level convolutional encoder and the matching decoder.

Level ``l`` (1..5) halves the resolution, so a ``H x W`` input yields feature
maps of size ``H / 2**l``.  The decoder starts from level 5 and receives skip
connections from levels 3 and 4 only; levels 1-2 never reach it.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

NUM_LEVELS = 5
SKIP_LEVELS = (3, 4)


def _conv(in_ch: int, out_ch: int, stride: int = 1, norm: bool = False) -> list[nn.Module]:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)]
    if norm:
        layers.append(nn.BatchNorm2d(out_ch))
    layers.append(nn.ReLU(inplace=True))
    return layers


class Encoder(nn.Module):
    def __init__(self, widths: Sequence[int] = (64, 128, 256, 512, 512), in_channels: int = 3, norm: bool = False):
        super().__init__()
        if len(widths) != NUM_LEVELS:
            raise ValueError(f"encoder needs {NUM_LEVELS} widths, got {len(widths)}")
        self.widths = tuple(widths)
        blocks = []
        prev = in_channels
        for width in widths:
            blocks.append(nn.Sequential(*_conv(prev, width, 2, norm), *_conv(width, width, 1, norm)))
            prev = width
        self.levels = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Return the feature pyramid ``[phi_1, ..., phi_5]``."""
        feats = []
        for block in self.levels:
            x = block(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Bilinear upsampling + convolution stages back to a 3-channel image in [0, 1]."""

    def __init__(self, widths: Sequence[int] = (64, 128, 256, 512, 512), out_channels: int = 3, norm: bool = False):
        super().__init__()
        c1, c2, c3, c4, c5 = widths
        self.widths = tuple(widths)
        self.skip_levels = SKIP_LEVELS
        self.stage4 = nn.Sequential(*_conv(c5 + c4, c4, norm=norm), *_conv(c4, c4, norm=norm))
        self.stage3 = nn.Sequential(*_conv(c4 + c3, c3, norm=norm), *_conv(c3, c3, norm=norm))
        self.stage2 = nn.Sequential(*_conv(c3, c2, norm=norm), *_conv(c2, c2, norm=norm))
        self.stage1 = nn.Sequential(*_conv(c2, c1, norm=norm), *_conv(c1, c1, norm=norm))
        self.stage0 = nn.Sequential(*_conv(c1, c1, norm=norm), nn.Conv2d(c1, out_channels, 3, padding=1))

    @staticmethod
    def _up(x: torch.Tensor) -> torch.Tensor:
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, bottleneck: torch.Tensor, skips: Mapping[int, torch.Tensor]) -> torch.Tensor:
        if set(skips) != set(self.skip_levels):
            raise ValueError(f"decoder takes skips from levels {self.skip_levels} only, got {sorted(skips)}")
        s3, s4 = skips[3], skips[4]
        n, _, h5, w5 = bottleneck.shape
        if s4.shape[-2:] != (2 * h5, 2 * w5) or s3.shape[-2:] != (4 * h5, 4 * w5):
            raise ValueError(
                f"skip shapes {tuple(s3.shape)}, {tuple(s4.shape)} do not match bottleneck {tuple(bottleneck.shape)}"
            )
        x = self.stage4(torch.cat([self._up(bottleneck), s4], dim=1))
        x = self.stage3(torch.cat([self._up(x), s3], dim=1))
        x = self.stage2(self._up(x))
        x = self.stage1(self._up(x))
        x = self.stage0(self._up(x))
        return torch.sigmoid(x)


def split_for_decoder(pyramid: Sequence[torch.Tensor]) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Bottleneck (level 5) and skip dict (levels 3, 4) from a 5-level pyramid."""
    return pyramid[4], {3: pyramid[2], 4: pyramid[3]}
