"""Multi-scale feature discrimination.

The input image and its reconstruction are both pushed through the frozen
encoder; levels 1-3 of the two pyramids are concatenated channel-wise and fed
to one small discriminator per level, each emitting a ``[0, 1]`` anomaly map.
The three maps are upsampled and blended into the final map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from torch import nn

MSFDM_LEVELS = (1, 2, 3)
DEFAULT_FUSION = (0.2, 0.2, 0.6)


@dataclass
class AnomalyMapSet:
    AM_1: torch.Tensor
    AM_2: torch.Tensor
    AM_3: torch.Tensor
    AM_final: torch.Tensor | None = None

    @property
    def levels(self) -> list[torch.Tensor]:
        return [self.AM_1, self.AM_2, self.AM_3]


class FDM(nn.Module):
    """``2C -> C -> C/2 -> 1`` stack of 3x3 convolutions with a sigmoid head.

    The hidden convolutions are batch-normalised. The encoder features that feed
    the discriminator have very different scales per level, and without
    normalisation the focal loss stalls for many steps at 64 px.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.in_channels = 2 * channels
        half = max(channels // 2, 1)
        self.net = nn.Sequential(
            nn.Conv2d(2 * channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, half, 3, padding=1),
            nn.BatchNorm2d(half),
            nn.ReLU(inplace=True),
            nn.Conv2d(half, 1, 3, padding=1),
        )

    def reset_head(self, prior: float = 0.01) -> None:
        """Start the output near ``prior`` so early focal-loss steps are not swamped by easy negatives."""
        head = self.net[-1]
        nn.init.normal_(head.weight, std=0.01)
        nn.init.constant_(head.bias, -math.log((1.0 - prior) / prior))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x))


class MSFDM(nn.Module):
    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.fdms = nn.ModuleList(FDM(widths[level - 1]) for level in MSFDM_LEVELS)

    def forward(self, concat_feats: Sequence[torch.Tensor]) -> AnomalyMapSet:
        return AnomalyMapSet(*(discriminate(c, fdm) for c, fdm in zip(concat_feats, self.fdms)))


def build_concat_features(encoder: nn.Module, input_image: torch.Tensor, recon_image: torch.Tensor) -> list[torch.Tensor]:
    """Concatenate levels 1-3 of ``encoder(input)`` and ``encoder(recon)``.

    Both images go through the encoder in one batch.
    """
    if input_image.shape != recon_image.shape:
        raise ValueError(f"shape mismatch: {tuple(input_image.shape)} vs {tuple(recon_image.shape)}")
    n = input_image.shape[0]
    pyr = encoder(torch.cat([input_image, recon_image], dim=0))
    return [torch.cat([pyr[level - 1][:n], pyr[level - 1][n:]], dim=1) for level in MSFDM_LEVELS]


def discriminate(concat: torch.Tensor, subnet: FDM) -> torch.Tensor:
    if concat.shape[1] != subnet.in_channels:
        raise ValueError(f"FDM expects {subnet.in_channels} channels, got {concat.shape[1]}")
    return subnet(concat)


def focal_loss(pred: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25, clamp: float = 1e-6):
    """Binary focal loss on probabilities, averaged over pixels."""
    p = pred.clamp(clamp, 1.0 - clamp)
    p_t = torch.where(target > 0.5, p, 1.0 - p)
    alpha_t = torch.where(target > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def resize_mask_nearest(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if mask.shape[-2:] == tuple(size):
        return mask
    return F.interpolate(mask, size=size, mode="nearest")


def segmentation_loss(maps: AnomalyMapSet, mask: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25, clamp: float = 1e-6):
    """Mean of per-level focal losses; the mask is resized (nearest) to each map."""
    if mask.dim() == 3:
        mask = mask.unsqueeze(1)
    losses = []
    for am in maps.levels:
        target = resize_mask_nearest(mask.to(am.dtype), tuple(am.shape[-2:]))
        losses.append(focal_loss(am, target, gamma, alpha, clamp))
    return sum(losses) / len(losses)


def fuse_anomaly_maps(
    maps: AnomalyMapSet, weights: Sequence[float] = DEFAULT_FUSION, size: tuple[int, int] | None = None
) -> torch.Tensor:
    """Weighted sum of the three maps after bilinear upsampling to ``size``.

    ``size`` defaults to twice the level-1 map (the input resolution).
    """
    if any(w < 0 for w in weights):
        raise ValueError(f"fusion weights must be non-negative, got {weights}")
    if size is None:
        h, w = maps.AM_1.shape[-2:]
        size = (2 * h, 2 * w)
    total = 0.0
    for lam, am in zip(weights, maps.levels):
        if am.shape[-2:] != tuple(size):
            am = F.interpolate(am, size=size, mode="bilinear", align_corners=False)
        total = total + lam * am
    return total


def pixel_gap_map(image: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Ablation head: channel-mean absolute difference, ``(B, 1, H, W)``."""
    return (image - recon).abs().mean(dim=1, keepdim=True)


def image_score(am_final: np.ndarray | torch.Tensor, sigma: float = 4.0) -> float:
    """Maximum of the Gaussian-smoothed final map."""
    if isinstance(am_final, torch.Tensor):
        am_final = am_final.detach().cpu().double().numpy()
    am = np.asarray(am_final, dtype=np.float64).squeeze()
    if sigma > 0:
        am = ndimage.gaussian_filter(am, sigma=sigma, mode="nearest")
    return float(am.max())


# ------------------------------------------------------------ export


def quantize_map(am: np.ndarray) -> np.ndarray:
    return np.round(np.clip(am, 0.0, 1.0) * 65535.0).astype(np.uint16)


def dequantize_map(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) / 65535.0


def save_anomaly_map(am: np.ndarray, path: str | Path) -> np.ndarray:
    """Write a 16-bit PNG and return the map as it will read back."""
    q = quantize_map(np.asarray(am).squeeze())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)
    return dequantize_map(q)


def load_anomaly_map(path: str | Path) -> np.ndarray:
    return dequantize_map(np.asarray(Image.open(path)).astype(np.uint16))


def save_overlay(image: np.ndarray, am: np.ndarray, path: str | Path, alpha: float = 0.5) -> None:
    """Input blended with a jet heat map; ``image`` is ``H x W x 3`` in [0, 1]."""
    from matplotlib import colormaps

    heat = colormaps["jet"](np.clip(np.asarray(am).squeeze(), 0, 1))[..., :3]
    out = (1 - alpha) * np.asarray(image) + alpha * heat
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)).save(path)
