"""Reference-based attention module.

Two pieces:

* **Patch repair.** The defective feature map and the reference feature map
  are cut into non-overlapping ``K x K`` patches.  Each defective patch is
  rebuilt as a softmax(cosine similarity)-weighted sum of reference patches,
  so repaired features always lie in the convex hull of reference features.
* **Fusion.** The original map and two repairs (K=2 and K=4) are blended with
  per-element softmax attention computed from their sum.

Repair runs on encoder levels 3, 4 and 5.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

EPS = 1e-8
REPAIR_LEVELS = (3, 4, 5)

# zero-norm patches seen by patch_similarity (cosine undefined there)
diagnostics: Counter = Counter()


@dataclass
class RepairBundle:
    F_orig: torch.Tensor
    F_rep2: torch.Tensor
    F_rep4: torch.Tensor
    F_fused: torch.Tensor


def extract_patches(x: torch.Tensor, K: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, N, C*K*K)`` non-overlapping patches, row-major order."""
    _, _, h, w = x.shape
    if h % K or w % K:
        raise ValueError(f"feature map {h}x{w} is not divisible by patch size {K}")
    return F.unfold(x, kernel_size=K, stride=K).transpose(1, 2)


def fold_patches(patches: torch.Tensor, K: int, size: tuple[int, int]) -> torch.Tensor:
    return F.fold(patches.transpose(1, 2), output_size=size, kernel_size=K, stride=K)


def _unit(p: torch.Tensor, eps: float) -> torch.Tensor:
    return p / torch.sqrt((p * p).sum(dim=-1, keepdim=True) + eps)


def patch_similarity(
    F_def: torch.Tensor, F_ref: torch.Tensor, K: int, eps: float = EPS
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cosine similarity ``S[b, i, j]`` between defective patch i and reference
    patch j, and its row-wise softmax."""
    if F_def.shape[1:] != F_ref.shape[1:]:
        raise ValueError(f"feature shapes differ: {tuple(F_def.shape)} vs {tuple(F_ref.shape)}")
    p = extract_patches(F_def, K)
    b = extract_patches(F_ref, K)
    with torch.no_grad():
        zeros = int(((p * p).sum(-1) == 0).sum()) + int(((b * b).sum(-1) == 0).sum())
    if zeros:
        diagnostics["zero_patches"] += zeros
    S = _unit(p, eps) @ _unit(b, eps).transpose(1, 2)
    return S, torch.softmax(S, dim=-1)


def rbfrm_repair(F_def: torch.Tensor, F_ref: torch.Tensor, K: int, eps: float = EPS) -> torch.Tensor:
    """Rebuild every patch of ``F_def`` from reference patches.

    ``F_ref`` may have batch size 1 (a single fixed reference), in which case
    it is shared by every element of ``F_def``.
    """
    if F_ref.shape[0] == 1 and F_def.shape[0] > 1:
        F_ref = F_ref.expand(F_def.shape[0], -1, -1, -1)
    _, S_norm = patch_similarity(F_def, F_ref, K, eps)
    repaired = S_norm @ extract_patches(F_ref, K)
    return fold_patches(repaired, K, F_def.shape[-2:])


def ffm_fuse(
    F_orig: torch.Tensor,
    F_rep2: torch.Tensor,
    F_rep4: torch.Tensor,
    logits: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Blend three maps with softmax attention over ``(rep4, rep2, orig)`` logits.

    Returns the fused map and the stacked normalised attention ``(3, ...)``.
    """
    if not (F_orig.shape == F_rep2.shape == F_rep4.shape):
        raise ValueError("FFM inputs must share one shape")
    attn = torch.softmax(torch.stack(logits, dim=0), dim=0)
    fused = attn[0] * F_rep4 + attn[1] * F_rep2 + attn[2] * F_orig
    return fused, attn


class FFM(nn.Module):
    def __init__(self, channels: int, mid_channels: int = 64, kernel: int = 5):
        super().__init__()
        pad = kernel // 2
        self.squeeze = nn.Sequential(nn.Conv2d(channels, mid_channels, kernel, padding=pad), nn.ReLU(inplace=True))
        self.attn_rep4 = nn.Conv2d(mid_channels, channels, kernel, padding=pad)
        self.attn_rep2 = nn.Conv2d(mid_channels, channels, kernel, padding=pad)
        self.attn_orig = nn.Conv2d(mid_channels, channels, kernel, padding=pad)

    def logits(self, F_orig, F_rep2, F_rep4):
        z = self.squeeze(F_orig + F_rep2 + F_rep4)
        return self.attn_rep4(z), self.attn_rep2(z), self.attn_orig(z)

    def forward(self, F_orig, F_rep2, F_rep4) -> torch.Tensor:
        fused, _ = ffm_fuse(F_orig, F_rep2, F_rep4, self.logits(F_orig, F_rep2, F_rep4))
        return fused


class RBAM(nn.Module):
    """Two patch-repair branches plus fusion for one encoder level.

    Patch sizes larger than the feature map are clamped to it (a single patch
    then copies the reference map).
    """

    def __init__(
        self,
        channels: int,
        feature_size: int,
        patch_sizes: Sequence[int] = (2, 4),
        mid_channels: int = 64,
        kernel: int = 5,
    ):
        super().__init__()
        if len(patch_sizes) != 2:
            raise ValueError("RBAM uses exactly two patch sizes (small, large)")
        sizes = [min(int(k), feature_size) for k in patch_sizes]
        for k in sizes:
            if feature_size % k:
                raise ValueError(f"patch size {k} does not divide feature size {feature_size}")
        self.k_small, self.k_large = sizes
        self.ffm = FFM(channels, mid_channels, kernel)

    def forward(self, F_def: torch.Tensor, F_ref: torch.Tensor) -> RepairBundle:
        rep2 = rbfrm_repair(F_def, F_ref, self.k_small)
        rep4 = rbfrm_repair(F_def, F_ref, self.k_large)
        return RepairBundle(F_def, rep2, rep4, self.ffm(F_def, rep2, rep4))


def repair_pyramid(
    rbams: Mapping[str, RBAM] | nn.ModuleDict,
    pyr_def: Sequence[torch.Tensor],
    pyr_ref: Sequence[torch.Tensor],
) -> dict[int, RepairBundle]:
    if len(pyr_def) != len(pyr_ref) or any(a.shape[1:] != b.shape[1:] for a, b in zip(pyr_def, pyr_ref)):
        raise ValueError("defective and reference pyramids come from different encoder schedules")
    return {level: rbams[str(level)](pyr_def[level - 1], pyr_ref[level - 1]) for level in REPAIR_LEVELS}


def repaired_pyramid(pyr_def: Sequence[torch.Tensor], bundles: Mapping[int, RepairBundle]) -> list[torch.Tensor]:
    """Pyramid with levels 3-5 replaced by their fused repair; levels 1-2 untouched."""
    out = list(pyr_def)
    for level, bundle in bundles.items():
        out[level - 1] = bundle.F_fused
    return out


def feature_repair_loss(
    bundles: Mapping[int, RepairBundle],
    pyr_clean: Sequence[torch.Tensor],
    l1: int = 3,
    l2: int = 5,
    reduction: str = "mean",
) -> torch.Tensor:
    """Squared distance between fused repairs and the clean image's features,
    summed over levels ``l1..l2`` and scaled by ``1 / (l2 - l1)``.

    ``reduction="mean"`` averages squared errors over elements (the default
    used in training); ``"sum"`` gives the raw squared norm per sample.
    """
    total = 0.0
    for level in range(l1, l2 + 1):
        diff = bundles[level].F_fused - pyr_clean[level - 1]
        if reduction == "mean":
            total = total + (diff * diff).mean()
        elif reduction == "sum":
            total = total + (diff * diff).flatten(1).sum(1).mean()
        else:
            raise ValueError(f"unknown reduction {reduction!r}")
    return total / (l2 - l1)


def save_repair_panels(bundles: Mapping[int, RepairBundle], path: str | Path, index: int = 0) -> None:
    """Grid of channel-mean maps, one row per level: orig | rep2 | rep4 | fused."""
    from PIL import Image

    rows = []
    width = None
    for level in sorted(bundles):
        b = bundles[level]
        tiles = []
        for t in (b.F_orig, b.F_rep2, b.F_rep4, b.F_fused):
            m = t[index].detach().float().mean(0).cpu().numpy()
            m = (m - m.min()) / max(float(m.max() - m.min()), 1e-12)
            tiles.append(np.kron(m, np.ones((64 // m.shape[0] or 1,) * 2)))
        row = np.concatenate(tiles, axis=1)
        width = width or row.shape[1]
        rows.append(np.asarray(Image.fromarray((row * 255).astype(np.uint8)).resize((width, width // 4))) / 255.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.concatenate(rows, axis=0) * 255).astype(np.uint8)).save(path)
