"""Training losses.

Squared norms are realised as mean squared errors (element-count normalised)
and the perceptual L1 distance as a mean absolute error per tap, so the loss
weights keep their meaning at every resolution.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import RunConfig
from .rbam import feature_repair_loss  # noqa: F401  (re-exported)

logger = logging.getLogger(__name__)

PHASE_TERMS = {
    1: ("rec", "per", "pixel_dis"),
    2: ("rec", "per", "fea_rep", "seg"),
}

# constant residual maps met by the normalisation step
diagnostics: Counter = Counter()


class PerceptualUnavailableError(RuntimeError):
    pass


# ------------------------------------------------------------ pixel discrimination


def normalize_map(r: torch.Tensor, mode: str = "minmax") -> torch.Tensor:
    """Per-sample normalisation of ``(B, 1, H, W)`` residual maps.

    Min-max maps to [0, 1]; a constant map becomes all zeros.
    """
    flat = r.flatten(1)
    if mode == "minmax":
        lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
        hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
        span = hi - lo
        flat_const = span == 0
        if bool(flat_const.any()):
            diagnostics["constant_residual"] += int(flat_const.sum())
        safe = torch.where(flat_const, torch.ones_like(span), span)
        return torch.where(flat_const, torch.zeros_like(r), (r - lo) / safe)
    if mode == "standardize":
        mean = flat.mean(dim=1).view(-1, 1, 1, 1)
        std = flat.std(dim=1, unbiased=False).view(-1, 1, 1, 1)
        return (r - mean) / (std + 1e-8)
    raise ValueError(f"unknown normalization {mode!r}")


def resize_mask_soft(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-averaged resize; keeps thin-defect mass as fractional targets."""
    if mask.shape[-2:] == tuple(size):
        return mask
    return F.interpolate(mask, size=size, mode="area")


def feature_residual(phi_o: torch.Tensor, phi_ad: torch.Tensor) -> torch.Tensor:
    """Channel mean of the squared feature difference, ``(B, 1, H, W)``."""
    return ((phi_o - phi_ad) ** 2).mean(dim=1, keepdim=True)


def pixel_discrimination_loss(
    pyr_o: Sequence[torch.Tensor],
    pyr_ad: Sequence[torch.Tensor],
    mask: torch.Tensor,
    normalization: str = "minmax",
) -> torch.Tensor:
    """Make normalised feature residuals between a clean image and its
    defect-injected twin reproduce the injection mask at every level.

    ``mask`` is ``(B, 1, H, W)`` at working resolution.
    """
    if len(pyr_o) != len(pyr_ad):
        raise ValueError("pyramids differ in depth")
    if mask.dim() == 3:
        mask = mask.unsqueeze(1)
    total = 0.0
    for phi_o, phi_ad in zip(pyr_o, pyr_ad):
        n = normalize_map(feature_residual(phi_o, phi_ad), normalization)
        target = resize_mask_soft(mask.to(n.dtype), tuple(n.shape[-2:]))
        total = total + ((n - target) ** 2).mean()
    return total / len(pyr_o)


# ------------------------------------------------------------ reconstruction


def reconstruction_loss(target: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(recon.shape)}")
    return F.mse_loss(recon, target)


# ------------------------------------------------------------ perceptual

# VGG-16 ``features[:12]``: conv1_1 .. relu3_1; taps are the first five ReLUs.
_VGG_LAYOUT = (64, "R", 64, "R", "M", 128, "R", 128, "R", "M", 256, "R")
_VGG_TAPS = (1, 3, 6, 8, 11)


class PerceptualExtractor(nn.Module):
    """Frozen VGG-16 front end exposing five ReLU feature maps.

    ``provenance`` is ``"pretrained-vgg16"`` (ImageNet weights from
    torchvision) or ``"fixed-random"`` (same topology, seed-pinned random
    weights for offline runs).
    """

    def __init__(self, provenance: str = "fixed-random", seed: int = 0, allow_fallback: bool = True):
        super().__init__()
        layers: list[nn.Module] = []
        prev = 3
        for item in _VGG_LAYOUT:
            if item == "R":
                layers.append(nn.ReLU(inplace=False))
            elif item == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers.append(nn.Conv2d(prev, item, 3, padding=1))
                prev = item
        self.features = nn.Sequential(*layers)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

        self.provenance = provenance
        if provenance == "pretrained-vgg16":
            try:
                self._load_pretrained()
            except Exception as exc:  # download or cache failures
                if not allow_fallback:
                    raise PerceptualUnavailableError(
                        "ImageNet VGG-16 weights are unavailable; place them in the torch hub cache "
                        "or set perceptual=fixed-random / perceptual_fallback=true"
                    ) from exc
                logger.warning("pretrained VGG-16 unavailable (%s); using fixed-random extractor", exc)
                self.provenance = "fixed-random"
        elif provenance != "fixed-random":
            raise ValueError(f"unknown perceptual provenance {provenance!r}")
        if self.provenance == "fixed-random":
            self._init_random(seed)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _load_pretrained(self) -> None:
        from torchvision.models import VGG16_Weights, vgg16

        vgg = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        self.features.load_state_dict(vgg.features[: len(self.features)].state_dict())

    def _init_random(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (x - self.mean) / self.std
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in _VGG_TAPS:
                taps.append(x)
        return taps


def perceptual_loss(
    target: torch.Tensor,
    recon: torch.Tensor,
    extractor: Callable[[torch.Tensor], Sequence[torch.Tensor]],
) -> torch.Tensor:
    """Mean absolute feature difference per tap, averaged over taps."""
    if target.shape != recon.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(recon.shape)}")
    if target.requires_grad:
        feats_t = extractor(target)
    else:
        with torch.no_grad():
            feats_t = extractor(target)
    feats_r = extractor(recon)
    per_tap = [(a - b).abs().mean() for a, b in zip(feats_t, feats_r)]
    return sum(per_tap) / len(per_tap)


# ------------------------------------------------------------ joint


def _weights_for(phase: int, cfg: RunConfig) -> dict[str, float]:
    w = cfg.weights1 if phase == 1 else cfg.weights2
    return {name: getattr(w, name) for name in PHASE_TERMS[phase]}


def joint_loss(terms: Mapping[str, torch.Tensor | float], phase: int, cfg: RunConfig | None = None):
    """Weighted sum of the phase's loss terms."""
    if phase not in PHASE_TERMS:
        raise ValueError(f"phase must be 1 or 2, got {phase}")
    missing = [t for t in PHASE_TERMS[phase] if t not in terms]
    if missing:
        raise KeyError(f"phase {phase} joint loss is missing term(s): {', '.join(missing)}")
    weights = _weights_for(phase, cfg or RunConfig())
    return sum(weights[name] * terms[name] for name in PHASE_TERMS[phase])


@dataclass
class LossBreakdown:
    phase: int
    terms: dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    @classmethod
    def from_terms(cls, terms: Mapping[str, torch.Tensor | float], phase: int, cfg: RunConfig) -> "LossBreakdown":
        values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}
        return cls(phase, values, float(joint_loss(values, phase, cfg)))

    def record(self, step: int) -> dict:
        return {"phase": self.phase, "step": step, **self.terms, "total": self.total}
