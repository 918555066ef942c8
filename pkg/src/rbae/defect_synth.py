"""Artificial-defect training pairs.

A defect-free image ``I_o`` is turned into ``I_ad`` by pasting an anomaly
source ``I_n`` through a binary mask ``I_m``::

    I_ad = I_o * (1 - I_m) + I_n * I_m

Masks are thresholded multi-octave value noise, optionally intersected with a
random rotated rectangle.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .config import MaskParams
from .data_ingest import IMAGE_SUFFIXES, read_image
from .noise import random_rotated_rect, value_noise


class MaskGenerationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MaskedTriplet:
    I_o: np.ndarray
    I_n: np.ndarray
    I_m: np.ndarray
    I_ad: np.ndarray


def make_random_mask(shape: tuple[int, int], rng: np.random.Generator, params: MaskParams | None = None) -> np.ndarray:
    """Binary float32 mask whose defect fraction lies in ``[min_area, max_area]``.

    Candidates outside the area bounds are redrawn; after ``max_retries``
    failures a :class:`MaskGenerationError` names the conflicting parameters.
    """
    params = params or MaskParams()
    h, w = shape
    if h < 16 or w < 16:
        raise ValueError(f"mask shape must be at least 16x16, got {shape}")
    q_lo, q_hi = params.quantile_range
    last = None
    for _ in range(params.max_retries):
        field = value_noise(shape, rng, params.octaves, params.base_cells)
        threshold = np.quantile(field, rng.uniform(q_lo, q_hi))
        mask = field >= threshold
        if rng.random() < params.rect_probability:
            mask &= random_rotated_rect(shape, rng)
        frac = mask.mean()
        if params.min_area <= frac <= params.max_area:
            return mask.astype(np.float32)
        last = frac
    raise MaskGenerationError(
        f"no mask within min_area={params.min_area} / max_area={params.max_area} after "
        f"{params.max_retries} tries (last fraction {last:.4f}); check quantile_range "
        f"{params.quantile_range} against the area bounds"
    )


def compose(I_o: np.ndarray, I_n: np.ndarray, I_m: np.ndarray, opacity: float = 1.0) -> MaskedTriplet:
    """Paste ``I_n`` into ``I_o`` through ``I_m``.

    ``opacity`` < 1 blends the source instead of hard-pasting it; the default
    is the plain composition.
    """
    if I_o.shape != I_n.shape:
        raise ValueError(f"image shapes differ: {I_o.shape} vs {I_n.shape}")
    if I_m.shape != I_o.shape[:2]:
        raise ValueError(f"mask shape {I_m.shape} does not match image {I_o.shape[:2]}")
    m = I_m[..., None].astype(I_o.dtype) if I_o.ndim == 3 else I_m.astype(I_o.dtype)
    if opacity != 1.0:
        m = m * opacity
    I_ad = I_o * (1 - m) + I_n * m
    return MaskedTriplet(I_o, I_n, I_m, I_ad)


def procedural_source(resolution: int, rng: np.random.Generator) -> np.ndarray:
    """Offline stand-in for natural images, float32 in [0, 1].

    Half the draws are saturated per-channel value noise, the other half smooth
    low-contrast fields around a random grey level (flat regions are common in
    real pictures and pure noise never produces them).
    """
    shape = (resolution, resolution)
    if rng.random() < 0.5:
        cells = int(rng.integers(2, 9))
        img = np.stack([value_noise(shape, rng, octaves=4, base_cells=cells) for _ in range(3)], axis=-1)
        lo = img.min(axis=(0, 1), keepdims=True)
        hi = img.max(axis=(0, 1), keepdims=True)
        img = (img - lo) / np.maximum(hi - lo, 1e-12)
        # pull a lopsided channel mean back to [0.25, 0.75], shrinking contrast just enough to stay in [0, 1]
        mu = img.mean(axis=(0, 1), keepdims=True)
        target = np.clip(mu, 0.25, 0.75)
        gain = np.minimum(1.0, np.minimum(target / np.maximum(mu, 1e-12), (1 - target) / np.maximum(1 - mu, 1e-12)))
        return np.clip(target + gain * (img - mu), 0.0, 1.0).astype(np.float32)
    level = rng.uniform(0.25, 0.75) + rng.uniform(-0.05, 0.05, 3)
    field = value_noise(shape, rng, octaves=2, base_cells=int(rng.integers(1, 4)))
    field = (field - field.mean()) / max(np.abs(field - field.mean()).max(), 1e-12)
    # amplitude <= 0.2 keeps every value inside [0, 1], so the channel mean is exactly ``level``
    img = level[None, None, :] + rng.uniform(0.0, 0.2) * field[..., None]
    return img.astype(np.float32)


class AnomalySourcePool:
    """Images used as ``I_n``. Either a folder of pictures or procedural noise."""

    def __init__(self, images: Sequence[np.ndarray] = (), resolution: int = 256, procedural: bool = False):
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        self.resolution = resolution
        self.procedural = procedural

    @classmethod
    def from_directory(cls, folder: str | Path, resolution: int, procedural: bool = False) -> "AnomalySourcePool":
        paths = sorted(p for p in Path(folder).rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        return cls([read_image(p, resolution) for p in paths], resolution, procedural)

    def __len__(self) -> int:
        return len(self.images)


def sample_anomaly_source(pool: AnomalySourcePool, rng: np.random.Generator) -> np.ndarray:
    if pool.procedural and not pool.images:
        return procedural_source(pool.resolution, rng)
    if not pool.images:
        raise ValueError(
            "anomaly-source pool is empty: point anomaly_source_dir at any folder of images "
            "(e.g. a DTD or ImageNet subset) or enable the procedural noise sources"
        )
    img = pool.images[int(rng.integers(len(pool.images)))]
    if img.shape[:2] != (pool.resolution, pool.resolution):
        pil = Image.fromarray(np.round(img * 255).astype(np.uint8))
        img = np.asarray(pil.resize((pool.resolution, pool.resolution), Image.BILINEAR), dtype=np.float32) / 255.0
    return img


def synthesize_pair(
    I_o: np.ndarray,
    pool: AnomalySourcePool,
    rng: np.random.Generator,
    params: MaskParams | None = None,
    opacity: float = 1.0,
) -> MaskedTriplet:
    mask = make_random_mask(I_o.shape[:2], rng, params)
    source = sample_anomaly_source(pool, rng)
    return compose(I_o, source.astype(I_o.dtype), mask.astype(I_o.dtype), opacity)


def save_triptych(triplet: MaskedTriplet, path: str | Path) -> None:
    """Debug dump: ``I_o | I_ad | I_m`` side by side."""
    mask_rgb = np.repeat(triplet.I_m[..., None], 3, axis=-1)
    row = np.concatenate([triplet.I_o, triplet.I_ad, mask_rgb], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(row, 0, 1) * 255).astype(np.uint8)).save(path)
