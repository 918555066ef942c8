"""Dataset loading (MVTec AD layout), the procedural texture corpus and the
fixed reference image.

Images are returned as float32 ``H x W x 3`` arrays in ``[0, 1]``; masks as
uint8 ``H x W`` arrays with values in ``{0, 1}``.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from PIL import Image

from .noise import value_noise

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DataLayoutError(FileNotFoundError):
    """The dataset tree does not follow the expected layout."""


class ReferenceMismatchError(RuntimeError):
    """The reference image changed between training and inference."""


@dataclass(frozen=True, eq=False)
class ImageSample:
    pixels: np.ndarray
    source_path: str
    label: Literal["normal", "defective"] = "normal"
    gt_mask: np.ndarray | None = None

    def __post_init__(self):
        self.pixels.setflags(write=False)
        if self.gt_mask is not None:
            self.gt_mask.setflags(write=False)

    @property
    def is_defective(self) -> bool:
        return self.label == "defective"


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train_normals: list[ImageSample]
    test_samples: list[ImageSample]
    category: str
    missing_masks: tuple[str, ...] = ()

    def __post_init__(self):
        bad = [s.source_path for s in self.train_normals if s.is_defective]
        if bad:
            raise ValueError(f"training split must only hold normal images, got defective: {bad[:3]}")


@dataclass(frozen=True, eq=False)
class ReferenceSelection:
    image: ImageSample
    index: int
    checksum: str

    def verify(self, checksum: str) -> None:
        if checksum != self.checksum:
            raise ReferenceMismatchError(
                f"reference image checksum {self.checksum[:12]}... does not match the "
                f"checkpoint's {checksum[:12]}...; refusing to run with a drifted reference"
            )


def pixel_checksum(pixels: np.ndarray) -> str:
    arr = np.ascontiguousarray(pixels, dtype=np.float32)
    digest = hashlib.sha256()
    digest.update(str(arr.shape).encode())
    digest.update(arr.tobytes())
    return digest.hexdigest()


# --------------------------------------------------------------------- loading


def read_image(path: str | Path, resolution: int) -> np.ndarray:
    img = Image.open(path)
    img = img.convert("RGB")  # grayscale categories are replicated to 3 channels
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def read_mask(path: str | Path, resolution: int) -> np.ndarray:
    img = Image.open(path).convert("L")
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.NEAREST)
    return (np.asarray(img) > 0).astype(np.uint8)


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_mvtec_category(
    root: str | Path, category: str, resolution: int = 256, workers: int = 4
) -> DatasetSplit:
    base = Path(root) / category
    train_dir = base / "train" / "good"
    if not base.is_dir():
        raise DataLayoutError(f"category directory not found: {base}")
    if not train_dir.is_dir():
        raise DataLayoutError(f"missing training folder {train_dir} (expected <category>/train/good/*.png)")

    def load_normal(path: Path) -> ImageSample:
        return ImageSample(read_image(path, resolution), str(path), "normal")

    test_entries: list[tuple[Path, Path | None]] = []
    missing: list[str] = []
    test_dir = base / "test"
    types = sorted(p.name for p in test_dir.iterdir() if p.is_dir()) if test_dir.is_dir() else []
    for defect_type in types:
        for path in _list_images(test_dir / defect_type):
            if defect_type == "good":
                test_entries.append((path, None))
                continue
            mask_path = base / "ground_truth" / defect_type / f"{path.stem}_mask.png"
            if not mask_path.exists():
                missing.append(str(path))
                mask_path = None
            test_entries.append((path, mask_path))

    def load_test(entry: tuple[Path, Path | None]) -> ImageSample:
        path, mask_path = entry
        if path.parent.name == "good":
            return ImageSample(read_image(path, resolution), str(path), "normal")
        mask = read_mask(mask_path, resolution) if mask_path is not None else None
        return ImageSample(read_image(path, resolution), str(path), "defective", mask)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        train = list(pool.map(load_normal, _list_images(train_dir)))
        test = list(pool.map(load_test, test_entries))

    for path in missing:
        logger.warning("defective test image without ground-truth mask: %s", path)
    return DatasetSplit(train, test, category, tuple(missing))


def select_reference(split: DatasetSplit, index: int = 0) -> ReferenceSelection:
    """Pick training normal ``index`` (lexicographic file order) as the fixed reference."""
    if not 0 <= index < len(split.train_normals):
        raise IndexError(f"reference index {index} out of range for {len(split.train_normals)} training normals")
    sample = split.train_normals[index]
    return ReferenceSelection(sample, index, pixel_checksum(sample.pixels))


# ----------------------------------------------------------- synthetic corpus


@dataclass
class SyntheticSpec:
    texture: Literal["stripes", "checkerboard", "value-noise"] = "stripes"
    defect: Literal["blob", "scratch"] = "blob"
    n_train: int = 32
    n_test: int = 32
    defective_fraction: float = 0.5
    resolution: int = 64
    # fraction of the image covered by one injected defect
    defect_area: tuple[float, float] = (0.01, 0.06)
    intensity: tuple[float, float] = (0.25, 0.5)
    period: float = 16.0
    noise_std: float = 0.02
    category: str = "synthetic"

    def validate(self) -> None:
        if self.texture not in ("stripes", "checkerboard", "value-noise"):
            raise ValueError(f"unknown texture family {self.texture!r}")
        if self.defect not in ("blob", "scratch"):
            raise ValueError(f"unknown defect injector {self.defect!r}")
        lo, hi = self.defect_area
        if not 0 < lo <= hi:
            raise ValueError(f"defect_area must satisfy 0 < min <= max, got {self.defect_area}")
        if hi > 0.5:
            raise ValueError(f"defect_area max {hi} exceeds 0.5 of the image; defects must stay localized")
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")


def _texture(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.resolution
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    tint = np.array([0.55, 0.45, 0.35]) + rng.uniform(-0.03, 0.03, 3)
    if spec.texture == "stripes":
        phase = rng.uniform(0, 2 * np.pi)
        base = 0.5 + 0.5 * np.sin(2 * np.pi * xx / spec.period + phase)
    elif spec.texture == "checkerboard":
        oy, ox = rng.integers(0, int(spec.period), 2)
        cell = int(spec.period) // 2 or 1
        base = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
    else:
        base = value_noise((n, n), rng, octaves=4, base_cells=max(2, int(n / spec.period)))
    img = 0.2 + 0.6 * base[..., None] * tint[None, None, :] / tint.max()
    img = img + rng.normal(0.0, spec.noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


def _blob_mask(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.resolution
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    lo, hi = spec.defect_area
    for _ in range(100):
        area = rng.uniform(lo, hi) * n * n
        aspect = rng.uniform(0.5, 2.0)
        ry = np.sqrt(area * aspect / np.pi)
        rx = area / (np.pi * ry)
        cy, cx = rng.uniform(0.15, 0.85, 2) * n
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        if 0 < mask.mean() <= hi:
            return mask
    raise RuntimeError("could not place a blob within the requested area range")


def _scratch_mask(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.resolution
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    lo, hi = spec.defect_area
    for _ in range(100):
        width = rng.uniform(1.0, 3.0)
        length = min(rng.uniform(lo, hi) * n * n / width, 0.9 * n)
        cy, cx = rng.uniform(0.2, 0.8, 2) * n
        theta = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        mask = (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)
        if 0 < mask.mean() <= hi:
            return mask
    raise RuntimeError("could not place a scratch within the requested area range")


def _inject(img: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    mask = _blob_mask(spec, rng) if spec.defect == "blob" else _scratch_mask(spec, rng)
    sign = rng.choice([-1.0, 1.0])
    fill = img.mean(axis=(0, 1)) + sign * rng.uniform(*spec.intensity)
    fill = fill + rng.normal(0.0, spec.noise_std, img.shape)
    out = img.copy()
    out[mask] = np.clip(fill[mask], 0.0, 1.0)
    return out, mask.astype(np.uint8)


def _quantize(img: np.ndarray) -> np.ndarray:
    # 8-bit grid so the in-memory corpus equals its PNG round trip
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int) -> DatasetSplit:
    spec.validate()
    rng = np.random.default_rng(seed)
    train = [
        ImageSample(_quantize(_texture(spec, rng)), f"train/good/{i:03d}.png")
        for i in range(spec.n_train)
    ]
    n_def = int(round(spec.n_test * spec.defective_fraction))
    test = []
    for i in range(spec.n_test - n_def):
        test.append(ImageSample(_quantize(_texture(spec, rng)), f"test/good/{i:03d}.png"))
    for i in range(n_def):
        img, mask = _inject(_texture(spec, rng), spec, rng)
        test.append(ImageSample(_quantize(img), f"test/{spec.defect}/{i:03d}.png", "defective", mask))
    return DatasetSplit(train, test, spec.category)


def write_split(split: DatasetSplit, root: str | Path) -> Path:
    """Write a split to ``root/<category>`` in MVTec AD layout."""
    base = Path(root) / split.category

    def save(arr: np.ndarray, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(np.asarray(arr) * 255.0).astype(np.uint8)).save(path)

    for sample in split.train_normals:
        save(sample.pixels, base / sample.source_path)
    for sample in split.test_samples:
        rel = Path(sample.source_path)
        save(sample.pixels, base / rel)
        if sample.gt_mask is not None:
            mask_path = base / "ground_truth" / rel.parent.name / f"{rel.stem}_mask.png"
            save(sample.gt_mask.astype(np.float32), mask_path)
    return base


def stack_pixels(samples: Sequence[ImageSample]) -> np.ndarray:
    """N x 3 x H x W float32 batch."""
    return np.stack([s.pixels for s in samples]).transpose(0, 3, 1, 2).copy()
