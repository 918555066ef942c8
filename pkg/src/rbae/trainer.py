"""Model assembly, two-phase training, checkpoints and inference.

Phase 1 trains encoder and decoder on clean reconstruction plus the pixel
discrimination loss.  Phase 2 freezes the encoder and trains the repair
modules, decoder and discriminators on artificial-defect images.  Inference
runs the phase-2 forward path.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from torch import nn

from . import __version__
from .backbone import Decoder, Encoder, split_for_decoder
from .config import RunConfig
from .data_ingest import DatasetSplit, ImageSample, ReferenceSelection, select_reference, stack_pixels
from .defect_synth import AnomalySourcePool, synthesize_pair
from .losses import (
    LossBreakdown,
    PerceptualExtractor,
    joint_loss,
    perceptual_loss,
    pixel_discrimination_loss,
    reconstruction_loss,
)
from .msfdm import (
    MSFDM,
    AnomalyMapSet,
    build_concat_features,
    fuse_anomaly_maps,
    image_score,
    pixel_gap_map,
    segmentation_loss,
)
from .rbam import RBAM, REPAIR_LEVELS, RepairBundle, feature_repair_loss, repair_pyramid, repaired_pyramid

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rbae-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int, dump: str | None = None):
        self.term, self.step, self.dump = term, step, dump
        where = f"; rng state dumped to {dump}" if dump else ""
        super().__init__(f"loss term {term!r} became non-finite at step {step}{where}")


class InvariantError(RuntimeError):
    """Internal invariant violated (e.g. a frozen module changed)."""


# ------------------------------------------------------------------- model


class RBAE(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.widths, norm=cfg.norm_layers)
        self.decoder = Decoder(cfg.widths, norm=cfg.norm_layers)
        self.rbams = nn.ModuleDict(
            {
                str(level): RBAM(
                    cfg.widths[level - 1],
                    cfg.resolution // 2**level,
                    cfg.patch_sizes,
                    cfg.ffm_channels,
                    cfg.ffm_kernel,
                )
                for level in REPAIR_LEVELS
            }
        )
        self.msfdm = MSFDM(cfg.widths)
        self.register_buffer("reference", torch.zeros(1, 3, cfg.resolution, cfg.resolution), persistent=False)
        self._ref_pyramid: list[torch.Tensor] | None = None
        self.reference_encodes = 0
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        for fdm in self.msfdm.fdms:
            fdm.reset_head()

    def set_reference(self, pixels: np.ndarray | torch.Tensor) -> None:
        ref = torch.tensor(np.asarray(pixels), dtype=torch.float32)
        if ref.dim() == 3:
            ref = ref.permute(2, 0, 1).unsqueeze(0)
        self.reference = ref.to(self.reference.device)
        self._ref_pyramid = None

    def reference_pyramid(self) -> list[torch.Tensor]:
        """Encoder features of the fixed reference, computed once and cached."""
        if self._ref_pyramid is None:
            with torch.no_grad():
                self._ref_pyramid = [f.detach() for f in self.encoder(self.reference)]
            self.reference_encodes += 1
        return self._ref_pyramid

    def clear_reference_cache(self) -> None:
        self._ref_pyramid = None

    def decode(self, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        bottleneck, skips = split_for_decoder(pyramid)
        return self.decoder(bottleneck, skips)

    def repair(self, pyr_def: Sequence[torch.Tensor]) -> dict[int, RepairBundle]:
        return repair_pyramid(self.rbams, pyr_def, self.reference_pyramid())

    def reconstruct(self, pyr_def: Sequence[torch.Tensor]) -> tuple[torch.Tensor, dict[int, RepairBundle] | None]:
        if not self.cfg.use_rbam:
            return self.decode(pyr_def), None
        bundles = self.repair(pyr_def)
        return self.decode(repaired_pyramid(pyr_def, bundles)), bundles

    def anomaly_maps(self, image: torch.Tensor, recon: torch.Tensor, seg_head: str | None = None) -> AnomalyMapSet:
        seg_head = seg_head or self.cfg.seg_head
        size = tuple(image.shape[-2:])
        if seg_head == "pixel-gap":
            gap = pixel_gap_map(image, recon)
            return AnomalyMapSet(gap, gap, gap, gap)
        maps = self.msfdm(build_concat_features(self.encoder, image, recon))
        maps.AM_final = fuse_anomaly_maps(maps, self.cfg.fusion_weights, size)
        return maps

    @torch.no_grad()
    def predict(self, images: torch.Tensor, seg_head: str | None = None) -> tuple[torch.Tensor, AnomalyMapSet]:
        self.eval()
        pyr = self.encoder(images)
        recon, _ = self.reconstruct(pyr)
        return recon, self.anomaly_maps(images, recon, seg_head)


# -------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    state_dict: dict[str, torch.Tensor]
    config: dict
    reference: dict
    phase: int
    step: int
    perceptual_provenance: str = "fixed-random"
    version: int = CHECKPOINT_VERSION

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def build_model(self, device: str | None = None) -> RBAE:
        cfg = self.run_config()
        model = RBAE(cfg)
        model.load_state_dict(self.state_dict)
        return model.to(device or "cpu")

    def to_payload(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": self.version,
            "package_version": __version__,
            "phase": self.phase,
            "step": self.step,
            # JSON text rather than nested objects: pickle memoises shared strings by
            # identity, which would make the bytes depend on object history
            "config": json.dumps(self.config, sort_keys=True),
            "manifest": RunConfig.from_dict(self.config).to_yaml(),
            "reference": json.dumps(self.reference, sort_keys=True),
            "perceptual_provenance": self.perceptual_provenance,
            "state_dict": {k: v.detach().cpu().contiguous() for k, v in self.state_dict.items()},
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(self.to_payload(), buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not an RB-AE checkpoint")
        if payload["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {payload['version']} is newer than supported {CHECKPOINT_VERSION}")
        return cls(
            state_dict=payload["state_dict"],
            config=json.loads(payload["config"]),
            reference=json.loads(payload["reference"]),
            phase=payload["phase"],
            step=payload["step"],
            perceptual_provenance=payload["perceptual_provenance"],
            version=payload["version"],
        )


def _reference_record(ref: ReferenceSelection) -> dict:
    return {"index": ref.index, "checksum": ref.checksum, "source_path": ref.image.source_path}


def _snapshot(model: RBAE, cfg: RunConfig, ref: ReferenceSelection, phase: int, step: int, provenance: str):
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    return Checkpoint(state, cfg.to_dict(), _reference_record(ref), phase, step, provenance)


# ---------------------------------------------------------------- training


def configure_determinism(cfg: RunConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _anomaly_pool(cfg: RunConfig) -> AnomalySourcePool:
    if cfg.anomaly_source_dir:
        pool = AnomalySourcePool.from_directory(cfg.anomaly_source_dir, cfg.resolution, procedural=True)
        if len(pool):
            return pool
        logger.warning("no images under %s; using procedural anomaly sources", cfg.anomaly_source_dir)
    return AnomalySourcePool(resolution=cfg.resolution, procedural=True)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _synth_batch(images: np.ndarray, pool, rng, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """``images`` is N x H x W x 3; returns (I_ad N x 3 x H x W, I_m N x 1 x H x W)."""
    ads, masks = [], []
    for img in images:
        trip = synthesize_pair(img, pool, rng, cfg.mask, cfg.anomaly_opacity)
        ads.append(trip.I_ad)
        masks.append(trip.I_m)
    return (
        np.stack(ads).transpose(0, 3, 1, 2).astype(np.float32),
        np.stack(masks)[:, None].astype(np.float32),
    )


def _check_finite(terms: dict, step: int, rng_state: dict, dump_dir: Path | None) -> None:
    for name, value in terms.items():
        if not math.isfinite(float(value.detach() if torch.is_tensor(value) else value)):
            dump = None
            if dump_dir is not None:
                dump_dir.mkdir(parents=True, exist_ok=True)
                dump = str(dump_dir / f"nonfinite_step{step}.json")
                Path(dump).write_text(json.dumps(rng_state, default=str))
            raise NonFiniteLossError(name, step, dump)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    model: RBAE | None = None


class _Logger:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def _make_extractor(cfg: RunConfig, device) -> PerceptualExtractor:
    return PerceptualExtractor(cfg.perceptual, seed=cfg.seed, allow_fallback=cfg.perceptual_fallback).to(device)


def _run_epochs(
    phase: int,
    split: DatasetSplit,
    cfg: RunConfig,
    step_fn: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], dict],
    optimizer: torch.optim.Optimizer,
    epochs: int,
    log: _Logger,
    dump_dir: Path | None,
    after_step: Callable[[], None] | None = None,
    max_steps: int | None = None,
) -> tuple[list[dict], int]:
    device = torch.device(cfg.device)
    images_hwc = np.stack([s.pixels for s in split.train_normals])
    pool = _anomaly_pool(cfg)
    rng = np.random.default_rng([cfg.seed, phase])
    history: list[dict] = []
    step = 0
    best, stale = math.inf, 0
    for epoch in range(epochs):
        epoch_totals = []
        for idx in _batches(len(images_hwc), cfg.batch_size, rng):
            rng_state = rng.bit_generator.state
            ad, mask = _synth_batch(images_hwc[idx], pool, rng, cfg)
            I_o = torch.from_numpy(images_hwc[idx].transpose(0, 3, 1, 2).copy()).to(device)
            I_ad = torch.from_numpy(ad).to(device)
            I_m = torch.from_numpy(mask).to(device)

            terms = step_fn(I_o, I_ad, I_m)
            total = joint_loss(terms, phase, cfg)
            _check_finite({**terms, "total": total}, step, rng_state, dump_dir)
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            if after_step is not None:
                after_step()

            record = LossBreakdown.from_terms(terms, phase, cfg).record(step)
            record["epoch"] = epoch
            history.append(record)
            log.write(record)
            epoch_totals.append(record["total"])
            step += 1
            if max_steps is not None and step >= max_steps:
                return history, step
        mean_total = float(np.mean(epoch_totals))
        logger.info("phase %d epoch %d/%d total %.5f", phase, epoch + 1, epochs, mean_total)
        if cfg.patience is not None:
            if mean_total < best - 1e-12:
                best, stale = mean_total, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    logger.info("phase %d early stop after %d stale epochs", phase, stale)
                    break
    return history, step


def _adam(params, cfg: RunConfig) -> torch.optim.Optimizer:
    if cfg.optim.name.lower() != "adam":
        raise ValueError(f"unsupported optimizer {cfg.optim.name!r}")
    return torch.optim.Adam(params, lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)


def train_phase1(
    split: DatasetSplit,
    cfg: RunConfig,
    log_path: str | Path | None = None,
    max_steps: int | None = None,
    model: RBAE | None = None,
) -> TrainResult:
    """Train encoder + decoder; repair modules and discriminators stay untouched."""
    cfg.validate()
    if not split.train_normals:
        raise ValueError("phase 1 needs at least one training normal")
    configure_determinism(cfg)
    device = torch.device(cfg.device)
    ref = select_reference(split, cfg.reference_index)
    model = (model or RBAE(cfg)).to(device)
    model.set_reference(ref.image.pixels)
    extractor = _make_extractor(cfg, device)
    params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    optimizer = _adam(params, cfg)
    model.train()

    def step_fn(I_o, I_ad, I_m):
        n = I_o.shape[0]
        pyr = model.encoder(torch.cat([I_o, I_ad], dim=0))
        pyr_o = [f[:n] for f in pyr]
        pyr_ad = [f[n:] for f in pyr]
        recon = model.decode(pyr_o)  # only clean features reach the decoder
        return {
            "rec": reconstruction_loss(I_o, recon),
            "per": perceptual_loss(I_o, recon, extractor),
            "pixel_dis": pixel_discrimination_loss(pyr_o, pyr_ad, I_m, cfg.normalization),
        }

    dump_dir = Path(log_path).parent if log_path else None
    history, steps = _run_epochs(
        1, split, cfg, step_fn, optimizer, cfg.epochs_phase1, _Logger(log_path), dump_dir, max_steps=max_steps
    )
    ckpt = _snapshot(model, cfg, ref, 1, steps, extractor.provenance)
    return TrainResult(ckpt, history, model)


def _freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def train_phase2(
    split: DatasetSplit,
    ckpt: Checkpoint,
    cfg: RunConfig | None = None,
    log_path: str | Path | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Freeze the encoder; train repair modules, decoder and discriminators."""
    if ckpt.phase != 1:
        raise ValueError(f"phase 2 starts from a phase-1 checkpoint, got phase {ckpt.phase}")
    cfg = (cfg or ckpt.run_config()).validate()
    configure_determinism(cfg)
    device = torch.device(cfg.device)
    ref = select_reference(split, cfg.reference_index)
    if ckpt.reference.get("checksum") is not None:
        ref.verify(ckpt.reference["checksum"])

    model = RBAE(cfg)
    model.load_state_dict(ckpt.state_dict)
    model = model.to(device)
    model.set_reference(ref.image.pixels)
    _freeze(model.encoder)
    model.encoder.eval()
    frozen = {k: v.detach().clone() for k, v in model.encoder.state_dict().items()}
    extractor = _make_extractor(cfg, device)

    params = [p for m in (model.rbams, model.decoder, model.msfdm) for p in m.parameters()]
    optimizer = _adam(params, cfg)
    model.decoder.train()
    model.rbams.train()
    model.msfdm.train()
    focal = cfg.focal

    def step_fn(I_o, I_ad, I_m):
        with torch.no_grad():
            pyr_clean = model.encoder(I_o)
            pyr_ad = model.encoder(I_ad)
        recon, bundles = model.reconstruct(pyr_ad)
        if bundles is None:
            # ablation without repair: report the raw feature gap
            bundles = {lvl: RepairBundle(pyr_ad[lvl - 1], pyr_ad[lvl - 1], pyr_ad[lvl - 1], pyr_ad[lvl - 1]) for lvl in REPAIR_LEVELS}
        maps = model.msfdm(build_concat_features(model.encoder, I_ad, recon))
        return {
            "rec": reconstruction_loss(I_o, recon),
            "per": perceptual_loss(I_o, recon, extractor),
            "fea_rep": feature_repair_loss(bundles, pyr_clean, *cfg.rbam_levels),
            "seg": segmentation_loss(maps, I_m, focal.gamma, focal.alpha, focal.clamp),
        }

    def check_frozen():
        for k, v in model.encoder.state_dict().items():
            if not torch.equal(v, frozen[k]):
                raise InvariantError(f"encoder parameter {k} changed during phase 2")

    dump_dir = Path(log_path).parent if log_path else None
    history, steps = _run_epochs(
        2, split, cfg, step_fn, optimizer, cfg.epochs_phase2, _Logger(log_path), dump_dir, check_frozen, max_steps
    )
    new = _snapshot(model, cfg, ref, 2, ckpt.step + steps, extractor.provenance)
    return TrainResult(new, history, model)


# --------------------------------------------------------------- inference


@dataclass
class InferenceResult:
    recon: np.ndarray  # H x W x 3
    maps: AnomalyMapSet
    am_final: np.ndarray  # H x W
    score: float


class Inferencer:
    """Phase-2 forward path bound to a validated reference image."""

    def __init__(self, ckpt: Checkpoint, reference: ReferenceSelection, device: str | None = None, seg_head: str | None = None):
        if ckpt.phase != 2:
            raise ValueError(f"inference needs a phase-2 checkpoint, got phase {ckpt.phase}")
        reference.verify(ckpt.reference["checksum"])
        self.cfg = ckpt.run_config()
        if self.cfg.deterministic:
            configure_determinism(self.cfg)
        self.model = ckpt.build_model(device or self.cfg.device)
        self.model.set_reference(reference.image.pixels)
        self.model.eval()
        self.seg_head = seg_head or self.cfg.seg_head
        self.device = next(self.model.parameters()).device

    def __call__(self, image: ImageSample | np.ndarray) -> InferenceResult:
        return self.batch([image])[0]

    def batch(self, images: Sequence[ImageSample | np.ndarray]) -> list[InferenceResult]:
        arrays = [im.pixels if isinstance(im, ImageSample) else np.asarray(im, dtype=np.float32) for im in images]
        x = torch.from_numpy(np.stack(arrays).transpose(0, 3, 1, 2).copy()).to(self.device)
        recon, maps = self.model.predict(x, self.seg_head)
        out = []
        for i in range(len(arrays)):
            am = maps.AM_final[i, 0].cpu().double().numpy()
            single = AnomalyMapSet(maps.AM_1[i : i + 1], maps.AM_2[i : i + 1], maps.AM_3[i : i + 1], maps.AM_final[i : i + 1])
            out.append(
                InferenceResult(
                    recon=recon[i].permute(1, 2, 0).cpu().numpy(),
                    maps=single,
                    am_final=am,
                    score=image_score(am, self.cfg.image_score_sigma),
                )
            )
        return out


def infer(ckpt: Checkpoint, image: ImageSample | np.ndarray, reference: ReferenceSelection) -> InferenceResult:
    return Inferencer(ckpt, reference)(image)
