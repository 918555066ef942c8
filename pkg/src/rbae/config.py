"""Run configuration and manifest handling.

A run is fully determined by a :class:`RunConfig`.  Values are resolved in the
order file < environment (``RBAE_`` prefix) < command-line overrides, and the
resolved config is written to a YAML manifest that travels with every
checkpoint.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

ENV_PREFIX = "RBAE_"


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration keys and values."""


@dataclass
class MaskParams:
    min_area: float = 0.002
    max_area: float = 0.2
    octaves: int = 3
    base_cells: int = 4
    # threshold quantile of the noise field; area fraction is roughly 1 - q
    quantile_range: tuple[float, float] = (0.8, 0.998)
    rect_probability: float = 0.5
    max_retries: int = 64


@dataclass
class Phase1Weights:
    rec: float = 100.0
    per: float = 1.0
    pixel_dis: float = 1.0


@dataclass
class Phase2Weights:
    rec: float = 100.0
    per: float = 1.0
    fea_rep: float = 1.0
    seg: float = 1.0


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 1e-5


@dataclass
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 0.25
    clamp: float = 1e-6


@dataclass
class RunConfig:
    # data
    data_root: str = "data"
    category: str = "synthetic"
    resolution: int = 256
    reference_index: int = 0
    anomaly_source_dir: str | None = None
    anomaly_opacity: float = 1.0
    mask: MaskParams = field(default_factory=MaskParams)

    # model
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    norm_layers: bool = False
    patch_sizes: tuple[int, ...] = (2, 4)
    rbam_levels: tuple[int, int] = (3, 5)
    ffm_kernel: int = 5
    ffm_channels: int = 64
    use_rbam: bool = True

    # losses
    weights1: Phase1Weights = field(default_factory=Phase1Weights)
    weights2: Phase2Weights = field(default_factory=Phase2Weights)
    normalization: str = "minmax"
    perceptual: str = "pretrained-vgg16"
    perceptual_fallback: bool = True
    focal: FocalConfig = field(default_factory=FocalConfig)

    # anomaly maps / scoring
    fusion_weights: tuple[float, float, float] = (0.2, 0.2, 0.6)
    seg_head: str = "msfdm"
    image_score_sigma: float = 4.0
    pro_fpr_cap: float = 0.3
    connectivity: int = 8
    pixel_auc_pooling: str = "pooled"

    # optimization
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs_phase1: int = 400
    epochs_phase2: int = 200
    batch_size: int = 8
    seed: int = 0
    deterministic: bool = False
    device: str = "cpu"
    patience: int | None = None

    def validate(self) -> "RunConfig":
        if self.resolution % 32 != 0 or self.resolution <= 0:
            raise ConfigError(f"resolution must be a positive multiple of 32, got {self.resolution}")
        if len(self.widths) != 5:
            raise ConfigError(f"widths needs 5 entries (one per encoder level), got {len(self.widths)}")
        if tuple(self.rbam_levels) != (3, 5):
            raise ConfigError("rbam_levels is fixed to (3, 5): decoder skips come only from levels 3 and 4")
        if any(w < 0 for w in self.fusion_weights) or len(self.fusion_weights) != 3:
            raise ConfigError(f"fusion_weights must be three non-negative numbers, got {self.fusion_weights}")
        if self.seg_head not in ("msfdm", "pixel-gap"):
            raise ConfigError(f"unknown seg_head {self.seg_head!r}")
        if self.normalization not in ("minmax", "standardize"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.perceptual not in ("pretrained-vgg16", "fixed-random"):
            raise ConfigError(f"unknown perceptual provenance {self.perceptual!r}")
        if self.pixel_auc_pooling not in ("pooled", "per-image"):
            raise ConfigError(f"unknown pixel_auc_pooling {self.pixel_auc_pooling!r}")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")
        if not 0.0 < self.anomaly_opacity <= 1.0:
            raise ConfigError("anomaly_opacity must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        return self

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        cfg = cls()
        for key, value in _flatten(data).items():
            set_dotted(cfg, key, value)
        return cfg.validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(text) or {})


def smoke_config(**overrides: Any) -> RunConfig:
    """Desk-scale profile used by the synthetic end-to-end run.

    Single-image batches and a 10x learning rate give the short schedule
    enough optimizer steps to converge on 32 training images.
    """
    cfg = RunConfig(
        resolution=64,
        widths=(16, 32, 64, 128, 128),
        epochs_phase1=20,
        epochs_phase2=10,
        batch_size=1,
        optim=OptimConfig(lr=1e-3),
        perceptual="fixed-random",
        deterministic=True,
        image_score_sigma=1.0,
    )
    for key, value in overrides.items():
        set_dotted(cfg, key, value)
    return cfg.validate()


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _flatten(data: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(value, str) and not isinstance(current, str):
        value = yaml.safe_load(value)
    if isinstance(value, str) and isinstance(current, (int, float)) and not isinstance(current, bool):
        # YAML 1.1 reads "1e-3" as a string
        try:
            value = type(current)(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(current, float) and isinstance(value, list):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a sequence, got {value!r}")
        return tuple(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    return value


def set_dotted(cfg: Any, key: str, value: Any) -> None:
    """Set ``cfg.a.b = value`` from a dotted key, coercing to the field's type."""
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    names = {f.name for f in dataclasses.fields(target)} if dataclasses.is_dataclass(target) else set()
    if leaf not in names:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} is a section, set one of its fields instead")
    setattr(target, leaf, _coerce(current, value, key))


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    """``RBAE_OPTIM__LR=1e-3`` becomes ``{"optim.lr": "1e-3"}``."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            out[name[len(ENV_PREFIX):].lower().replace("__", ".")] = value
    return out


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def resolve_config(
    path: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
    base: RunConfig | None = None,
) -> RunConfig:
    """Build a config from file, then environment, then explicit overrides."""
    cfg = base if base is not None else RunConfig()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        for key, value in _flatten(data).items():
            set_dotted(cfg, key, value)
    for key, value in env_overrides(environ).items():
        # env vars that do not name a config key (e.g. RBAE_HOME) are ignored
        try:
            set_dotted(cfg, key, value)
        except ConfigError:
            continue
    for key, value in (overrides or {}).items():
        set_dotted(cfg, key, value)
    return cfg.validate()
