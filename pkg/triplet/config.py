"""
Run configuration.

One YAML (or JSON) document holds every experiment knob. Values resolve in
this order: built-in defaults, the config document, a named preset, then
environment variables; each override is logged with its source.

Environment Variables:
    TRIPLET_CONFIG: path of the config document (default ./config.yaml)
    TRIPLET_WORKSPACE: default output directory
    TRIPLET_SEED: master seed
    TRIPLET_LOG_LEVEL: console log level (read by the CLI)
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .projection import Geometry

logger = logging.getLogger("triplet.config")

DEFAULT_CONFIG_PATH = Path("config.yaml")
TASK_NAMES = ("projection", "frequency", "image")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataConfig(_Section):
    volume_size: Tuple[int, int, int] = (64, 64, 16)
    patch_size: Tuple[int, int, int] = (32, 32, 16)
    patches_per_phantom: int = Field(8, ge=1)
    n_phantoms: int = Field(20, ge=1)
    n_structures: int = Field(6, ge=0)
    intensity_range: Tuple[float, float] = (0.2, 1.0)
    activity_threshold: float = Field(0.1, ge=0.0)
    normalization: Literal["minmax", "zscore"] = "minmax"
    dose_factor: float = Field(0.1, gt=0.0, le=1.0)
    count_scale: float = Field(1e5, gt=0.0)
    reconstructor: Literal["fbp", "osem"] = "fbp"
    osem_iterations: int = Field(4, ge=1)
    osem_subsets: int = Field(6, ge=1)
    folds: int = Field(5, ge=1)
    workers: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check_sizes(self) -> "DataConfig":
        if any(p > v for p, v in zip(self.patch_size, self.volume_size)):
            raise ValueError(f"patch_size {self.patch_size} exceeds volume_size {self.volume_size}")
        if self.patch_size[0] != self.patch_size[1]:
            raise ValueError("patch slices must be square (patch_size[0] == patch_size[1])")
        if min(self.volume_size) < 8:
            raise ValueError("volume extents must be at least 8")
        lo, hi = self.intensity_range
        if not 0 < lo < hi:
            raise ValueError(f"intensity_range must satisfy 0 < low < high, got {self.intensity_range}")
        return self


class GeometryConfig(_Section):
    n_angles: int = Field(120, ge=2)
    n_bins: Optional[int] = None
    bin_spacing: float = Field(1.0, gt=0.0)
    ray_step: float = Field(0.25, gt=0.0)
    filter: Literal["ramp", "hann"] = "hann"


class DenNetConfig(_Section):
    channels: int = Field(16, ge=1)
    pattern: str = "CTCTCTC"
    heads: int = Field(4, ge=1)
    window: Tuple[int, int, int] = (4, 4, 4)
    mlp_ratio: int = Field(2, ge=1)
    circular_padding: bool = False
    dropout: float = Field(0.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check(self) -> "DenNetConfig":
        if not self.pattern or set(self.pattern) - {"C", "T"} or self.pattern[0] != "C":
            raise ValueError(f"pattern must be a C/T string starting with C, got {self.pattern!r}")
        if "T" in self.pattern and self.channels % self.heads:
            raise ValueError(f"heads={self.heads} must divide channels={self.channels}")
        return self


class RecNetConfig(_Section):
    base_channels: int = Field(8, ge=1)
    levels: int = Field(2, ge=1)
    resampling: Literal["wavelet", "strided"] = "wavelet"
    max_block_width: Optional[int] = Field(64, ge=1)
    dropout: float = Field(0.0, ge=0.0, lt=1.0)


class AdvNetConfig(_Section):
    widths: Tuple[int, int, int] = (16, 32, 64)
    strides: Tuple[int, int, int, int] = (2, 2, 2, 1)
    slope: float = Field(0.2, ge=0.0)


class NetworksConfig(_Section):
    pipeline: Literal["sinogram", "image"] = "sinogram"
    dennet: DenNetConfig = DenNetConfig()
    recnet: RecNetConfig = RecNetConfig()
    advnet: AdvNetConfig = AdvNetConfig()


class LossConfig(_Section):
    enabled: List[str] = list(TASK_NAMES)
    frequency_alpha: float = Field(1.0, gt=0.0)
    adversarial_weight: float = Field(0.1, ge=0.0)
    gradnorm_alpha: float = Field(1.5, ge=0.0)
    gradnorm_lr: float = Field(0.025, gt=0.0)

    @field_validator("enabled")
    @classmethod
    def _known_tasks(cls, value: List[str]) -> List[str]:
        unknown = set(value) - set(TASK_NAMES)
        if unknown:
            raise ValueError(f"unknown loss tasks {sorted(unknown)}; expected a subset of {TASK_NAMES}")
        if "image" not in value:
            raise ValueError("the image loss must stay enabled")
        return [t for t in TASK_NAMES if t in value]


class StageConfig(_Section):
    epochs: int = Field(ge=0)
    lr: float = Field(gt=0.0)


class StagesConfig(_Section):
    batch_size: int = Field(4, ge=1)
    stage1: StageConfig = StageConfig(epochs=30, lr=1e-3)
    stage2: StageConfig = StageConfig(epochs=30, lr=1e-3)
    stage3: StageConfig = StageConfig(epochs=10, lr=1e-4)


class RunConfig(_Section):
    data: DataConfig = DataConfig()
    geometry: GeometryConfig = GeometryConfig()
    networks: NetworksConfig = NetworksConfig()
    losses: LossConfig = LossConfig()
    stages: StagesConfig = StagesConfig()
    seed: int = 0
    workspace: str = "./workspace"
    preset: str = "desk"

    @model_validator(mode="after")
    def _check_cross_section(self) -> "RunConfig":
        factor = 2 ** self.networks.recnet.levels
        if any(n % factor for n in self.data.patch_size):
            raise ValueError(f"patch_size {self.data.patch_size} must be divisible by 2^levels = {factor}")
        if self.networks.pipeline == "image" and "projection" in self.losses.enabled:
            raise ValueError("the image pipeline has no DenNet, so the projection loss cannot be enabled")
        if self.data.reconstructor == "osem" and self.geometry.n_angles % self.data.osem_subsets:
            raise ValueError("osem_subsets must divide geometry.n_angles")
        self.patch_geometry()
        return self

    def patch_geometry(self) -> Geometry:
        """Projection geometry of one patch slice."""
        size = self.data.patch_size[0]
        base = Geometry.default(size, self.geometry.n_angles)
        return Geometry(
            n_angles=self.geometry.n_angles,
            n_bins=self.geometry.n_bins or base.n_bins,
            image_size=size,
            bin_spacing=self.geometry.bin_spacing,
            ray_step=self.geometry.ray_step,
        )

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


# ============================================================================
# Presets
# ============================================================================

FULL_SCALE = {
    "data": {
        "volume_size": [256, 256, 160],
        "patch_size": [96, 96, 96],
        "patches_per_phantom": 40,
        "n_phantoms": 70,
        "reconstructor": "osem",
    },
    "networks": {"recnet": {"levels": 4, "base_channels": 1, "max_block_width": None}},
    "stages": {
        "stage1": {"epochs": 300, "lr": 1e-3},
        "stage2": {"epochs": 300, "lr": 1e-3},
        "stage3": {"epochs": 300, "lr": 1e-4},
    },
}

ABLATIONS = {
    "I": {"networks": {"pipeline": "image", "recnet": {"resampling": "strided"}},
          "losses": {"enabled": ["image"]}},
    "II": {"networks": {"pipeline": "image"}, "losses": {"enabled": ["image"]}},
    "III": {"networks": {"pipeline": "image"}, "losses": {"enabled": ["frequency", "image"]}},
    "IV": {"networks": {"pipeline": "sinogram"}, "losses": {"enabled": ["projection", "image"]}},
    "V": {"networks": {"pipeline": "sinogram"}, "losses": {"enabled": ["projection", "frequency", "image"]}},
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full": FULL_SCALE,
    "dennet-3x3": {"networks": {"dennet": {"pattern": "CTCTCT"}}},
    **ABLATIONS,
}


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; override values replace base values."""
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def build_config(document: Optional[Dict[str, Any]] = None, preset: Optional[str] = None) -> RunConfig:
    """Validate a raw document, optionally overlaid with a named preset."""
    document = dict(document or {})
    name = preset or document.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = deep_merge(document, PRESETS[name])
    merged["preset"] = name
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(_format_validation(e)) from None


def _format_validation(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item.get("loc", ()))
        parts.append(f"{location or 'config'}: {item.get('msg')}")
    return "; ".join(parts)


def read_document(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: cannot parse config ({e})") from None
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return document


def load_config(path: Optional[str] = None, preset: Optional[str] = None,
                seed: Optional[int] = None, workspace: Optional[str] = None) -> RunConfig:
    """
    Resolve the run configuration.

    Args:
        path: explicit config document; falls back to TRIPLET_CONFIG, then
            ./config.yaml, then built-in defaults
        preset: named preset overlaid on the document
        seed / workspace: explicit overrides (CLI flags); they beat the
            environment variables

    Raises:
        ConfigError: when the document or the merged values are invalid
    """
    if path:
        source, config_path = "--config", Path(path)
    elif "TRIPLET_CONFIG" in os.environ:
        source, config_path = "TRIPLET_CONFIG env var", Path(os.environ["TRIPLET_CONFIG"])
    else:
        source, config_path = "default", DEFAULT_CONFIG_PATH

    if config_path.exists():
        document = read_document(config_path)
        logger.info("Config loaded from %s (from %s)", config_path, source)
    elif source == "default":
        document = {}
        logger.info("No config.yaml found, using built-in defaults")
    else:
        raise ConfigError(f"config file {config_path} does not exist")

    if seed is not None:
        document["seed"] = seed
        logger.info("Seed %d (from --seed)", seed)
    elif "TRIPLET_SEED" in os.environ:
        try:
            document["seed"] = int(os.environ["TRIPLET_SEED"])
        except ValueError:
            raise ConfigError(f"TRIPLET_SEED must be an integer, got {os.environ['TRIPLET_SEED']!r}") from None
        logger.info("Seed %d (from TRIPLET_SEED env var)", document["seed"])

    if workspace is not None:
        document["workspace"] = workspace
        logger.info("Workspace %s (from --out)", workspace)
    elif "TRIPLET_WORKSPACE" in os.environ:
        document["workspace"] = os.environ["TRIPLET_WORKSPACE"]
        logger.info("Workspace %s (from TRIPLET_WORKSPACE env var)", document["workspace"])

    config = build_config(document, preset)
    logger.info("Preset %s, config hash %s", config.preset, config_hash(config)[:12])
    return config


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON form, workspace excluded."""
    document = config.to_dict()
    document.pop("workspace", None)
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
