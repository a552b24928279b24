"""Pipeline configuration: nested dataclasses, strict key validation,
YAML/JSON loading, and a canonical content hash for run manifests.

Checkpoint paths left unset resolve into the model home directory
(environment variable UD_HOME, default ~/.udscreen).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

MODE_SCRATCH = "scratch"
MODE_FINETUNE = "finetune"
MODE_EMBED_ONLY = "embed_only"
PIPELINE_MODES = (MODE_SCRATCH, MODE_FINETUNE, MODE_EMBED_ONLY)

DEFAULT_HOME = "~/.udscreen"


@dataclass
class DetectorConfig:
    kind: str = "classical"
    confidence_threshold: float = 0.1
    checkpoint_path: str | None = None
    min_diameter_px: int = 6
    min_contrast: float = 6.0

    def validate(self) -> None:
        if self.kind not in ("classical", "neural"):
            raise ValueError(f"detector.kind must be classical or neural, got {self.kind!r}")
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ValueError(f"detector.confidence_threshold outside [0, 1]: "
                             f"{self.confidence_threshold}")


@dataclass
class SegmenterConfig:
    enabled: bool = True
    checkpoint_path: str | None = None
    masking_policy: str = "mean_skin_fill"
    base_channels: int = 16

    def validate(self) -> None:
        if self.masking_policy not in ("mean_skin_fill", "zero_fill"):
            raise ValueError(f"segmenter.masking_policy must be mean_skin_fill or "
                             f"zero_fill, got {self.masking_policy!r}")


@dataclass
class VaeConfig:
    latent_dim: int = 32
    beta: float = 4.0
    lr: float = 1e-3
    batch_size: int = 64
    scratch_epochs: int = 130
    finetune_epochs: int = 10
    pretrain_epochs: int = 60
    base_checkpoint_path: str | None = None

    def validate(self) -> None:
        if self.latent_dim < 2:
            raise ValueError(f"vae.latent_dim must be >= 2, got {self.latent_dim}")
        if self.beta < 0:
            raise ValueError(f"vae.beta must be >= 0, got {self.beta}")
        for name in ("scratch_epochs", "finetune_epochs", "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"vae.{name} must be >= 0")


@dataclass
class ScoringConfig:
    std_mode: str = "population"
    source: str = "embedding_l2"

    def validate(self) -> None:
        if self.std_mode not in ("population", "sample"):
            raise ValueError(f"scoring.std_mode must be population or sample, "
                             f"got {self.std_mode!r}")
        if self.source not in ("embedding_l2", "reconstruction"):
            raise ValueError(f"scoring.source must be embedding_l2 or reconstruction, "
                             f"got {self.source!r}")


@dataclass
class PipelineSectionConfig:
    mode: str = MODE_FINETUNE
    annotation_color: tuple[int, int, int] = (0, 0, 255)  # blue, as in the report figures
    topk_semantics: str = "any"

    def validate(self) -> None:
        if self.mode not in PIPELINE_MODES:
            raise ValueError(f"pipeline.mode must be one of {PIPELINE_MODES}, "
                             f"got {self.mode!r}")
        if len(self.annotation_color) != 3 or \
                not all(0 <= int(c) <= 255 for c in self.annotation_color):
            raise ValueError(f"pipeline.annotation_color must be an RGB triple, "
                             f"got {self.annotation_color!r}")
        if self.topk_semantics not in ("any", "all"):
            raise ValueError(f"pipeline.topk_semantics must be any or all, "
                             f"got {self.topk_semantics!r}")


@dataclass
class PipelineConfig:
    tile_size: int = 512
    overlap_fraction: float = 0.5
    nms_iou: float = 0.45
    seed: int = 0
    home: str | None = None  # default: $UD_HOME or ~/.udscreen
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    pipeline: PipelineSectionConfig = field(default_factory=PipelineSectionConfig)

    def validate(self) -> "PipelineConfig":
        if self.tile_size < 1:
            raise ValueError(f"tile_size must be >= 1, got {self.tile_size}")
        if not (0.0 <= self.overlap_fraction < 1.0):
            raise ValueError(f"overlap_fraction must be in [0, 1), "
                             f"got {self.overlap_fraction}")
        if not (0.0 <= self.nms_iou <= 1.0):
            raise ValueError(f"nms_iou must be in [0, 1], got {self.nms_iou}")
        for section in (self.detector, self.segmenter, self.vae, self.scoring,
                        self.pipeline):
            section.validate()
        return self

    # -- checkpoint path resolution ------------------------------------
    def home_dir(self) -> Path:
        root = self.home or os.environ.get("UD_HOME", DEFAULT_HOME)
        return Path(root).expanduser()

    def detector_checkpoint(self) -> Path:
        return Path(self.detector.checkpoint_path) if self.detector.checkpoint_path \
            else self.home_dir() / "detector.pt"

    def segmenter_checkpoint(self) -> Path:
        return Path(self.segmenter.checkpoint_path) if self.segmenter.checkpoint_path \
            else self.home_dir() / "segmenter.pt"

    def vae_base_checkpoint(self) -> Path:
        return Path(self.vae.base_checkpoint_path) if self.vae.base_checkpoint_path \
            else self.home_dir() / "vae_base.pt"


_SECTION_TYPES = {
    "detector": DetectorConfig,
    "segmenter": SegmenterConfig,
    "vae": VaeConfig,
    "scoring": ScoringConfig,
    "pipeline": PipelineSectionConfig,
}


def _build_section(cls, payload: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown config key(s) {sorted(unknown)} under {prefix!r}")
    kwargs = dict(payload)
    for key, value in kwargs.items():
        if isinstance(value, list):
            kwargs[key] = tuple(value)
    return cls(**kwargs)


def config_from_dict(payload: dict | None) -> PipelineConfig:
    """Build and validate a PipelineConfig, rejecting unknown keys anywhere."""
    payload = dict(payload or {})
    top_known = {f.name for f in fields(PipelineConfig)}
    unknown = set(payload) - top_known
    if unknown:
        raise ValueError(f"unknown config key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be a mapping")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    return PipelineConfig(**kwargs).validate()


def load_config(path: str | Path | None) -> PipelineConfig:
    """Load YAML or JSON config (by content; YAML is a JSON superset here)."""
    if path is None:
        return PipelineConfig().validate()
    import yaml

    text = Path(path).read_text()
    payload = yaml.safe_load(text)
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ValueError(f"config root must be a mapping, got {type(payload).__name__}")
    return config_from_dict(payload)


def config_to_canonical_dict(config: PipelineConfig) -> dict:
    def convert(value):
        if dataclasses.is_dataclass(value):
            return {f.name: convert(getattr(value, f.name))
                    for f in fields(value)}
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        return value

    return convert(config)


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config_to_canonical_dict(config), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
