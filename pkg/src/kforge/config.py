"""
Configuration loading from a key=value file and environment variables.
"""

import hashlib
import json
import math
import os
from typing import Dict, Literal, Optional, Tuple

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .seeding import derive_seed

# Load .env file if present
load_dotenv()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class StoreSettings(_Section):
    """Annotation store tunables."""

    split_seed: int = 0


class LineSettings(_Section):
    """Line assembly tunables."""

    overlap_threshold: float = Field(0.4, gt=0.0, le=1.0)


class AugmentationSpec(_Section):
    """Random line erasure and geometric distortion knobs."""

    k_min: int = Field(1, ge=0)
    k_max: int = Field(3, ge=0)
    erase_margin: int = Field(4, ge=0)
    skew_max_deg: float = Field(5.0, ge=0.0, le=30.0)
    elastic_alpha: float = Field(4.0, ge=0.0)
    elastic_sigma: float = Field(8.0, gt=0.0)
    enable_skew: bool = True
    enable_elastic: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _check_k_range(self):
        if self.k_min > self.k_max:
            raise ValueError(f"k_min ({self.k_min}) must not exceed k_max ({self.k_max})")
        return self


class CurriculumSettings(_Section):
    """Crop grouping and stage schedule."""

    group_min: int = Field(1, ge=1)
    group_max: int = Field(5, ge=1)
    crop_margin: int = Field(8, ge=0)
    patience: int = Field(10, ge=1)
    max_epochs: int = Field(100, ge=1)
    stop_metric: Literal["valid_crr", "valid_loss"] = "valid_crr"
    loss_smoothing: float = Field(0.5, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_groups(self):
        if self.group_min > self.group_max:
            raise ValueError(
                f"group_min ({self.group_min}) must not exceed group_max ({self.group_max})"
            )
        return self


class ExperimentSettings(_Section):
    """Desk experiment size and per-stage budget."""

    train_pages: int = Field(200, ge=10)
    held_out: int = Field(40, ge=1)
    max_epochs: int = Field(25, ge=1)
    stop_metric: Literal["valid_crr", "valid_loss"] = "valid_loss"


class MetricsSettings(_Section):
    """Scoring switches."""

    crr_literal: bool = False
    include_separator: bool = True


class Hyperparams(_Section):
    """Recognizer architecture and AdaDelta training settings."""

    rho: float = Field(0.95, gt=0.0, lt=1.0)
    epsilon: float = Field(1e-4, gt=0.0)
    scale: float = Field(0.1, gt=0.0)
    clip_norm: float = Field(5.0, gt=0.0)
    batch_size: int = Field(4, ge=1)
    max_decode_len: int = Field(64, ge=0)
    max_side: int = Field(512, ge=8)
    conv_channels: Tuple[int, int] = (12, 24)
    feature_dim: int = Field(48, ge=1)
    pos_dims: int = Field(16, ge=0)
    embed_dim: int = Field(32, ge=1)
    hidden_dim: int = Field(64, ge=1)
    attn_dim: int = Field(32, ge=1)
    init_scale: float = Field(0.1, gt=0.0)
    seed: int = 0

    @field_validator("conv_channels", mode="before")
    @classmethod
    def _split_channels(cls, value):
        if isinstance(value, str):
            return tuple(int(part) for part in value.split(",") if part.strip())
        return value

    @field_validator("pos_dims")
    @classmethod
    def _pos_dims_multiple_of_four(cls, value: int) -> int:
        if value % 4:
            raise ValueError("pos_dims must be a multiple of 4 (sin/cos for rows and columns)")
        return value


class CorpusParams(_Section):
    """Synthetic vertical-text page generator settings."""

    alphabet_size: int = Field(10, ge=2, le=32)
    lines_min: int = Field(3, ge=1)
    lines_max: int = Field(5, ge=1)
    chars_min: int = Field(3, ge=1)
    chars_max: int = Field(6, ge=1)
    glyph_size: int = Field(16, ge=6)
    box_pad: int = Field(2, ge=0)
    column_gap_min: int = Field(10, ge=0)
    column_gap_max: int = Field(14, ge=0)
    char_gap: int = Field(4, ge=0)
    jitter_x: float = Field(1.0, ge=0.0)
    jitter_y: float = Field(1.0, ge=0.0)
    page_width: int = Field(176, ge=8)
    page_height: int = Field(160, ge=8)
    margin: int = Field(8, ge=0)
    background: Tuple[int, int, int] = (222, 205, 170)
    ink: Tuple[int, int, int] = (40, 28, 20)
    noise_level: int = Field(6, ge=0, le=64)
    seed: int = 0

    @field_validator("background", "ink", mode="before")
    @classmethod
    def _split_color(cls, value):
        if isinstance(value, str):
            return tuple(int(part) for part in value.split(","))
        return value

    @property
    def column_width(self) -> int:
        return self.glyph_size + 2 * self.box_pad

    @model_validator(mode="after")
    def _check_ranges(self):
        for low, high in (("lines_min", "lines_max"), ("chars_min", "chars_max"),
                          ("column_gap_min", "column_gap_max")):
            if getattr(self, low) > getattr(self, high):
                raise ValueError(f"{low} must not exceed {high}")
        if self.column_gap_min < 0.5 * self.column_width:
            raise ValueError(
                f"column_gap_min ({self.column_gap_min}) must be at least half the "
                f"column width ({self.column_width})"
            )
        reach = math.ceil(max(self.jitter_x, self.jitter_y))
        if self.margin + self.box_pad < reach:
            raise ValueError(
                f"margin + box_pad ({self.margin + self.box_pad}) must be at least the rounded-up "
                f"jitter ({reach}) so every glyph stays on the page"
            )
        return self


SECTIONS = {
    "store": StoreSettings,
    "lines": LineSettings,
    "augmentation": AugmentationSpec,
    "curriculum": CurriculumSettings,
    "experiment": ExperimentSettings,
    "metrics": MetricsSettings,
    "recognizer": Hyperparams,
    "synth": CorpusParams,
}

# Section fields seeded from the master seed unless set explicitly
SEEDED_FIELDS = {
    "store": "split_seed",
    "augmentation": "seed",
    "recognizer": "seed",
    "synth": "seed",
}

TOP_LEVEL_KEYS = ("seed", "jobs", "debug_logging")


class Config:
    """Effective configuration: defaults, then config file, then environment, then overrides."""

    seed: int = 0
    jobs: int = 1
    debug_logging: bool = False

    store: StoreSettings
    lines: LineSettings
    augmentation: AugmentationSpec
    curriculum: CurriculumSettings
    experiment: ExperimentSettings
    metrics: MetricsSettings
    recognizer: Hyperparams
    synth: CorpusParams

    def __init__(self, path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None):
        """
        Load configuration.

        Args:
            path: key=value config file; defaults to $KFORGE_CONFIG when unset
            overrides: dotted keys that win over file and environment

        Raises:
            ValueError: unknown section or key, malformed value, or missing file
        """
        self.path = path or os.getenv("KFORGE_CONFIG")
        raw: Dict[str, Optional[str]] = {}
        if self.path:
            if not os.path.isfile(self.path):
                raise ValueError(
                    f"Config file {self.path} does not exist. "
                    f"Set KFORGE_CONFIG or pass --config with a valid path."
                )
            raw.update(dotenv_values(self.path))

        # Environment
        for key in TOP_LEVEL_KEYS:
            env_value = os.getenv(f"KFORGE_{key.upper()}")
            if env_value is not None:
                raw[key] = env_value

        if overrides:
            raw.update({k: v for k, v in overrides.items() if v is not None})

        self._apply(raw)

    def _apply(self, raw: Dict[str, Optional[str]]) -> None:
        by_section: Dict[str, Dict[str, str]] = {name: {} for name in SECTIONS}
        for key, value in raw.items():
            if value is None:
                raise ValueError(f"Config key '{key}' has no value")
            if "." not in key:
                if key not in TOP_LEVEL_KEYS:
                    raise ValueError(
                        f"Unknown config key '{key}'. Top-level keys: {', '.join(TOP_LEVEL_KEYS)}"
                    )
                continue
            section, field = key.split(".", 1)
            if section not in SECTIONS:
                raise ValueError(
                    f"Unknown config section '{section}' in key '{key}'. "
                    f"Valid sections: {', '.join(SECTIONS)}"
                )
            by_section[section][field] = value

        try:
            self.seed = int(raw.get("seed", 0) or 0)
            self.jobs = int(raw.get("jobs", 1) or 1)
        except ValueError as e:
            raise ValueError(f"seed and jobs must be integers: {e}") from None
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        self.debug_logging = str(raw.get("debug_logging", "false")).lower() == "true"

        for name, model in SECTIONS.items():
            values = by_section[name]
            seeded = SEEDED_FIELDS.get(name)
            if seeded and seeded not in values:
                values[seeded] = str(derive_seed(self.seed, name))
            try:
                setattr(self, name, model(**values))
            except ValidationError as e:
                raise ValueError(f"Invalid [{name}] configuration: {e}") from None

    def as_dict(self) -> dict:
        """Effective configuration as plain data (sections keyed by name)."""
        data = {"seed": self.seed, "jobs": self.jobs}
        for name in SECTIONS:
            data[name] = getattr(self, name).model_dump(mode="json")
        return data

    def digest(self) -> str:
        """Stable 16-hex-digit fingerprint of the effective configuration.

        ``jobs`` is excluded: output never depends on parallelism.
        """
        data = self.as_dict()
        data.pop("jobs")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def meta(self) -> Dict[str, str]:
        """Provenance fields embedded in every written artifact."""
        return {"config": self.digest(), "seed": str(self.seed)}
