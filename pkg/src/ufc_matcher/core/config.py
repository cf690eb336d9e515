"""Application configuration settings.

Settings live in a flat ``key = value`` file (``#`` starts a comment, lists are comma
separated, an empty value means "unset"). Values in the file win over ``UFC_*``
environment variables, which win over the defaults below.
"""

from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from ufc_matcher.core.exceptions import ConfigurationError


class AttentionKind(str, Enum):
    """Normalization used by the self-attention layers."""

    LINEAR = "linear"
    SOFTMAX = "softmax"


class SelfAttentionKind(str, Enum):
    """What the self-attention layers aggregate."""

    INTEGRATIVE = "integrative"
    FEATURE = "feature"
    COST = "cost"
    SEQUENTIAL = "sequential"


class CrossAttentionKind(str, Enum):
    """Which attention map the cross-attention layers use."""

    MATCHING = "matching"
    FEATURE = "feature"
    NONE = "none"


class WarpKind(str, Enum):
    """Parametric families used for synthetic supervision."""

    AFFINE = "affine"
    HOMOGRAPHY = "homography"
    TPS = "tps"


class VariantTag(str, Enum):
    """Model variants compared by the ablation harness."""

    FEAT_SELF = "feat-self"
    FEAT_SELF_CROSS = "feat-self-cross"
    COST_SELF = "cost-self"
    SEQUENTIAL = "sequential"
    INTEGRATIVE = "integrative"
    MATCHING_DIST = "+matching-dist"
    HIERARCHY = "+hierarchy"
    ZOOM = "+zoom"


class LevelSpec(BaseModel):
    """One pyramid level: grid extent and raw/projected channel counts."""

    extent: int = Field(..., ge=1)
    raw_channels: int = Field(..., ge=1)
    proj_channels: int = Field(..., ge=1)


class LevelPlan(BaseModel):
    """Three square levels ordered coarse to fine, each doubling the previous extent."""

    levels: list[LevelSpec]

    @model_validator(mode="after")
    def validate_levels(self) -> "LevelPlan":
        if len(self.levels) != 3:
            raise ValueError(f"A level plan has exactly 3 levels, got {len(self.levels)}")
        for coarse, fine in zip(self.levels, self.levels[1:], strict=False):
            if fine.extent != 2 * coarse.extent:
                raise ValueError(
                    f"Each finer level must double the coarser extent: {coarse.extent} -> {fine.extent}"
                )
        return self

    @property
    def input_size(self) -> int:
        """Network input extent; the finest level sits at stride 2."""
        return 2 * self.levels[-1].extent

    @property
    def finest(self) -> LevelSpec:
        return self.levels[-1]

    def level(self, index: int) -> LevelSpec:
        """Level by 1-based index (1 = coarsest)."""
        return self.levels[index - 1]

    @classmethod
    def from_lists(cls, extents: list[int], raw: list[int], proj: list[int]) -> "LevelPlan":
        if not len(extents) == len(raw) == len(proj):
            raise ValueError("level_extents, level_raw_channels and level_proj_channels must have equal length")
        return cls(
            levels=[
                LevelSpec(extent=e, raw_channels=r, proj_channels=p)
                for e, r, p in zip(extents, raw, proj, strict=True)
            ]
        )


LEVEL_PRESETS: dict[str, tuple[list[int], list[int], list[int]]] = {
    "desk": ([8, 16, 32], [96, 64, 48], [48, 32, 24]),
    "paper": ([16, 32, 64], [2048, 1024, 512], [384, 256, 128]),
    "mini": ([2, 4, 8], [8, 8, 8], [6, 6, 6]),
    "toy": ([1, 2, 4], [4, 4, 4], [4, 4, 4]),
}


class ModelOptions(BaseModel):
    """Architecture switches shared by every level of the network."""

    plan: LevelPlan
    attention_kind: AttentionKind = AttentionKind.LINEAR
    self_attention: SelfAttentionKind = SelfAttentionKind.INTEGRATIVE
    cross_attention: CrossAttentionKind = CrossAttentionKind.MATCHING
    hierarchical: bool = True
    heads: int = Field(1, ge=1)
    n_blocks: int = 2
    key_dim: int | None = Field(None, ge=1)
    mlp_ratio: int = Field(2, ge=1)
    ffn_hidden: int | None = Field(None, ge=1)
    positional_embedding: bool = True
    activation: Literal["gelu", "silu", "tanh"] = "gelu"
    temperature: float = Field(0.02, gt=0)

    def key_dim_for(self, level: LevelSpec) -> int:
        return self.key_dim or level.proj_channels


def _check_k_list(k_list: list[int]) -> list[int]:
    if any(k < 2 for k in k_list):
        raise ValueError(f"Every zoom-in k must be at least 2, got {k_list}")
    if len(set(k_list)) != len(k_list):
        raise ValueError(f"Zoom-in k values must be distinct, got {k_list}")
    return k_list


class ZoomConfig(BaseModel):
    """Dense zoom-in partitioning."""

    k_list: list[int] = [3, 4, 5]
    min_window: int = Field(8, ge=1)

    @field_validator("k_list")
    @classmethod
    def validate_k_list(cls: type["ZoomConfig"], k_list: list[int]) -> list[int]:
        return _check_k_list(k_list)


_LIST_FIELDS = {
    "level_extents",
    "level_raw_channels",
    "level_proj_channels",
    "zoom_k_list",
    "dataset_warp_kinds",
    "pck_alphas",
    "ablation_variants",
    "ablation_seeds",
}


class Settings(BaseSettings):
    """Application settings."""

    # Network
    level_plan: Literal["desk", "paper", "mini", "toy"] = "desk"
    level_extents: list[int] | None = None
    level_raw_channels: list[int] | None = None
    level_proj_channels: list[int] | None = None
    attention_kind: AttentionKind = AttentionKind.LINEAR
    self_attention: SelfAttentionKind = SelfAttentionKind.INTEGRATIVE
    cross_attention: CrossAttentionKind = CrossAttentionKind.MATCHING
    hierarchical: bool = True
    heads: int = 1
    n_blocks: int = 2
    key_dim: int | None = None
    mlp_ratio: int = 2
    ffn_hidden: int | None = None
    positional_embedding: bool = True
    activation: Literal["gelu", "silu", "tanh"] = "gelu"
    temperature: float = 0.02  # soft-argmax temperature
    precision: Literal["float32", "float64"] = "float32"

    # Dense zoom-in
    zoom_k_list: list[int] = [3, 4, 5]
    zoom_min_window: int = 8

    # Optimizer (AdamW)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4

    # Training
    epochs: int = 30
    batch_size: int = 4
    freeze_backbone: bool = False
    val_fraction: float = 0.2

    # Synthetic dataset
    dataset_seed: int = 0
    dataset_strength: float = 0.5
    dataset_count: int = 200
    dataset_image_size: int = 256
    dataset_warp_kinds: list[WarpKind] = [WarpKind.AFFINE, WarpKind.HOMOGRAPHY, WarpKind.TPS]

    # Evaluation
    pck_alphas: list[float] = [0.01, 0.03, 0.05, 0.1, 0.15]
    pck_px: float = 5.0

    # Ablation harness
    ablation_variants: list[VariantTag] = list(VariantTag)
    ablation_seeds: list[int] = [0, 1, 2]
    ablation_epochs: int = 5
    ablation_budget_tolerance: float = 0.1

    # Paths
    data_dir: Path = Path("data/synthetic")
    output_dir: Path = Path("outputs")
    checkpoint_path: Path = Path("outputs/checkpoint.pt")
    image_dir: Path | None = None

    # Runtime
    seed: int = 0
    threads: int = 1

    model_config = SettingsConfigDict(
        env_prefix="UFC_",
        case_sensitive=False,
        extra="forbid",
    )

    @model_validator(mode="before")
    @classmethod
    def parse_flat_values(cls: type["Settings"], data: Any) -> Any:
        """Turn raw ``key = value`` strings into typed inputs."""
        if not isinstance(data, dict):
            return data
        parsed = {}
        for key, value in data.items():
            if isinstance(value, str):
                value = value.strip()
                if value == "":
                    value = None
                elif key in _LIST_FIELDS and not value.startswith("["):
                    value = [item.strip() for item in value.split(",") if item.strip()]
            parsed[key] = value
        return parsed

    @field_validator("zoom_k_list")
    @classmethod
    def validate_zoom_k_list(cls: type["Settings"], k_list: list[int]) -> list[int]:
        return _check_k_list(k_list)

    @model_validator(mode="after")
    def validate_ranges(self) -> "Settings":
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be at least 1")
        if not 0 < self.dataset_strength <= 1:
            raise ValueError("dataset_strength must lie in (0, 1]")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.threads < 1 or self.batch_size < 1:
            raise ValueError("threads and batch_size must be positive")
        return self

    def level_plan_model(self) -> LevelPlan:
        """Preset level plan with any per-list overrides applied."""
        extents, raw, proj = LEVEL_PRESETS[self.level_plan]
        try:
            return LevelPlan.from_lists(
                self.level_extents or extents,
                self.level_raw_channels or raw,
                self.level_proj_channels or proj,
            )
        except ValueError as e:
            raise ConfigurationError(f"Invalid level plan: {e}") from e

    def model_options(self, **overrides: Any) -> ModelOptions:
        options = {
            "plan": self.level_plan_model(),
            "attention_kind": self.attention_kind,
            "self_attention": self.self_attention,
            "cross_attention": self.cross_attention,
            "hierarchical": self.hierarchical,
            "heads": self.heads,
            "n_blocks": self.n_blocks,
            "key_dim": self.key_dim,
            "mlp_ratio": self.mlp_ratio,
            "ffn_hidden": self.ffn_hidden,
            "positional_embedding": self.positional_embedding,
            "activation": self.activation,
            "temperature": self.temperature,
        }
        options.update(overrides)
        return ModelOptions(**options)

    def zoom_config(self) -> ZoomConfig:
        return ZoomConfig(k_list=self.zoom_k_list, min_window=self.zoom_min_window)


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, list):
        return ",".join(_format_value(item) for item in value)
    return str(value)


def dump_settings(settings: Settings) -> str:
    """Serialize settings to the flat ``key = value`` format, one field per line."""
    lines = [f"{name} = {_format_value(getattr(settings, name))}" for name in Settings.model_fields]
    return "\n".join(lines) + "\n"


def parse_settings_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"Line {lineno}: expected 'key = value', got '{raw_line.strip()}'")
        key, value = line.split("=", 1)
        key = key.strip().lower()
        if key in values:
            raise ConfigurationError(f"Line {lineno}: duplicate key '{key}'")
        values[key] = value.strip()
    return values


def load_settings(path: Path | None = None, **overrides: Any) -> Settings:
    """Load settings from a flat config file; keyword overrides win over the file."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigurationError(f"Cannot read config file {path}: {e}") from e
        values.update(parse_settings_text(text))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return Settings(**values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
