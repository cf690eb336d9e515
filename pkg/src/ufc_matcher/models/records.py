"""Line-delimited record models for manifests and reports."""

from pathlib import Path

from pydantic import BaseModel, Field

from ufc_matcher.core.config import VariantTag, WarpKind
from ufc_matcher.models.flow import WarpSpec


class PairRecord(BaseModel):
    """One synthetic pair in the dataset manifest."""

    pair_id: str
    seed: int
    warp_kind: WarpKind
    strength: float = Field(..., gt=0, le=1)
    base: str = Field(..., description="Procedural texture name or user image file name")
    source_path: Path
    target_path: Path
    flow_path: Path
    warp: WarpSpec


class EpochRecord(BaseModel):
    """One point of the training loss curve."""

    epoch: int = Field(..., ge=0)
    train_loss: float | None = None
    val_aepe: float
    best: bool = False
    seconds: float = 0.0


class EvalRecord(BaseModel):
    """Per-pair evaluation row."""

    pair_id: str
    aepe: float
    pck: dict[str, float]
    pck_px: float


class EvalSummary(BaseModel):
    """Summary row averaged over all evaluated pairs."""

    pair_id: str = "summary"
    pairs: int
    aepe: float
    pck: dict[str, float]
    pck_px: float


class AblationRun(BaseModel):
    """Validation AEPE of one variant trained with one seed."""

    variant: VariantTag
    seed: int
    parameters: int
    val_aepe: float


class AblationRow(BaseModel):
    """Per-variant aggregate over the seed set."""

    variant: VariantTag
    parameters: int
    budget_ratio: float
    median_aepe: float
    seed_aepe: list[float]


class DirectionCheck(BaseModel):
    """Soft directional expectation between two variants."""

    name: str
    better: VariantTag
    worse: VariantTag
    passed: bool | None = None
