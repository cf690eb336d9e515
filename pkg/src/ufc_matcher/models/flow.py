"""Dense matching data models."""

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ufc_matcher.core.config import WarpKind


class TensorModel(BaseModel):
    """Base for immutable models that carry torch tensors."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class FeatureMap(TensorModel):
    """Per-level dense descriptor grid (``h x w x c``)."""

    level: int = Field(..., ge=1, le=3)
    grid: torch.Tensor

    @field_validator("grid")
    @classmethod
    def validate_grid(cls: type["FeatureMap"], grid: torch.Tensor) -> torch.Tensor:
        if grid.dim() != 3:
            raise ValueError(f"Feature grid must be h x w x c, got shape {tuple(grid.shape)}")
        return grid

    @property
    def height(self) -> int:
        return int(self.grid.shape[0])

    @property
    def width(self) -> int:
        return int(self.grid.shape[1])

    @property
    def channels(self) -> int:
        return int(self.grid.shape[2])

    def tokens(self) -> torch.Tensor:
        """Row-major ``hw x c`` view of the grid."""
        return self.grid.reshape(-1, self.channels)


class CostVolume(TensorModel):
    """Pairwise similarities indexed ``(i_source_row, i_source_col, j_target_row, j_target_col)``.

    Storage is source-major: slicing by a target pixel is strided.
    """

    level: int = Field(..., ge=1, le=3)
    grid: torch.Tensor

    @field_validator("grid")
    @classmethod
    def validate_grid(cls: type["CostVolume"], grid: torch.Tensor) -> torch.Tensor:
        if grid.dim() != 4:
            raise ValueError(f"Cost grid must be 4D, got shape {tuple(grid.shape)}")
        return grid

    @property
    def source_shape(self) -> tuple[int, int]:
        return int(self.grid.shape[0]), int(self.grid.shape[1])

    @property
    def target_shape(self) -> tuple[int, int]:
        return int(self.grid.shape[2]), int(self.grid.shape[3])

    def as_matrix(self) -> torch.Tensor:
        """``hw_source x hw_target`` view."""
        hs, ws = self.source_shape
        ht, wt = self.target_shape
        return self.grid.reshape(hs * ws, ht * wt)


class FlowField(TensorModel):
    """Backward-warp flow over the target grid.

    ``grid[y, x] = (dx, dy)``: target pixel ``(x, y)`` matches source location
    ``(x + dx, y + dy)``. ``valid`` is false where that location leaves the image.
    """

    grid: torch.Tensor
    valid: torch.Tensor

    @model_validator(mode="after")
    def validate_shapes(self) -> "FlowField":
        if self.grid.dim() != 3 or self.grid.shape[-1] != 2:
            raise ValueError(f"Flow grid must be H x W x 2, got shape {tuple(self.grid.shape)}")
        if self.valid.shape != self.grid.shape[:2] or self.valid.dtype != torch.bool:
            raise ValueError("Flow validity must be a boolean H x W mask matching the grid")
        if not bool(torch.isfinite(self.grid).all()):
            raise ValueError("Flow grid contains non-finite values")
        return self

    @property
    def height(self) -> int:
        return int(self.grid.shape[0])

    @property
    def width(self) -> int:
        return int(self.grid.shape[1])

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(
            grid=torch.zeros(height, width, 2),
            valid=torch.ones(height, width, dtype=torch.bool),
        )

    @classmethod
    def constant(cls, height: int, width: int, dx: float, dy: float) -> "FlowField":
        grid = torch.zeros(height, width, 2)
        grid[..., 0] = dx
        grid[..., 1] = dy
        return cls.with_bounds(grid)

    @classmethod
    def with_bounds(cls, grid: torch.Tensor, valid: torch.Tensor | None = None) -> "FlowField":
        """Build a flow whose mask also excludes targets that map outside the image."""
        h, w = grid.shape[0], grid.shape[1]
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=grid.dtype), torch.arange(w, dtype=grid.dtype), indexing="ij"
        )
        sx = xs + grid[..., 0]
        sy = ys + grid[..., 1]
        inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
        if valid is not None:
            inside = inside & valid
        return cls(grid=grid, valid=inside.detach())

    def detach(self) -> "FlowField":
        return FlowField(grid=self.grid.detach(), valid=self.valid)


class ConfidenceMap(TensorModel):
    """Round-trip distances in pixels; lower means more confident."""

    cycle_error: torch.Tensor
    valid: torch.Tensor

    @model_validator(mode="after")
    def validate_errors(self) -> "ConfidenceMap":
        if self.cycle_error.dim() != 2 or self.valid.shape != self.cycle_error.shape:
            raise ValueError("Cycle error and validity must be matching H x W arrays")
        on_valid = self.cycle_error[self.valid]
        if not bool(torch.isfinite(on_valid).all()) or bool((on_valid < 0).any()):
            raise ValueError("Cycle error must be finite and nonnegative on valid pixels")
        return self

    def selection_cost(self) -> torch.Tensor:
        """Cycle error with invalid pixels pushed to +inf."""
        return torch.where(self.valid, self.cycle_error, torch.full_like(self.cycle_error, float("inf")))


class Keypoint(BaseModel):
    """Continuous pixel position, optionally tagged with a pair id."""

    x: float = Field(..., ge=0)
    y: float = Field(..., ge=0)
    pair_id: str | None = None


class TransferredKeypoint(Keypoint):
    """Keypoint transferred through a flow; ``matched`` is false past the distance threshold."""

    matched: bool = True
    residual: float = 0.0


class WarpSpec(BaseModel):
    """Parametric ground-truth warp mapping source points to target points.

    Coordinates are centred and normalized: ``u = (x - (W - 1) / 2) / S`` and
    ``v = (y - (H - 1) / 2) / S`` with ``S = max(H, W)``, so one spec applies at any
    resolution. Affine and homography warps store a 3x3 matrix; TPS warps store source
    control nodes and the target positions they move to.
    """

    kind: WarpKind
    matrix: list[list[float]] | None = None
    nodes: list[tuple[float, float]] | None = None
    displaced: list[tuple[float, float]] | None = None
    seed: int | None = None
    strength: float | None = Field(None, gt=0, le=1)
    ranges: dict[str, float] = Field(default_factory=dict)

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def validate_parameters(self) -> "WarpSpec":
        if self.kind == WarpKind.TPS:
            if self.nodes is None or self.displaced is None:
                raise ValueError("TPS warps need nodes and displaced positions")
            if len(self.nodes) != len(self.displaced):
                raise ValueError("TPS nodes and displaced positions must have equal length")
            side = round(len(self.nodes) ** 0.5)
            if side * side != len(self.nodes) or side < 3:
                raise ValueError(f"TPS control grid must be square and at least 3x3, got {len(self.nodes)} nodes")
            return self
        if self.matrix is None:
            raise ValueError(f"{self.kind.value} warps need a 3x3 matrix")
        if len(self.matrix) != 3 or any(len(row) != 3 for row in self.matrix):
            raise ValueError("Warp matrix must be 3x3")
        if self.kind == WarpKind.AFFINE and self.matrix[2] != [0.0, 0.0, 1.0]:
            raise ValueError("Affine warp matrix must have last row (0, 0, 1)")
        if abs(float(np.linalg.det(np.asarray(self.matrix)))) <= 1e-6:
            raise ValueError("Warp matrix is not invertible")
        return self

    @classmethod
    def identity(cls) -> "WarpSpec":
        return cls(kind=WarpKind.AFFINE, matrix=np.eye(3).tolist())

    @classmethod
    def translation(cls, tx: float, ty: float, height: int, width: int) -> "WarpSpec":
        """Affine spec moving every source pixel by ``(tx, ty)`` pixels at the given size."""
        extent = max(height, width)
        matrix = np.eye(3)
        matrix[0, 2] = tx / extent
        matrix[1, 2] = ty / extent
        return cls(kind=WarpKind.AFFINE, matrix=matrix.tolist())


class LevelOutput(TensorModel):
    """Aggregated features and cost of one pyramid level."""

    level: int = Field(..., ge=1, le=3)
    source: FeatureMap
    target: FeatureMap
    cost: CostVolume


class LevelTrace(TensorModel):
    """Intermediate stages kept for visualization."""

    level: int = Field(..., ge=1, le=3)
    raw_source: FeatureMap
    raw_target: FeatureMap
    raw_cost: CostVolume
    self_source: FeatureMap
    self_target: FeatureMap
    self_cost: CostVolume


class ModelOutput(TensorModel):
    """Per-level outputs, the summed cost and the decoded flow."""

    levels: list[LevelOutput]
    final_cost: CostVolume
    flow: FlowField
    grid_flow: torch.Tensor
    traces: list[LevelTrace] = Field(default_factory=list)


class ZoomTiming(BaseModel):
    """Run-time accounting for one partition count."""

    k: int
    windows: int
    seconds: float


class ZoomResult(TensorModel):
    """Selected zoom-in flow with its confidence and per-pixel candidate choice.

    ``selected[y, x]`` indexes ``candidates``; index 0 is the coarse flow.
    """

    flow: FlowField
    confidence: ConfidenceMap
    selected: torch.Tensor
    candidates: list[str]
    candidate_errors: list[torch.Tensor] = Field(default_factory=list)
    skipped_k: list[int] = Field(default_factory=list)
    timings: list[ZoomTiming] = Field(default_factory=list)
