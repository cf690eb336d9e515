"""Coarse-to-fine matcher and the soft-argmax flow head."""

import logging

import torch
from torch import nn

from ufc_matcher.core.config import ModelOptions
from ufc_matcher.core.exceptions import ConfigurationError, ContractError, DimensionError, DomainError
from ufc_matcher.core.numerics import bilinear_resize, ensure_finite, matmul, pixel_grid, softmax
from ufc_matcher.models.flow import CostVolume, FeatureMap, FlowField, LevelOutput, LevelTrace, ModelOutput
from ufc_matcher.services.aggregation import AttentionBlock
from ufc_matcher.services.backbone import Backbone, LevelProjection, l2_normalize
from ufc_matcher.services.cost_volume import build, final_cost, residual_add, upsample_cost

logger = logging.getLogger(__name__)


def soft_argmax(cost: CostVolume, temperature: float = 0.02) -> FlowField:
    """Expected source position per target pixel minus that pixel, in cost-grid pixels."""
    if temperature <= 0:
        raise DomainError(f"soft-argmax temperature must be positive, got {temperature}")
    hs, ws = cost.source_shape
    ht, wt = cost.target_shape
    probabilities = softmax(cost.as_matrix(), axis=0, temperature=temperature)
    source_pos = pixel_grid(hs, ws, dtype=cost.grid.dtype).reshape(-1, 2)
    target_pos = pixel_grid(ht, wt, dtype=cost.grid.dtype)
    expected = matmul(probabilities.transpose(0, 1), source_pos).reshape(ht, wt, 2)
    return FlowField.with_bounds(expected - target_pos)


def upscale_flow(flow: FlowField, height: int, width: int) -> FlowField:
    """Resize a flow to ``height x width`` and multiply displacements by the per-axis scale."""
    if (height, width) == (flow.height, flow.width):
        return flow
    grid = bilinear_resize(flow.grid, height, width)
    scale = torch.tensor([width / flow.width, height / flow.height], dtype=grid.dtype)
    return FlowField.with_bounds(grid * scale)


def epe_loss(pred: FlowField, gt: FlowField) -> torch.Tensor:
    """Mean endpoint error over pixels where the ground truth is valid."""
    if pred.grid.shape != gt.grid.shape:
        raise DimensionError(f"Flow shapes differ: {tuple(pred.grid.shape)} vs {tuple(gt.grid.shape)}")
    mask = gt.valid
    if not bool(mask.any()):
        raise ContractError("EPE loss needs at least one valid ground-truth pixel")
    errors = torch.linalg.vector_norm(pred.grid - gt.grid, ord=2, dim=-1)
    return errors[mask].mean()


class UFCMatcher(nn.Module):
    """Backbone, per-level projections and attention blocks run coarse to fine.

    With ``hierarchical`` off only the finest level is built.
    """

    def __init__(self, options: ModelOptions) -> None:
        super().__init__()
        self.options = options
        plan = options.plan
        self.levels = list(range(1, len(plan.levels) + 1)) if options.hierarchical else [len(plan.levels)]
        self.backbone = Backbone(plan, options.activation, depth=len(self.levels))
        self.projections = nn.ModuleList(LevelProjection(plan.level(lv), lv) for lv in self.levels)
        self.blocks = nn.ModuleList(AttentionBlock(plan.level(lv), lv, options) for lv in self.levels)
        # channel lift for the upsample-add of aggregated features into the next level
        self.lifts = nn.ParameterList(
            nn.Parameter(
                torch.randn(plan.level(coarse).proj_channels, plan.level(fine).proj_channels)
                / plan.level(coarse).proj_channels ** 0.5
            )
            for coarse, fine in zip(self.levels, self.levels[1:], strict=False)
        )

    @property
    def input_size(self) -> int:
        return self.options.plan.input_size

    def _propagate(self, d: FeatureMap, aggregated: FeatureMap, lift: torch.Tensor) -> FeatureMap:
        lifted = matmul(aggregated.tokens(), lift).reshape(aggregated.height, aggregated.width, -1)
        up = bilinear_resize(lifted, d.height, d.width)
        return FeatureMap(level=d.level, grid=d.grid + up)

    def _check_images(self, image_s: torch.Tensor, image_t: torch.Tensor) -> int:
        if image_s.shape != image_t.shape or image_s.dim() != 3:
            raise DimensionError(
                "Source and target must be matching H x W x C images, "
                f"got {tuple(image_s.shape)} and {tuple(image_t.shape)}"
            )
        h, w = image_s.shape[0], image_s.shape[1]
        if h != w or h % self.input_size:
            raise ConfigurationError(
                f"Images must be square with extents divisible by the plan input size {self.input_size}, got {h}x{w}"
            )
        return h

    def forward(self, image_s: torch.Tensor, image_t: torch.Tensor, keep_traces: bool = False) -> ModelOutput:
        size = self._check_images(image_s, image_t)
        if size != self.input_size:
            image_s = bilinear_resize(image_s, self.input_size, self.input_size)
            image_t = bilinear_resize(image_t, self.input_size, self.input_size)
        raw_s = self.backbone.extract_pyramid(image_s)
        raw_t = self.backbone.extract_pyramid(image_t)

        outputs: list[LevelOutput] = []
        traces: list[LevelTrace] = []
        prev: LevelOutput | None = None
        for idx, (projection, block) in enumerate(zip(self.projections, self.blocks, strict=True)):
            d_s = projection(raw_s[idx])
            d_t = projection(raw_t[idx])
            if prev is not None:
                d_s = self._propagate(d_s, prev.source, self.lifts[idx - 1])
                d_t = self._propagate(d_t, prev.target, self.lifts[idx - 1])
            cost = build(l2_normalize(d_s), l2_normalize(d_t))
            raw_cost = cost
            if prev is not None:
                cost = residual_add(cost, upsample_cost(prev.cost, d_s.level, d_s.height, d_s.width))
            out_s, out_t, out_c, (self_s, self_t, self_c) = block.run(d_s, d_t, cost)
            prev = LevelOutput(level=d_s.level, source=out_s, target=out_t, cost=out_c)
            outputs.append(prev)
            if keep_traces:
                traces.append(
                    LevelTrace(
                        level=d_s.level,
                        raw_source=d_s,
                        raw_target=d_t,
                        raw_cost=raw_cost,
                        self_source=self_s,
                        self_target=self_t,
                        self_cost=self_c,
                    )
                )

        c_star = final_cost([o.cost for o in outputs])
        ensure_finite(c_star.grid, "final cost")
        grid_flow = soft_argmax(c_star, self.options.temperature)
        flow = upscale_flow(grid_flow, size, size)
        return ModelOutput(levels=outputs, final_cost=c_star, flow=flow, grid_flow=grid_flow.grid, traces=traces)

    def predict(self, image_s: torch.Tensor, image_t: torch.Tensor) -> FlowField:
        """Flow for images of any extent: both are resized to the input size and the flow is rescaled per axis."""
        if image_s.shape != image_t.shape or image_s.dim() != 3:
            raise DimensionError(
                "Source and target must be matching H x W x C images, "
                f"got {tuple(image_s.shape)} and {tuple(image_t.shape)}"
            )
        h, w = image_s.shape[0], image_s.shape[1]
        n = self.input_size
        out = self(bilinear_resize(image_s, n, n), bilinear_resize(image_t, n, n))
        return upscale_flow(FlowField.with_bounds(out.grid_flow), h, w)
