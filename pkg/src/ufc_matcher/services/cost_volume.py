"""4D cost volume construction, resampling and separable convolution."""

import torch

from ufc_matcher.core.exceptions import ContractError, DimensionError
from ufc_matcher.core.numerics import bilinear_resize, matmul, plane_conv2d
from ufc_matcher.models.flow import CostVolume, FeatureMap


def identity_kernel(size: int = 3) -> torch.Tensor:
    """Odd ``size x size`` kernel with a single one at the centre."""
    kernel = torch.zeros(size, size)
    kernel[size // 2, size // 2] = 1.0
    return kernel


def build(d_s: FeatureMap, d_t: FeatureMap) -> CostVolume:
    """All pairwise dot products, computed as one ``(hw x c) . (c x hw)`` product."""
    if d_s.level != d_t.level:
        raise ContractError(f"Cannot build a cost volume across levels {d_s.level} and {d_t.level}")
    if d_s.channels != d_t.channels:
        raise DimensionError(f"Channel mismatch: source {d_s.channels}, target {d_t.channels}")
    scores = matmul(d_s.tokens(), d_t.tokens().transpose(0, 1))
    return CostVolume(level=d_s.level, grid=scores.reshape(d_s.height, d_s.width, d_t.height, d_t.width))


def cost_slice(cost: CostVolume, x: int, y: int) -> torch.Tensor:
    """Similarity map over all source positions for target pixel ``(x, y)``."""
    ht, wt = cost.target_shape
    if not (0 <= x < wt and 0 <= y < ht):
        raise ContractError(f"Target pixel ({x}, {y}) outside the {wt}x{ht} target grid")
    return cost.grid[:, :, y, x]


def conv4d_separable(cost: CostVolume, k_src: torch.Tensor, k_tgt: torch.Tensor) -> CostVolume:
    """Same-padded 2D conv over the source axes with ``k_src``, then over the target axes with ``k_tgt``."""
    hs, ws = cost.source_shape
    ht, wt = cost.target_shape
    planes = cost.grid.permute(2, 3, 0, 1).reshape(ht * wt, hs, ws)
    planes = plane_conv2d(planes, k_src)
    grid = planes.reshape(ht, wt, hs, ws).permute(2, 3, 0, 1)
    planes = plane_conv2d(grid.reshape(hs * ws, ht, wt), k_tgt)
    return CostVolume(level=cost.level, grid=planes.reshape(hs, ws, ht, wt))


def residual_add(c_a: CostVolume, c_b: CostVolume) -> CostVolume:
    if c_a.grid.shape != c_b.grid.shape:
        raise DimensionError(
            f"Cannot add cost volumes of shapes {tuple(c_a.grid.shape)} and {tuple(c_b.grid.shape)}"
        )
    return CostVolume(level=max(c_a.level, c_b.level), grid=c_a.grid + c_b.grid)


def upsample_cost(cost: CostVolume, level: int, height: int, width: int) -> CostVolume:
    """Bilinear resize over the source axes, then over the target axes, to ``height x width``."""
    if level < cost.level:
        raise ContractError(f"Cannot upsample a level {cost.level} cost volume to coarser level {level}")
    hs, ws = cost.source_shape
    ht, wt = cost.target_shape
    grid = bilinear_resize(cost.grid.reshape(hs, ws, ht * wt), height, width)
    grid = grid.reshape(height * width, ht, wt).permute(1, 2, 0)
    grid = bilinear_resize(grid, height, width)
    grid = grid.permute(2, 0, 1).reshape(height, width, height, width)
    return CostVolume(level=level, grid=grid)


def final_cost(per_level: list[CostVolume]) -> CostVolume:
    """Upsample every level to the finest one and sum."""
    if not per_level:
        raise ContractError("final_cost needs at least one level")
    ordered = sorted(per_level, key=lambda c: c.level)
    finest = ordered[-1]
    h, w = finest.source_shape
    total = finest.grid
    for cost in ordered[:-1]:
        total = total + upsample_cost(cost, finest.level, h, w).grid
    return CostVolume(level=finest.level, grid=total)
