"""Toy trainable feature extractor and per-level channel projections."""

import logging
from collections.abc import Callable

import torch
import torch.nn.functional as F
from torch import nn

from ufc_matcher.core.config import LevelPlan, LevelSpec
from ufc_matcher.core.exceptions import ConfigurationError, DimensionError
from ufc_matcher.core.numerics import conv2d, ensure_finite, matmul
from ufc_matcher.models.flow import FeatureMap

logger = logging.getLogger(__name__)

COARSEST_STRIDE = 8

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "gelu": F.gelu,
    "silu": F.silu,
    "tanh": torch.tanh,
}


def _he_normal(kh: int, kw: int, cin: int, cout: int) -> torch.Tensor:
    return torch.randn(kh, kw, cin, cout) * (2.0 / (kh * kw * cin)) ** 0.5


class ConvStage(nn.Module):
    """Stride-2 3x3 conv followed by a stride-1 3x3 conv, each with a pointwise nonlinearity."""

    def __init__(self, in_channels: int, out_channels: int, activation: str = "gelu") -> None:
        super().__init__()
        self.activation = ACTIVATIONS[activation]
        self.down_weight = nn.Parameter(_he_normal(3, 3, in_channels, out_channels))
        self.down_bias = nn.Parameter(torch.zeros(out_channels))
        self.refine_weight = nn.Parameter(_he_normal(3, 3, out_channels, out_channels))
        self.refine_bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.activation(conv2d(x, self.down_weight, stride=2, bias=self.down_bias))
        return self.activation(conv2d(x, self.refine_weight, stride=1, bias=self.refine_bias))


class Backbone(nn.Module):
    """Strided conv stack producing the finest ``depth`` levels of a plan.

    Stage ``s`` runs at stride ``2**s``; the finest level comes out of the first stage.
    """

    def __init__(self, plan: LevelPlan, activation: str = "gelu", depth: int = 3, in_channels: int = 3) -> None:
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"Unknown activation '{activation}'. Supported: {', '.join(ACTIVATIONS)}")
        if not 1 <= depth <= len(plan.levels):
            raise ConfigurationError(f"Backbone depth must lie in [1, {len(plan.levels)}], got {depth}")
        self.plan = plan
        self.depth = depth
        # fine-to-coarse stage order
        fine_to_coarse = list(reversed(plan.levels))[:depth]
        stages = []
        cin = in_channels
        for spec in fine_to_coarse:
            stages.append(ConvStage(cin, spec.raw_channels, activation))
            cin = spec.raw_channels
        self.stages = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor) -> list[FeatureMap]:
        return self.extract_pyramid(image)

    def extract_pyramid(self, image: torch.Tensor) -> list[FeatureMap]:
        """Feature maps ordered coarse to fine, tagged with their plan level."""
        if image.dim() != 3:
            raise DimensionError(f"Expected an H x W x C image, got shape {tuple(image.shape)}")
        h, w = image.shape[0], image.shape[1]
        if h % COARSEST_STRIDE or w % COARSEST_STRIDE:
            raise ConfigurationError(
                f"Image extents {h}x{w} must be divisible by the coarsest stride {COARSEST_STRIDE}"
            )
        maps = []
        x = image
        n_levels = len(self.plan.levels)
        for offset, stage in enumerate(self.stages):
            x = stage(x)
            maps.append(FeatureMap(level=n_levels - offset, grid=ensure_finite(x, f"backbone stage {offset + 1}")))
        return list(reversed(maps))


class LevelProjection(nn.Module):
    """Bias-free pointwise map from raw to projected channels, shared by both images."""

    def __init__(self, spec: LevelSpec, level: int) -> None:
        super().__init__()
        self.spec = spec
        self.level = level
        self.weight = nn.Parameter(torch.randn(spec.raw_channels, spec.proj_channels) / spec.raw_channels**0.5)

    def forward(self, feature: FeatureMap) -> FeatureMap:
        return self.project(feature)

    def project(self, feature: FeatureMap) -> FeatureMap:
        if feature.channels != self.weight.shape[0]:
            raise DimensionError(
                f"Level {self.level} projection expects {self.weight.shape[0]} channels, got {feature.channels}"
            )
        out = matmul(feature.tokens(), self.weight)
        return FeatureMap(level=feature.level, grid=out.reshape(feature.height, feature.width, -1))


def l2_normalize(feature: FeatureMap) -> FeatureMap:
    """Unit-norm channel vector per pixel; zero vectors stay zero."""
    return FeatureMap(level=feature.level, grid=F.normalize(feature.grid, p=2.0, dim=-1, eps=1e-12))
