"""PCA renders of feature maps, cost-volume slices and confidence maps."""

import logging
from pathlib import Path

import torch

from ufc_matcher.core.exceptions import DimensionError
from ufc_matcher.core.numerics import bilinear_resize
from ufc_matcher.models.flow import ConfidenceMap, CostVolume, FeatureMap
from ufc_matcher.services.cost_volume import cost_slice
from ufc_matcher.services.flow_io import write_image
from ufc_matcher.services.pyramid import UFCMatcher

logger = logging.getLogger(__name__)

PCA_COMPONENTS = 3
FLAT_EPS = 1e-12


def _min_max(values: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    """Scale to ``[0, 1]``; a constant range maps to zero."""
    if dim is None:
        low, high = values.min(), values.max()
    else:
        low, high = values.min(dim=dim, keepdim=True).values, values.max(dim=dim, keepdim=True).values
    span = high - low
    return torch.where(span > FLAT_EPS, (values - low) / span.clamp_min(FLAT_EPS), torch.zeros_like(values))


def pca_rgb(d_s: FeatureMap, d_t: FeatureMap) -> tuple[torch.Tensor, torch.Tensor]:
    """Top three principal components of both maps, fitted jointly, as RGB images.

    Components are sign-fixed so their largest loading is positive. A map without variance
    renders as a single color.
    """
    if d_s.channels != d_t.channels:
        raise DimensionError(f"Channel mismatch: source {d_s.channels}, target {d_t.channels}")
    tokens = torch.cat([d_s.tokens(), d_t.tokens()]).detach()
    centered = tokens - tokens.mean(dim=0, keepdim=True)
    _, _, vh = torch.linalg.svd(centered, full_matrices=False)
    basis = vh[:PCA_COMPONENTS]
    signs = torch.sign(basis.gather(1, basis.abs().argmax(dim=1, keepdim=True)))
    basis = basis * torch.where(signs == 0, torch.ones_like(signs), signs)
    projected = centered @ basis.transpose(0, 1)
    if projected.shape[1] < PCA_COMPONENTS:
        pad = torch.zeros(projected.shape[0], PCA_COMPONENTS - projected.shape[1], dtype=projected.dtype)
        projected = torch.cat([projected, pad], dim=1)
    rgb = _min_max(projected, dim=0)
    n_s = d_s.height * d_s.width
    return (
        rgb[:n_s].reshape(d_s.height, d_s.width, PCA_COMPONENTS),
        rgb[n_s:].reshape(d_t.height, d_t.width, PCA_COMPONENTS),
    )


def cost_slice_image(cost: CostVolume, x: int, y: int) -> torch.Tensor:
    """Grayscale source map for target pixel ``(x, y)``, min-max normalized per slice."""
    return _min_max(cost_slice(cost, x, y).detach())


def confidence_image(confidence: ConfidenceMap) -> torch.Tensor:
    """Bright where the cycle error is small; invalid pixels are black."""
    error = confidence.cycle_error.detach()
    valid = confidence.valid
    if not bool(valid.any()):
        return torch.zeros_like(error)
    scale = error[valid].max().clamp_min(FLAT_EPS)
    return torch.where(valid, 1.0 - (error / scale).clamp(0.0, 1.0), torch.zeros_like(error))


def _grid_pixel(x: int, y: int, size: int, extent: int) -> tuple[int, int]:
    """Map an image pixel to the matching cell of an ``extent x extent`` grid."""
    scale = extent / size
    return min(extent - 1, max(0, int(x * scale))), min(extent - 1, max(0, int(y * scale)))


class VisualizationService:
    """Writes the per-level PCA and cost-slice renders of one image pair."""

    def __init__(self, model: UFCMatcher) -> None:
        self.model = model

    def render(self, image_s: torch.Tensor, image_t: torch.Tensor, x: int, y: int, out_dir: Path) -> list[Path]:
        """Renders for the raw, self-attended and aggregated stages of every level.

        ``(x, y)`` is a target pixel in input-image coordinates.
        """
        if image_s.shape != image_t.shape or image_s.dim() != 3:
            raise DimensionError(
                "Source and target must be matching H x W x C images, "
                f"got {tuple(image_s.shape)} and {tuple(image_t.shape)}"
            )
        h, w = image_t.shape[0], image_t.shape[1]
        if not (0 <= x < w and 0 <= y < h):
            raise DimensionError(f"Target pixel ({x}, {y}) outside the {w}x{h} image")
        n = self.model.input_size
        with torch.no_grad():
            out = self.model(bilinear_resize(image_s, n, n), bilinear_resize(image_t, n, n), keep_traces=True)

        out_dir = Path(out_dir)
        paths: list[Path] = []
        for trace, level in zip(out.traces, out.levels, strict=True):
            stages = {
                "raw": (trace.raw_source, trace.raw_target, trace.raw_cost),
                "self": (trace.self_source, trace.self_target, trace.self_cost),
                "aggregated": (level.source, level.target, level.cost),
            }
            extent = trace.raw_cost.target_shape[0]
            gx, gy = _grid_pixel(int(x * n / w), int(y * n / h), n, extent)
            for stage, (d_s, d_t, cost) in stages.items():
                rgb_s, rgb_t = pca_rgb(d_s, d_t)
                prefix = f"level{trace.level}_{stage}"
                paths.append(write_image(rgb_s, out_dir / f"{prefix}_pca_source.png"))
                paths.append(write_image(rgb_t, out_dir / f"{prefix}_pca_target.png"))
                paths.append(write_image(cost_slice_image(cost, gx, gy), out_dir / f"{prefix}_cost_slice.png"))
            logger.info(f"Level {trace.level}: rendered slices for grid pixel ({gx}, {gy})")
        return paths
