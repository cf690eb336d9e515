"""Dense zoom-in inference.

Coarse alignment by warping, k x k window matching, transitive composition and per-pixel
selection of the candidate with the smallest cycle error.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor

import torch

from ufc_matcher.core.config import Settings, ZoomConfig, get_settings
from ufc_matcher.core.exceptions import ConfigurationError, ContractError, DimensionError
from ufc_matcher.core.numerics import bilinear_sample, pixel_grid
from ufc_matcher.models.flow import ConfidenceMap, FlowField, TensorModel, ZoomResult, ZoomTiming
from ufc_matcher.services.pyramid import UFCMatcher

logger = logging.getLogger(__name__)


class Window(TensorModel):
    """One tile of a partition; ``origin`` is ``(top, left)`` and ``size`` is ``(height, width)``."""

    image: torch.Tensor
    origin: tuple[int, int]
    size: tuple[int, int]


def _sample_grid(values: torch.Tensor, flow: FlowField) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``values`` at ``j + F(j)`` for every target pixel ``j``."""
    h, w = flow.height, flow.width
    coords = (pixel_grid(h, w, dtype=flow.grid.dtype) + flow.grid).reshape(-1, 2)
    sampled, mask = bilinear_sample(values, coords)
    return sampled.reshape(h, w, -1), mask.reshape(h, w)


def warp_image(image: torch.Tensor, flow: FlowField) -> tuple[torch.Tensor, torch.Tensor]:
    """Backward-warp ``image`` onto the target grid; the mask flags out-of-bounds samples."""
    if image.shape[:2] != flow.grid.shape[:2]:
        raise DimensionError(
            f"Image {tuple(image.shape[:2])} and flow {tuple(flow.grid.shape[:2])} extents differ"
        )
    return _sample_grid(image, flow)


def cycle_confidence(f_ts: FlowField, f_st: FlowField) -> ConfidenceMap:
    """Round-trip distance ``|| s + f_st(s) - j ||`` with ``s = j + f_ts(j)``."""
    if f_ts.grid.shape != f_st.grid.shape:
        raise ContractError(
            f"Cycle check needs flows at one resolution, got {tuple(f_ts.grid.shape)} and {tuple(f_st.grid.shape)}"
        )
    back, inside = _sample_grid(f_st.grid, f_ts)
    error = torch.linalg.vector_norm(f_ts.grid + back, ord=2, dim=-1)
    return ConfidenceMap(cycle_error=error, valid=inside & f_ts.valid)


def partition(image: torch.Tensor, k: int) -> list[Window]:
    """``k x k`` row-major windows of ``floor(extent / k)``; the last row and column absorb the remainder."""
    if k < 2:
        raise ConfigurationError(f"Partition count must be at least 2, got {k}")
    h, w = image.shape[0], image.shape[1]
    bh, bw = h // k, w // k
    if bh < 1 or bw < 1:
        raise DimensionError(f"Cannot split a {h}x{w} image into {k}x{k} windows")
    windows = []
    for r in range(k):
        top = r * bh
        height = h - top if r == k - 1 else bh
        for c in range(k):
            left = c * bw
            width = w - left if c == k - 1 else bw
            windows.append(
                Window(image=image[top : top + height, left : left + width], origin=(top, left), size=(height, width))
            )
    return windows


def compose_flow(f_local: FlowField, f_coarse: FlowField) -> FlowField:
    """``F(j) = f_local(j) + f_coarse(j + f_local(j))``; valid where both lookups are valid."""
    if f_local.grid.shape != f_coarse.grid.shape:
        raise ContractError(
            f"Cannot compose flows of shapes {tuple(f_local.grid.shape)} and {tuple(f_coarse.grid.shape)}"
        )
    sampled, inside = _sample_grid(f_coarse.grid, f_local)
    coarse_valid, _ = _sample_grid(f_coarse.valid.to(f_coarse.grid.dtype)[..., None], f_local)
    valid = f_local.valid & inside & (coarse_valid[..., 0] > 0.5)
    return FlowField.with_bounds(f_local.grid + sampled, valid)


def _paste(h: int, w: int, windows: list[Window], flows: list[FlowField], like: torch.Tensor) -> FlowField:
    grid = torch.zeros(h, w, 2, dtype=like.dtype)
    valid = torch.zeros(h, w, dtype=torch.bool)
    for window, flow in zip(windows, flows, strict=True):
        top, left = window.origin
        height, width = window.size
        grid[top : top + height, left : left + width] = flow.grid
        valid[top : top + height, left : left + width] = flow.valid
    return FlowField.with_bounds(grid, valid)


class ZoomInService:
    """Runs dense zoom-in with a trained matcher."""

    def __init__(self, model: UFCMatcher, settings: Settings | None = None, config: ZoomConfig | None = None) -> None:
        self.settings = settings or get_settings()
        self.model = model
        self.config = config or self.settings.zoom_config()
        self.threads = self.settings.threads

    def _match(self, image_s: torch.Tensor, image_t: torch.Tensor) -> FlowField:
        with torch.no_grad():
            return self.model.predict(image_s, image_t)

    def _window_flows(
        self, warped: torch.Tensor, image_t: torch.Tensor, k: int
    ) -> tuple[FlowField, FlowField, int]:
        """Local forward and reverse flows of every window, lifted to the full grid."""
        h, w = image_t.shape[0], image_t.shape[1]
        target_windows = partition(image_t, k)
        source_windows = partition(warped, k)
        pairs = list(zip(source_windows, target_windows, strict=True))
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            forward = list(pool.map(lambda p: self._match(p[0].image, p[1].image), pairs))
            reverse = list(pool.map(lambda p: self._match(p[1].image, p[0].image), pairs))
        return (
            _paste(h, w, target_windows, forward, warped),
            _paste(h, w, source_windows, reverse, warped),
            len(pairs),
        )

    def zoom_in(self, image_s: torch.Tensor, image_t: torch.Tensor) -> ZoomResult:
        if image_s.shape != image_t.shape:
            raise DimensionError(f"Image shapes differ: {tuple(image_s.shape)} vs {tuple(image_t.shape)}")
        h, w = image_t.shape[0], image_t.shape[1]
        if min(h, w) < 2 * self.model.input_size:
            logger.warning(
                f"Images of {h}x{w} are smaller than twice the model input {self.model.input_size}; "
                "zoom-in windows will be upsampled"
            )

        coarse = self._match(image_s, image_t)
        coarse_st = self._match(image_t, image_s)
        warped, _ = warp_image(image_s, coarse)

        labels = ["coarse"]
        flows = [coarse]
        confidences = [cycle_confidence(coarse, coarse_st)]
        skipped: list[int] = []
        timings: list[ZoomTiming] = []

        # ascending k so equal cycle errors resolve towards the coarser window
        for k in sorted(self.config.k_list):
            window = min(h // k, w // k)
            if window < self.config.min_window:
                logger.warning(f"Skipping k={k}: windows of {window} px are below {self.config.min_window} px")
                skipped.append(k)
                continue
            started = time.perf_counter()
            local, local_st, count = self._window_flows(warped, image_t, k)
            candidate = compose_flow(local, coarse)
            candidate_st = compose_flow(coarse_st, local_st)
            labels.append(f"k={k}")
            flows.append(candidate)
            confidences.append(cycle_confidence(candidate, candidate_st))
            seconds = time.perf_counter() - started
            timings.append(ZoomTiming(k=k, windows=count, seconds=seconds))
            logger.info(f"Zoom-in k={k}: {count} windows in {seconds:.2f}s")

        costs = torch.stack([c.selection_cost() for c in confidences])
        selected = torch.argmin(costs, dim=0)
        index = selected[None, ..., None].expand(1, h, w, 2)
        grid = torch.gather(torch.stack([f.grid for f in flows]), 0, index)[0]
        valid = torch.gather(torch.stack([c.valid for c in confidences]), 0, selected[None])[0]
        error = torch.gather(torch.stack([c.cycle_error for c in confidences]), 0, selected[None])[0]
        return ZoomResult(
            flow=FlowField.with_bounds(grid, valid),
            confidence=ConfidenceMap(cycle_error=error, valid=valid),
            selected=selected,
            candidates=labels,
            candidate_errors=[c.selection_cost() for c in confidences],
            skipped_k=skipped,
            timings=timings,
        )


def zoom_in(model: UFCMatcher, image_s: torch.Tensor, image_t: torch.Tensor, config: ZoomConfig) -> ZoomResult:
    return ZoomInService(model, config=config).zoom_in(image_s, image_t)
