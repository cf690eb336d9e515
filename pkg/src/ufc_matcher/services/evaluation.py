"""AEPE, PCK and keypoint transfer through dense flows."""

import logging
from collections.abc import Sequence
from pathlib import Path

import torch

from ufc_matcher.core.config import Settings, get_settings
from ufc_matcher.core.exceptions import DimensionError, DomainError, EvaluationError, UsageError
from ufc_matcher.core.numerics import bilinear_sample, pixel_grid
from ufc_matcher.models.flow import FlowField, Keypoint, TransferredKeypoint
from ufc_matcher.models.records import EvalRecord, EvalSummary
from ufc_matcher.services.flow_io import flo_read, write_records

logger = logging.getLogger(__name__)

UNMATCHED_DISTANCE_PX = 2.0
REFINE_STEPS = 10


def _endpoint_errors(pred: FlowField, gt: FlowField) -> torch.Tensor:
    if pred.grid.shape != gt.grid.shape:
        raise DimensionError(f"Flow shapes differ: {tuple(pred.grid.shape)} vs {tuple(gt.grid.shape)}")
    mask = pred.valid & gt.valid
    if not bool(mask.any()):
        raise EvaluationError("No pixel is valid in both flows")
    return torch.linalg.vector_norm(pred.grid.detach() - gt.grid.detach(), ord=2, dim=-1)[mask]


def aepe(pred: FlowField, gt: FlowField) -> float:
    """Mean endpoint error over the intersection of both validity masks."""
    return float(_endpoint_errors(pred, gt).mean())


def pck_flow(pred: FlowField, gt: FlowField, alpha: float) -> float:
    """Fraction of jointly valid pixels with endpoint error at most ``alpha * max(H, W)``."""
    if alpha <= 0:
        raise DomainError(f"PCK alpha must be positive, got {alpha}")
    return pck_flow_px(pred, gt, alpha * max(gt.height, gt.width))


def pck_flow_px(pred: FlowField, gt: FlowField, threshold: float = 5.0) -> float:
    """Fraction of jointly valid pixels with endpoint error at most ``threshold`` pixels."""
    errors = _endpoint_errors(pred, gt)
    return float((errors <= threshold).to(torch.float64).mean())


def _sample_mapping(flow: FlowField, points: torch.Tensor) -> torch.Tensor:
    """``j + F(j)`` at continuous target points."""
    values, _ = bilinear_sample(flow.grid.detach(), points)
    return points + values


def transfer_keypoints(
    flow: FlowField, keypoints: Sequence[Keypoint], threshold: float = UNMATCHED_DISTANCE_PX
) -> list[TransferredKeypoint]:
    """Move source keypoints to the target by inverting the backward flow.

    The nearest grid match of ``j + F(j)`` seeds a Gauss-Newton refinement on the bilinear
    flow. Keypoints whose grid match is farther than ``threshold`` pixels are flagged unmatched.
    """
    if not keypoints:
        return []
    h, w = flow.height, flow.width
    dtype = flow.grid.dtype
    grid = pixel_grid(h, w, dtype=dtype).reshape(-1, 2)
    mapped = (grid + flow.grid.detach().reshape(-1, 2))
    targets = torch.tensor([[kp.x, kp.y] for kp in keypoints], dtype=dtype)

    distances = torch.cdist(targets, mapped)
    distances[:, ~flow.valid.reshape(-1)] = float("inf")
    best, index = distances.min(dim=1)
    points = grid[index].clone()

    lower = torch.zeros(2, dtype=dtype)
    upper = torch.tensor([w - 1, h - 1], dtype=dtype)
    step = 0.25
    ex = torch.tensor([step, 0.0], dtype=dtype)
    ey = torch.tensor([0.0, step], dtype=dtype)
    for _ in range(REFINE_STEPS):
        residual = _sample_mapping(flow, points) - targets
        jx = (_sample_mapping(flow, points + ex) - _sample_mapping(flow, points - ex)) / (2 * step)
        jy = (_sample_mapping(flow, points + ey) - _sample_mapping(flow, points - ey)) / (2 * step)
        jacobian = torch.stack([jx, jy], dim=-1)
        det = jacobian[:, 0, 0] * jacobian[:, 1, 1] - jacobian[:, 0, 1] * jacobian[:, 1, 0]
        solvable = det.abs() > 1e-8
        safe = torch.where(solvable[:, None, None], jacobian, torch.eye(2, dtype=dtype).expand_as(jacobian))
        delta = torch.linalg.solve(safe, residual[..., None])[..., 0]
        candidate = torch.minimum(torch.maximum(points - delta, lower), upper)
        improved = solvable & (
            torch.linalg.vector_norm(_sample_mapping(flow, candidate) - targets, dim=-1)
            <= torch.linalg.vector_norm(residual, dim=-1)
        )
        points = torch.where(improved[:, None], candidate, points)

    residuals = torch.linalg.vector_norm(_sample_mapping(flow, points) - targets, dim=-1)
    return [
        TransferredKeypoint(
            x=float(p[0]),
            y=float(p[1]),
            pair_id=kp.pair_id,
            matched=bool(d <= threshold),
            residual=float(r),
        )
        for kp, p, d, r in zip(keypoints, points, best, residuals, strict=True)
    ]


def _align(pred_kps: Sequence[Keypoint], gt_kps: Sequence[Keypoint]) -> list[tuple[Keypoint, Keypoint]]:
    if not pred_kps or not gt_kps:
        raise EvaluationError("PCK needs at least one keypoint")
    if all(kp.pair_id is not None for kp in [*pred_kps, *gt_kps]):
        by_id = {kp.pair_id: kp for kp in pred_kps}
        if len(by_id) != len(pred_kps) or set(by_id) != {kp.pair_id for kp in gt_kps}:
            raise EvaluationError("Predicted and ground-truth keypoints do not share the same pair ids")
        return [(by_id[kp.pair_id], kp) for kp in gt_kps]
    if len(pred_kps) != len(gt_kps):
        raise EvaluationError(f"Keypoint lists differ in length: {len(pred_kps)} vs {len(gt_kps)}")
    return list(zip(pred_kps, gt_kps, strict=True))


def pck(
    pred_kps: Sequence[Keypoint], gt_kps: Sequence[Keypoint], alpha: float, h_ref: float, w_ref: float
) -> float:
    """Fraction of keypoints within ``alpha * max(h_ref, w_ref)``; the boundary counts as correct."""
    if alpha <= 0:
        raise DomainError(f"PCK alpha must be positive, got {alpha}")
    threshold = alpha * max(h_ref, w_ref)
    pairs = _align(pred_kps, gt_kps)
    correct = 0
    for pred, gt in pairs:
        if isinstance(pred, TransferredKeypoint) and not pred.matched:
            continue
        if ((pred.x - gt.x) ** 2 + (pred.y - gt.y) ** 2) ** 0.5 <= threshold:
            correct += 1
    return correct / len(pairs)


def alpha_key(alpha: float) -> str:
    return f"{alpha:g}"


class EvaluationService:
    """Scores predicted flows against ground truth files."""

    def __init__(self, settings: Settings | None = None) -> None:
        self.settings = settings or get_settings()

    def evaluate_pair(self, pair_id: str, pred: FlowField, gt: FlowField) -> EvalRecord:
        return EvalRecord(
            pair_id=pair_id,
            aepe=aepe(pred, gt),
            pck={alpha_key(a): pck_flow(pred, gt, a) for a in self.settings.pck_alphas},
            pck_px=pck_flow_px(pred, gt, self.settings.pck_px),
        )

    def summarize(self, records: Sequence[EvalRecord]) -> EvalSummary:
        if not records:
            raise EvaluationError("Nothing to summarize")
        n = len(records)
        return EvalSummary(
            pairs=n,
            aepe=sum(r.aepe for r in records) / n,
            pck={key: sum(r.pck[key] for r in records) / n for key in records[0].pck},
            pck_px=sum(r.pck_px for r in records) / n,
        )

    def evaluate_dirs(self, pred_dir: Path, gt_dir: Path) -> tuple[list[EvalRecord], EvalSummary]:
        """Match ``.flo`` files by name across the two directories."""
        gt_files = sorted(Path(gt_dir).rglob("*.flo"))
        if not gt_files:
            raise UsageError(f"No ground-truth .flo files under {gt_dir}")
        records = []
        for gt_path in gt_files:
            rel = gt_path.relative_to(gt_dir)
            pred_path = Path(pred_dir) / rel
            if not pred_path.exists():
                pred_path = Path(pred_dir) / rel.name
            if not pred_path.exists():
                raise UsageError(f"No prediction for {rel} in {pred_dir}")
            record = self.evaluate_pair(gt_path.stem, flo_read(pred_path), flo_read(gt_path))
            logger.info(f"{record.pair_id}: AEPE {record.aepe:.3f}")
            records.append(record)
        return records, self.summarize(records)

    def write_report(self, records: Sequence[EvalRecord], summary: EvalSummary, path: Path) -> Path:
        return write_records([*records, summary], path)
