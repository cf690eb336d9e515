"""Pipelines behind each CLI subcommand.

Every task returns a plain dict summary; errors are logged and re-raised for the CLI to map
onto an exit code.
"""

import functools
import logging
from collections.abc import Callable
from pathlib import Path
from typing import Any, ParamSpec

from ufc_matcher.core.config import Settings, VariantTag
from ufc_matcher.core.exceptions import UFCError
from ufc_matcher.services.ablation import AblationService
from ufc_matcher.services.evaluation import EvaluationService
from ufc_matcher.services.flow_io import flo_write, read_image, write_image
from ufc_matcher.services.synthetic import SyntheticDatasetService
from ufc_matcher.services.training import TrainingService, load_model
from ufc_matcher.services.visualization import VisualizationService, confidence_image
from ufc_matcher.services.zoom import ZoomInService

logger = logging.getLogger(__name__)

P = ParamSpec("P")


def task(func: Callable[P, dict[str, Any]]) -> Callable[P, dict[str, Any]]:
    """Log start, finish and failure of a pipeline."""

    @functools.wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> dict[str, Any]:
        logger.info(f"Starting {func.__name__}")
        try:
            result = func(*args, **kwargs)
        except UFCError as e:
            logger.error(f"{func.__name__} failed: {e}")
            raise
        logger.info(f"Finished {func.__name__}")
        return result

    return wrapper


def confidence_path_for(flow_path: Path) -> Path:
    flow_path = Path(flow_path)
    return flow_path.with_name(f"{flow_path.stem}_confidence.png")


@task
def run_gen_data(settings: Settings, out_dir: Path | None = None) -> dict[str, Any]:
    service = SyntheticDatasetService(settings)
    out_dir = Path(out_dir or settings.data_dir)
    records = service.generate(out_dir)
    checksum = service.checksum(out_dir)
    logger.info(f"Wrote {len(records)} pairs to {out_dir} (sha256 {checksum[:12]})")
    return {"success": True, "pairs": len(records), "data_dir": str(out_dir), "checksum": checksum}


@task
def run_train_toy(
    settings: Settings,
    data_dir: Path | None = None,
    checkpoint_path: Path | None = None,
    resume: bool = False,
) -> dict[str, Any]:
    result = TrainingService(settings).train(data_dir=data_dir, checkpoint_path=checkpoint_path, resume=resume)
    initial = result.history[0].val_aepe
    logger.info(
        f"Best validation AEPE {result.best_val_aepe:.4f} at epoch {result.best_epoch} (epoch 0: {initial:.4f})"
    )
    return {
        "success": True,
        "epochs": len(result.history) - 1,
        "initial_val_aepe": initial,
        "best_epoch": result.best_epoch,
        "best_val_aepe": result.best_val_aepe,
        "checkpoint": str(result.checkpoint_path),
        "loss_curve": str(result.curve_path),
    }


@task
def run_match(
    settings: Settings, checkpoint_path: Path, image_s: Path, image_t: Path, output: Path
) -> dict[str, Any]:
    model = load_model(checkpoint_path)
    flow = model.predict(read_image(image_s), read_image(image_t))
    path = flo_write(flow, output)
    return {"success": True, "flow": str(path), "valid_fraction": float(flow.valid.float().mean())}


@task
def run_zoomin(
    settings: Settings, checkpoint_path: Path, image_s: Path, image_t: Path, output: Path
) -> dict[str, Any]:
    service = ZoomInService(load_model(checkpoint_path), settings)
    result = service.zoom_in(read_image(image_s), read_image(image_t))
    path = flo_write(result.flow, output)
    confidence = write_image(confidence_image(result.confidence), confidence_path_for(path))
    counts = {label: int((result.selected == i).sum()) for i, label in enumerate(result.candidates)}
    logger.info(f"Zoom-in selections: {counts}")
    return {
        "success": True,
        "flow": str(path),
        "confidence": str(confidence),
        "selected": counts,
        "skipped_k": result.skipped_k,
        "timings": [t.model_dump() for t in result.timings],
    }


@task
def run_eval(settings: Settings, pred_dir: Path, gt_dir: Path, report: Path | None = None) -> dict[str, Any]:
    service = EvaluationService(settings)
    records, summary = service.evaluate_dirs(pred_dir, gt_dir)
    report = Path(report or settings.output_dir / "eval.jsonl")
    service.write_report(records, summary, report)
    logger.info(f"AEPE {summary.aepe:.4f} over {summary.pairs} pairs")
    return {"success": True, "report": str(report), "summary": summary.model_dump()}


@task
def run_viz(
    settings: Settings,
    checkpoint_path: Path,
    image_s: Path,
    image_t: Path,
    x: int,
    y: int,
    out_dir: Path | None = None,
) -> dict[str, Any]:
    out_dir = Path(out_dir or settings.output_dir / "viz")
    service = VisualizationService(load_model(checkpoint_path))
    paths = service.render(read_image(image_s), read_image(image_t), x, y, out_dir)
    return {"success": True, "out_dir": str(out_dir), "images": [str(p) for p in paths]}


@task
def run_ablation(
    settings: Settings,
    data_dir: Path | None = None,
    out_dir: Path | None = None,
    variants: list[VariantTag] | None = None,
) -> dict[str, Any]:
    report = AblationService(settings).run(data_dir=data_dir, out_dir=out_dir, variants=variants)
    return {
        "success": True,
        "report": str(report.markdown_path),
        "records": str(report.records_path),
        "median_aepe": {row.variant.value: row.median_aepe for row in report.rows},
        "directions": {check.name: check.passed for check in report.checks},
    }
