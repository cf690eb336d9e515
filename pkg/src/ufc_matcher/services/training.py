"""Toy training loop: masked EPE minimization with AdamW and best-by-validation checkpoints."""

import logging
import math
import threading
import time
from pathlib import Path
from typing import Any

import torch
from pydantic import BaseModel

from ufc_matcher.core.config import ModelOptions, Settings, get_settings
from ufc_matcher.core.exceptions import FormatError, UsageError
from ufc_matcher.core.numerics import adamw_step, backward, make_optimizer, seed_everything
from ufc_matcher.models.flow import FlowField, TensorModel
from ufc_matcher.models.records import EpochRecord, PairRecord
from ufc_matcher.services.evaluation import aepe
from ufc_matcher.services.flow_io import flo_read, read_image, write_records
from ufc_matcher.services.pyramid import UFCMatcher, epe_loss
from ufc_matcher.services.synthetic import SyntheticDatasetService

logger = logging.getLogger(__name__)

LOSS_CURVE_NAME = "loss_curve.jsonl"

# model construction draws from the global generator
_INIT_LOCK = threading.Lock()


class TrainingPair(TensorModel):
    """A dataset pair loaded into memory."""

    pair_id: str
    source: torch.Tensor
    target: torch.Tensor
    flow: FlowField


class TrainingResult(BaseModel):
    history: list[EpochRecord]
    best_epoch: int
    best_val_aepe: float
    checkpoint_path: Path
    curve_path: Path


def load_pairs(data_dir: Path, records: list[PairRecord]) -> list[TrainingPair]:
    return [
        TrainingPair(
            pair_id=r.pair_id,
            source=read_image(data_dir / r.source_path),
            target=read_image(data_dir / r.target_path),
            flow=flo_read(data_dir / r.flow_path),
        )
        for r in records
    ]


def split_pairs(pairs: list[TrainingPair], val_fraction: float) -> tuple[list[TrainingPair], list[TrainingPair]]:
    """The last ``ceil(n * val_fraction)`` pairs in manifest order are held out."""
    if len(pairs) < 2:
        raise UsageError(f"Training needs at least 2 pairs, found {len(pairs)}")
    n_val = min(len(pairs) - 1, max(1, math.ceil(len(pairs) * val_fraction)))
    return pairs[:-n_val], pairs[-n_val:]


def evaluate_model(model: UFCMatcher, pairs: list[TrainingPair]) -> float:
    """Mean AEPE of ``model`` over ``pairs``."""
    with torch.no_grad():
        scores = [aepe(model.predict(p.source, p.target), p.flow) for p in pairs]
    return sum(scores) / len(scores)


def save_checkpoint(path: Path, payload: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def read_checkpoint(path: Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"Checkpoint not found: {path}")
    try:
        payload: dict[str, Any] = torch.load(path, weights_only=True)
    except Exception as e:
        raise FormatError(f"Cannot load checkpoint {path}: {e}") from e
    return payload


def _payload(
    options: ModelOptions,
    best_state: dict[str, torch.Tensor],
    history: list[EpochRecord],
    model: UFCMatcher,
    optimizer: torch.optim.Optimizer,
    epoch: int,
) -> dict[str, Any]:
    """Best weights for inference plus the latest state for resuming."""
    return {
        "options": options.model_dump(mode="json"),
        "model": best_state,
        "history": [r.model_dump(mode="json") for r in history],
        "last": {"model": model.state_dict(), "optimizer": optimizer.state_dict(), "epoch": epoch},
    }


def load_model(path: Path) -> UFCMatcher:
    """Rebuild the best model stored in a checkpoint."""
    payload = read_checkpoint(path)
    model = UFCMatcher(ModelOptions.model_validate(payload["options"]))
    model.load_state_dict(payload["model"])
    model.eval()
    return model


class TrainingService:
    """Trains a matcher on a synthetic dataset."""

    def __init__(self, settings: Settings | None = None) -> None:
        self.settings = settings or get_settings()

    def _shuffle(self, n: int, epoch: int) -> list[int]:
        # seeded per epoch, independent of the global generator
        generator = torch.Generator().manual_seed(self.settings.seed * 7919 + epoch)
        return torch.randperm(n, generator=generator).tolist()

    def train(
        self,
        data_dir: Path | None = None,
        options: ModelOptions | None = None,
        checkpoint_path: Path | None = None,
        epochs: int | None = None,
        resume: bool = False,
        pairs: list[TrainingPair] | None = None,
    ) -> TrainingResult:
        settings = self.settings
        data_dir = Path(data_dir or settings.data_dir)
        checkpoint_path = Path(checkpoint_path or settings.checkpoint_path)
        options = options or settings.model_options()
        epochs = settings.epochs if epochs is None else epochs
        curve_path = checkpoint_path.parent / LOSS_CURVE_NAME

        if pairs is None:
            pairs = load_pairs(data_dir, SyntheticDatasetService.load(data_dir))
        train_pairs, val_pairs = split_pairs(pairs, settings.val_fraction)
        logger.info(f"Training on {len(train_pairs)} pairs, validating on {len(val_pairs)}")

        with _INIT_LOCK:
            seed_everything(settings.seed)
            model = UFCMatcher(options)
        if settings.freeze_backbone:
            model.backbone.requires_grad_(False)
        optimizer = make_optimizer(
            model,
            lr=settings.lr,
            beta1=settings.beta1,
            beta2=settings.beta2,
            eps=settings.adam_eps,
            weight_decay=settings.weight_decay,
        )

        if resume:
            payload = read_checkpoint(checkpoint_path)
            last = payload["last"]
            model.load_state_dict(last["model"])
            optimizer.load_state_dict(last["optimizer"])
            history = [EpochRecord.model_validate(r) for r in payload["history"]]
            best_state = payload["model"]
            start_epoch = int(last["epoch"]) + 1
            logger.info(f"Resuming from epoch {last['epoch']} of {checkpoint_path}")
        else:
            model.eval()
            val0 = evaluate_model(model, val_pairs)
            history = [EpochRecord(epoch=0, val_aepe=val0, best=True)]
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            start_epoch = 1
            logger.info(f"Epoch 0: val AEPE {val0:.4f}")

        best = min(history, key=lambda r: r.val_aepe)
        for epoch in range(start_epoch, epochs + 1):
            started = time.perf_counter()
            model.train()
            order = self._shuffle(len(train_pairs), epoch)
            total = 0.0
            for start in range(0, len(order), settings.batch_size):
                batch = order[start : start + settings.batch_size]
                for idx in batch:
                    pair = train_pairs[idx]
                    loss = epe_loss(model(pair.source, pair.target).flow, pair.flow) / len(batch)
                    backward(loss, model)
                    total += float(loss.detach()) * len(batch)
                adamw_step(model, optimizer)
            model.eval()
            val = evaluate_model(model, val_pairs)
            improved = val < best.val_aepe
            record = EpochRecord(
                epoch=epoch,
                train_loss=total / len(order),
                val_aepe=val,
                best=improved,
                seconds=time.perf_counter() - started,
            )
            history.append(record)
            if improved:
                best = record
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            logger.info(f"Epoch {epoch}: train EPE {record.train_loss:.4f}, val AEPE {val:.4f}")
            save_checkpoint(checkpoint_path, _payload(options, best_state, history, model, optimizer, epoch))

        if start_epoch > epochs:
            save_checkpoint(checkpoint_path, _payload(options, best_state, history, model, optimizer, start_epoch - 1))
        write_records(history, curve_path)
        return TrainingResult(
            history=history,
            best_epoch=best.epoch,
            best_val_aepe=best.val_aepe,
            checkpoint_path=checkpoint_path,
            curve_path=curve_path,
        )
