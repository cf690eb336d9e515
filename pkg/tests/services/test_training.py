"""Tests for the training service."""

import pytest
import torch

from ufc_matcher.core.exceptions import FormatError, UsageError
from ufc_matcher.models.flow import FlowField
from ufc_matcher.models.records import EpochRecord
from ufc_matcher.services.flow_io import read_records
from ufc_matcher.services.synthetic import SyntheticDatasetService
from ufc_matcher.services.training import (
    TrainingPair,
    TrainingService,
    evaluate_model,
    load_model,
    load_pairs,
    read_checkpoint,
    split_pairs,
)


@pytest.fixture
def dataset(toy_settings):
    SyntheticDatasetService(toy_settings).generate()
    return toy_settings.data_dir


def _pairs(n: int) -> list[TrainingPair]:
    return [
        TrainingPair(
            pair_id=f"p{i}", source=torch.zeros(8, 8, 3), target=torch.zeros(8, 8, 3), flow=FlowField.zeros(8, 8)
        )
        for i in range(n)
    ]


class TestSplit:
    """Tests for split_pairs."""

    def test_holds_out_the_tail(self):
        """The last ceil(n * fraction) pairs validate."""
        train, val = split_pairs(_pairs(6), 0.3)
        assert [p.pair_id for p in train] == ["p0", "p1", "p2", "p3"]
        assert [p.pair_id for p in val] == ["p4", "p5"]

    def test_keeps_one_training_pair(self):
        """At least one pair always trains."""
        train, val = split_pairs(_pairs(2), 0.9)
        assert (len(train), len(val)) == (1, 1)

    def test_needs_two_pairs(self):
        """A single pair cannot be split."""
        with pytest.raises(UsageError):
            split_pairs(_pairs(1), 0.2)


class TestTrainingService:
    """Tests for TrainingService."""

    def test_train_writes_checkpoint_and_curve(self, toy_settings, dataset):
        """Training records epoch 0 plus one row per epoch and stores a loadable checkpoint."""
        result = TrainingService(toy_settings).train()
        assert [r.epoch for r in result.history] == [0, 1, 2]
        assert result.history[0].train_loss is None
        assert all(r.train_loss is not None for r in result.history[1:])
        assert result.best_val_aepe == min(r.val_aepe for r in result.history)
        assert read_records(result.curve_path, EpochRecord) == result.history

        model = load_model(result.checkpoint_path)
        pairs = load_pairs(dataset, SyntheticDatasetService.load(dataset))
        _, val = split_pairs(pairs, toy_settings.val_fraction)
        assert evaluate_model(model, val) == pytest.approx(result.best_val_aepe)

    def test_zero_learning_rate_keeps_validation_constant(self, toy_settings, dataset):
        """With lr = 0 and no weight decay the parameters never move."""
        settings = toy_settings.model_copy(update={"lr": 0.0, "weight_decay": 0.0})
        result = TrainingService(settings).train()
        assert all(r.val_aepe == pytest.approx(result.history[0].val_aepe) for r in result.history)
        assert result.best_epoch == 0

    def test_resume_continues_history(self, toy_settings, dataset):
        """Resuming extends the saved history instead of starting over."""
        service = TrainingService(toy_settings)
        service.train(epochs=1)
        result = service.train(epochs=2, resume=True)
        assert [r.epoch for r in result.history] == [0, 1, 2]
        assert read_checkpoint(result.checkpoint_path)["last"]["epoch"] == 2

    def test_resume_is_reproducible(self, toy_settings, dataset, tmp_path):
        """Two epochs at once equal one epoch plus a resumed epoch."""
        straight = TrainingService(toy_settings).train(checkpoint_path=tmp_path / "a.pt")
        service = TrainingService(toy_settings)
        service.train(checkpoint_path=tmp_path / "b.pt", epochs=1)
        resumed = service.train(checkpoint_path=tmp_path / "b.pt", resume=True)
        assert resumed.history[-1].val_aepe == pytest.approx(straight.history[-1].val_aepe)

    def test_frozen_backbone(self, toy_settings, dataset):
        """A frozen backbone keeps its initial weights."""
        settings = toy_settings.model_copy(update={"freeze_backbone": True, "epochs": 1})
        result = TrainingService(settings).train()
        state = read_checkpoint(result.checkpoint_path)["last"]["model"]
        initial = read_checkpoint(result.checkpoint_path)["model"]
        for key in state:
            if key.startswith("backbone."):
                assert torch.equal(state[key], initial[key])

    def test_resume_without_checkpoint(self, toy_settings, dataset):
        """Resuming needs an existing checkpoint."""
        with pytest.raises(UsageError):
            TrainingService(toy_settings).train(resume=True)

    def test_corrupt_checkpoint(self, tmp_path):
        """Unreadable checkpoints are format errors."""
        path = tmp_path / "broken.pt"
        path.write_bytes(b"garbage")
        with pytest.raises(FormatError):
            read_checkpoint(path)

    def test_missing_dataset(self, toy_settings):
        """Training without a generated dataset is a usage error."""
        with pytest.raises(UsageError):
            TrainingService(toy_settings).train()
