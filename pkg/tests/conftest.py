"""Core test configuration and fixtures."""

from collections.abc import Generator
from pathlib import Path

import pytest
import torch

from ufc_matcher.core.config import ModelOptions, Settings
from ufc_matcher.core.numerics import seed_everything
from ufc_matcher.services.pyramid import UFCMatcher


@pytest.fixture(autouse=True)
def float64() -> Generator[None, None, None]:
    """Run every test in double precision and restore the previous default."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def generator() -> torch.Generator:
    """Seeded generator for random test inputs."""
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def toy_settings(tmp_path: Path) -> Settings:
    """Tiny settings that keep every pipeline fast, writing under a temporary directory."""
    return Settings(
        level_plan="toy",
        n_blocks=1,
        dataset_count=6,
        dataset_image_size=16,
        dataset_strength=0.3,
        epochs=2,
        batch_size=2,
        val_fraction=0.3,
        lr=1e-3,
        zoom_k_list=[2],
        zoom_min_window=4,
        ablation_seeds=[0],
        ablation_epochs=1,
        data_dir=tmp_path / "data",
        output_dir=tmp_path / "outputs",
        checkpoint_path=tmp_path / "outputs" / "checkpoint.pt",
        precision="float64",
    )


@pytest.fixture
def toy_options(toy_settings: Settings) -> ModelOptions:
    return toy_settings.model_options()


@pytest.fixture
def toy_model(toy_options: ModelOptions) -> UFCMatcher:
    """Seeded toy matcher in eval mode (8 x 8 input)."""
    seed_everything(0)
    model = UFCMatcher(toy_options)
    model.eval()
    return model


@pytest.fixture
def image_pair(generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Random 16 x 16 RGB pair in [0, 1]."""
    source = torch.rand(16, 16, 3, generator=generator)
    target = torch.roll(source, shifts=1, dims=1)
    return source, target
