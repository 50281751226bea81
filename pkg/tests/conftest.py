from pathlib import Path

import numpy as np
import pytest

from abmlens.abm_sim import SimConfig
from abmlens.diffusion import TrainConfig
from abmlens.regimes import PipelineOptions

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(autouse=True)
def _quiet_environment(monkeypatch):
    monkeypatch.setenv("ABMLENS_LOG_FILE", "")
    monkeypatch.setenv("ABMLENS_MAX_WORKERS", "1")


@pytest.fixture
def small_config() -> SimConfig:
    return SimConfig(n_elders=12, grid_side=2, horizon=60, seed=11)


@pytest.fixture
def fast_options() -> PipelineOptions:
    return PipelineOptions(train=TrainConfig(epochs=2, hidden_width=16), em_restarts=2, max_samples=400)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(2024))


@pytest.fixture
def period2_dir() -> Path:
    return FIXTURES / "period2"
