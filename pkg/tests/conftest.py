import numpy as np
import pytest

from sture.config import DatasetSpec, ScenarioSpec, TrackerConfig, TrainConfig
from sture.scenario import build_scenario, write_scenario


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tracker_config():
    return TrackerConfig.for_frame_rate(30)


@pytest.fixture
def small_train_config():
    return TrainConfig(P=2, Q=2, T=3, D=4, hidden=5, epochs=2, iterations=3, lr=1e-3)


@pytest.fixture
def small_dataset_spec():
    return DatasetSpec(identities=4, sequences=3, frames=8, min_frames=2, input_dim=6, signal_dim=2)


@pytest.fixture
def scenario_dir(tmp_path):
    """Default synthetic sequence (3 identities, 40 frames, one occlusion each)."""
    return write_scenario(build_scenario(ScenarioSpec(), name="synthetic"), tmp_path / "synthetic")
