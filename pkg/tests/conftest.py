"""
Shared fixtures for the aad test suite.
"""

import pytest

from aad.config import PipelineConfig, RunSettings, SelfTrainSettings
from aad.ensemble import BoostedParams, ForestParams
from aad.models import SessionRecording
from aad.synth import CohortSpec
from aad.vae import VaeConfig

from tests.helpers import SMALL_CONFIG_TOML, make_recording


@pytest.fixture
def recording() -> SessionRecording:
    return make_recording()


@pytest.fixture
def small_cohort() -> CohortSpec:
    """Three participants, two labeled; 26 labeled and 10 unlabeled minutes."""
    return CohortSpec(n_participants=3, n_labeled=2, normal_minutes=20, agitation_minutes=6,
                      unlabeled_minutes=10, min_episode_minutes=2, max_episode_minutes=3)


@pytest.fixture
def small_config(small_cohort, tmp_path) -> PipelineConfig:
    """Same settings as SMALL_CONFIG_TOML."""
    return PipelineConfig(
        synth=small_cohort,
        vae=VaeConfig(hidden_dims=(16, 8), latent_dim=4, epochs=2, batch_size=16),
        forest=ForestParams(n_trees=5),
        boosted=BoostedParams(n_rounds=5),
        selftrain=SelfTrainSettings(threshold=0.7, max_iter=3),
        pipeline=RunSettings(seed=0, out_dir=str(tmp_path / "results")),
    )


@pytest.fixture
def small_config_file(tmp_path):
    path = tmp_path / "aad.toml"
    path.write_text(SMALL_CONFIG_TOML)
    return path
