"""
Desk-scale acceptance runs on the default synthetic cohort.
Deselected by default; run with `pytest -m slow`.
"""

import numpy as np
import pandas as pd
import pytest

from aad.config import PipelineConfig
from aad.models import ClassifierKind, Representation, TrainingMode
from aad.pipeline import run_pipeline


pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    config = PipelineConfig().with_overrides(out_dir=tmp_path_factory.mktemp("acceptance") / "results")
    return run_pipeline(config)


class TestDefaultCohort:
    """Quality floors for the default configuration."""

    @pytest.mark.timeout(6 * 3600)
    def test_vae_learns(self, default_run):
        assert set(default_run.summary["vae"]) == {m.value for m in TrainingMode}
        for mode in TrainingMode:
            frame = pd.read_csv(default_run.out_dir / "vae" / f"history-{mode.value}.csv")
            assert len(frame) == 50
            floor = default_run.summary["vae"][mode.value]["train_entropy_floor"]
            excess = frame["train_vae"] - floor
            assert excess.min() >= -1e-9
            assert excess.iloc[-1] <= 0.5 * excess.iloc[0]
            assert frame["train_mse"].iloc[-1] <= 0.5 * frame["train_mse"].iloc[0]

    @pytest.mark.timeout(6 * 3600)
    def test_vae_self_trained_boosted_trees(self, default_run):
        report = default_run.report(Representation.VAE, TrainingMode.SELF_TRAIN, ClassifierKind.BOOSTED)
        assert report.balanced_accuracy >= 0.85

    @pytest.mark.timeout(6 * 3600)
    def test_self_training_does_not_hurt(self, default_run):
        for representation in Representation:
            supervised = default_run.report(representation, TrainingMode.SUPERVISED, ClassifierKind.BOOSTED)
            self_trained = default_run.report(representation, TrainingMode.SELF_TRAIN, ClassifierKind.BOOSTED)
            assert self_trained.balanced_accuracy >= supervised.balanced_accuracy - 0.01

    @pytest.mark.timeout(6 * 3600)
    def test_every_experiment_scored(self, default_run):
        assert len(default_run.reports) == 12
        for report in default_run.reports:
            assert np.isfinite(list(report.metrics().values())).all()
