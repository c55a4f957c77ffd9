"""
Tests for the self-training loop and its report files.
"""

import numpy as np
import pandas as pd
import pytest

from aad.ensemble import BoostedParams, ForestParams, fit_model, predict, predict_proba
from aad.errors import ConfigError, MissingClass
from aad.evaluation import ConfusionMatrix, balanced_accuracy
from aad.models import ClassifierKind, WindowLabel
from aad.selftrain import SelfTrainConfig, TerminationReason, self_train, write_selftrain_report

from tests.helpers import blob_matrix, make_matrix


SMALL_FOREST = ForestParams(n_trees=10)
SMALL_BOOSTED = BoostedParams(n_rounds=10)

U = WindowLabel.UNLABELED


def three_point_matrix():
    """x=0 is NORMAL, x=10 AGITATION, x=5 carries both labels equally often."""
    x = np.r_[np.zeros(20), np.full(20, 10.0), np.full(20, 5.0),
              np.zeros(10), np.full(10, 10.0), np.full(5, 5.0)]
    labels = np.r_[np.zeros(20), np.ones(20), np.zeros(10), np.ones(10), np.full(25, U)]
    return make_matrix(x.reshape(-1, 1), labels)


class TestSelfTrainInvariants:
    """Properties that hold for every run."""

    @pytest.mark.parametrize("base", [ClassifierKind.BOOSTED, ClassifierKind.RANDOM_FOREST])
    @pytest.mark.parametrize("seed", range(10))
    def test_run_invariants(self, base, seed):
        m, _ = blob_matrix(seed=seed, separation=1.5)
        cfg = SelfTrainConfig(threshold=0.7, max_iter=100, base=base, seed=seed)
        model, augmented, report = self_train(m, cfg, SMALL_FOREST, SMALL_BOOSTED)

        labeled = m.labeled_mask
        assert np.array_equal(augmented.labels[labeled], m.labels[labeled])

        rows = [a.row for a in report.assignments]
        assert len(rows) == len(set(rows))
        assert not labeled[rows].any()
        assert all(a.probability > 0.7 for a in report.assignments)
        assert all(augmented.labels[a.row] == a.label for a in report.assignments)

        newly = [r.n_newly_labeled for r in report.iterations]
        assert sum(newly) == report.n_pseudo_labeled
        remaining = [r.n_remaining_unlabeled for r in report.iterations]
        assert remaining == sorted(remaining, reverse=True)
        assert all(r.pseudo_normal + r.pseudo_agitation == r.n_newly_labeled for r in report.iterations)
        assert 1 <= report.n_iterations <= cfg.max_iter
        assert report.final_label_counts == augmented.label_counts()
        assert model.kind is base

        if report.termination_reason is TerminationReason.CONVERGED:
            assert newly[-1] == 0
        if report.termination_reason is TerminationReason.NO_UNLABELED:
            assert augmented.labeled_mask.all()

    def test_pseudo_labels_mostly_correct(self):
        m, truth = blob_matrix(seed=3, n_per_class=50, n_unlabeled=900, d=5, separation=4.0)
        _, augmented, report = self_train(m, SelfTrainConfig(max_iter=20), boosted=BoostedParams(n_rounds=20))

        assigned = np.array([a.row for a in report.assignments])
        assert len(assigned) > 0
        accuracy = np.mean(augmented.labels[assigned] == truth[assigned])
        assert accuracy >= 0.95

    @pytest.mark.timeout(300)
    def test_no_worse_than_labeled_only(self):
        boosted = BoostedParams(n_rounds=20)
        self_trained, supervised = [], []
        for seed in range(5):
            m, _ = blob_matrix(seed=seed, n_per_class=25, n_unlabeled=450, d=5)
            test, _ = blob_matrix(seed=100 + seed, n_per_class=200, n_unlabeled=0, d=5)
            model, _, _ = self_train(m, SelfTrainConfig(max_iter=20, seed=seed), boosted=boosted)
            baseline = fit_model(ClassifierKind.BOOSTED, m.values[m.labeled_mask], m.labels[m.labeled_mask],
                                 seed=seed, boosted=boosted)
            for scores, fitted in ((self_trained, model), (supervised, baseline)):
                cm = ConfusionMatrix.from_predictions(test.labels, predict(fitted, test.values))
                scores.append(balanced_accuracy(cm))

        assert np.mean(self_trained) >= np.mean(supervised) - 0.01


class TestTermination:
    """Test the three stopping conditions."""

    def test_no_unlabeled_rows_equals_supervised_fit(self):
        m, _ = blob_matrix(seed=1, n_unlabeled=0)
        cfg = SelfTrainConfig(base=ClassifierKind.BOOSTED, seed=4)
        model, augmented, report = self_train(m, cfg, boosted=SMALL_BOOSTED)
        supervised = fit_model(ClassifierKind.BOOSTED, m.values, m.labels, seed=4, boosted=SMALL_BOOSTED)

        assert report.termination_reason is TerminationReason.NO_UNLABELED
        assert report.n_iterations == 0
        assert np.array_equal(predict_proba(model, m.values), predict_proba(supervised, m.values))
        assert augmented.digest() == m.digest()

    def test_converged_when_nothing_clears_threshold(self):
        x = np.array([[0.0], [0.1], [1.0], [1.1], [0.5], [0.6], [0.7]])
        m = make_matrix(x, [0, 0, 1, 1, U, U, U])
        _, augmented, report = self_train(m, SelfTrainConfig(), boosted=BoostedParams(n_rounds=1))

        assert report.termination_reason is TerminationReason.CONVERGED
        assert report.n_iterations == 1
        assert report.n_pseudo_labeled == 0
        assert np.array_equal(augmented.labels, m.labels)

    def test_converges_after_confident_rows_admitted(self):
        _, augmented, report = self_train(three_point_matrix(), SelfTrainConfig(),
                                          boosted=BoostedParams(n_rounds=20))

        assert report.termination_reason is TerminationReason.CONVERGED
        assert report.n_iterations == 2
        assert [r.n_newly_labeled for r in report.iterations] == [20, 0]
        assert np.all(augmented.labels[60:70] == WindowLabel.NORMAL)
        assert np.all(augmented.labels[70:80] == WindowLabel.AGITATION)
        assert np.all(augmented.labels[80:] == U)

    def test_max_iter(self):
        model, augmented, report = self_train(three_point_matrix(), SelfTrainConfig(max_iter=1),
                                              boosted=BoostedParams(n_rounds=20))

        assert report.termination_reason is TerminationReason.MAX_ITER
        assert report.n_iterations == 1
        assert report.n_pseudo_labeled == 20
        refit = fit_model(ClassifierKind.BOOSTED, augmented.values[augmented.labeled_mask],
                          augmented.labels[augmented.labeled_mask], boosted=BoostedParams(n_rounds=20))
        assert np.array_equal(predict_proba(model, augmented.values), predict_proba(refit, augmented.values))


class TestValidation:
    """Test configuration and input checks."""

    @pytest.mark.parametrize("threshold", [0.5, 1.0, 0.3, 1.2])
    def test_threshold_range(self, threshold):
        with pytest.raises(ConfigError):
            SelfTrainConfig(threshold=threshold)

    def test_max_iter_positive(self):
        with pytest.raises(ConfigError):
            SelfTrainConfig(max_iter=0)

    def test_missing_class(self):
        m = make_matrix(np.arange(4.0).reshape(-1, 1), [0, 0, U, U])
        with pytest.raises(MissingClass, match="AGITATION"):
            self_train(m)


class TestReportFiles:
    """Test the per-iteration CSV and the audit CSV."""

    def test_files(self, tmp_path):
        _, _, report = self_train(three_point_matrix(), SelfTrainConfig(), boosted=BoostedParams(n_rounds=20))
        path = write_selftrain_report(report, tmp_path / "selftrain.csv", tmp_path / "pseudo_labels.csv")

        lines = path.read_text().splitlines()
        assert lines[0] == "iter,new_labels,remaining_unlabeled,pseudo_normal,pseudo_agitation"
        assert lines[1] == "1,20,5,10,10"
        assert lines[2] == "2,0,5,0,0"
        assert lines[-1] == "# termination_reason=CONVERGED"

        audit = pd.read_csv(tmp_path / "pseudo_labels.csv")
        assert list(audit.columns) == ["row", "iteration", "label", "probability"]
        assert len(audit) == 20
        assert set(audit["label"]) == {"NORMAL", "AGITATION"}
        assert (audit["probability"] > 0.7).all()
