"""
Self-training for aad.
Fit on labeled windows, pseudo-label confident unlabeled windows, refit on the
grown set, and repeat until nothing new clears the threshold.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from aad.ensemble import BoostedParams, ForestParams, Model, fit_model, predict_proba
from aad.errors import ConfigError, MissingClass
from aad.models import ClassifierKind, FeatureMatrix, WindowLabel


logger = logging.getLogger(__name__)


class TerminationReason(Enum):
    CONVERGED = "CONVERGED"        # an iteration admitted nothing
    MAX_ITER = "MAX_ITER"
    NO_UNLABELED = "NO_UNLABELED"  # pool empty


@dataclass(frozen=True)
class SelfTrainConfig:
    threshold: float = 0.7
    max_iter: int = 100
    base: ClassifierKind = ClassifierKind.BOOSTED
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.5 < self.threshold < 1.0:
            raise ConfigError(f"self-training threshold must lie in (0.5, 1), got {self.threshold}")
        if self.max_iter < 1:
            raise ConfigError(f"self-training max_iter must be at least 1, got {self.max_iter}")

    def to_dict(self) -> Dict[str, Any]:
        return {"threshold": self.threshold, "max_iter": self.max_iter,
                "base": self.base.value, "seed": self.seed}


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    n_newly_labeled: int
    n_remaining_unlabeled: int
    pseudo_normal: int
    pseudo_agitation: int


@dataclass(frozen=True)
class PseudoLabel:
    """Audit entry for one admitted row."""
    row: int
    iteration: int
    label: WindowLabel
    probability: float


@dataclass
class SelfTrainReport:
    base: ClassifierKind
    threshold: float
    initial_unlabeled: int
    iterations: List[IterationRecord] = field(default_factory=list)
    assignments: List[PseudoLabel] = field(default_factory=list)
    termination_reason: TerminationReason = TerminationReason.NO_UNLABELED
    final_label_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    @property
    def n_pseudo_labeled(self) -> int:
        return len(self.assignments)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base": self.base.value,
            "threshold": self.threshold,
            "initial_unlabeled": self.initial_unlabeled,
            "n_iterations": self.n_iterations,
            "n_pseudo_labeled": self.n_pseudo_labeled,
            "termination_reason": self.termination_reason.value,
            "final_label_counts": dict(self.final_label_counts),
            "iterations": [r.__dict__ for r in self.iterations],
        }


def self_train(m: FeatureMatrix, cfg: SelfTrainConfig = SelfTrainConfig(),
               forest: ForestParams = ForestParams(),
               boosted: BoostedParams = BoostedParams()) -> Tuple[Model, FeatureMatrix, SelfTrainReport]:
    """Returns the model fit on the final augmented set, that set, and the loop report."""
    X = m.values
    labels = m.labels.astype(np.int8).copy()
    has_label = labels != WindowLabel.UNLABELED
    for cls in (WindowLabel.NORMAL, WindowLabel.AGITATION):
        if not np.any(labels[has_label] == cls):
            raise MissingClass(f"Self-training needs at least one labeled {cls.name} row")

    report = SelfTrainReport(base=cfg.base, threshold=cfg.threshold,
                             initial_unlabeled=int(np.sum(~has_label)))

    def fit() -> Model:
        return fit_model(cfg.base, X[has_label], labels[has_label], cfg.seed, forest, boosted)

    model = None
    model_is_current = False
    reason = None
    while report.n_iterations < cfg.max_iter and not has_label.all():
        iteration = report.n_iterations + 1
        model = fit()
        pool = np.nonzero(~has_label)[0]
        proba = predict_proba(model, X[pool])
        confidence = proba.max(axis=1)
        predicted = proba.argmax(axis=1).astype(np.int8)
        admit = confidence > cfg.threshold

        rows = pool[admit]
        labels[rows] = predicted[admit]
        has_label[rows] = True
        report.assignments.extend(
            PseudoLabel(int(r), iteration, WindowLabel(int(c)), float(p))
            for r, c, p in zip(rows, predicted[admit], confidence[admit])
        )
        record = IterationRecord(
            iteration=iteration,
            n_newly_labeled=int(admit.sum()),
            n_remaining_unlabeled=int(np.sum(~has_label)),
            pseudo_normal=int(np.sum(predicted[admit] == WindowLabel.NORMAL)),
            pseudo_agitation=int(np.sum(predicted[admit] == WindowLabel.AGITATION)),
        )
        report.iterations.append(record)
        logger.info("Self-training %s iteration %d: +%d pseudo-labels (%d normal, %d agitation), %d unlabeled left",
                    cfg.base.value, iteration, record.n_newly_labeled, record.pseudo_normal,
                    record.pseudo_agitation, record.n_remaining_unlabeled)
        if record.n_newly_labeled == 0:
            reason = TerminationReason.CONVERGED
            model_is_current = True
            break

    if reason is None:
        reason = TerminationReason.NO_UNLABELED if has_label.all() else TerminationReason.MAX_ITER
    if not model_is_current:
        model = fit()

    augmented = m.with_labels(labels)
    report.termination_reason = reason
    report.final_label_counts = augmented.label_counts()
    logger.info("Self-training %s stopped (%s) after %d iterations; %d rows pseudo-labeled",
                cfg.base.value, reason.value, report.n_iterations, report.n_pseudo_labeled)
    return model, augmented, report


def write_selftrain_report(report: SelfTrainReport, path: Union[str, Path],
                           audit_path: Union[str, Path, None] = None) -> Path:
    """Per-iteration CSV followed by a termination_reason summary line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [(r.iteration, r.n_newly_labeled, r.n_remaining_unlabeled, r.pseudo_normal, r.pseudo_agitation)
         for r in report.iterations],
        columns=["iter", "new_labels", "remaining_unlabeled", "pseudo_normal", "pseudo_agitation"],
    )
    with open(path, "w", newline="") as f:
        frame.to_csv(f, index=False)
        f.write(f"# termination_reason={report.termination_reason.value}\n")

    if audit_path is not None:
        audit = pd.DataFrame(
            [(a.row, a.iteration, a.label.name, a.probability) for a in report.assignments],
            columns=["row", "iteration", "label", "probability"],
        )
        audit.to_csv(audit_path, index=False, float_format="%.17g")
    return path
