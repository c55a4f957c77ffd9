"""
Evaluation for aad.
Seeded train/test splits, imbalance-aware metrics, ROC and precision-recall
curves, and the experiment runner behind the configuration matrix.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from blake3 import blake3
from scipy.integrate import trapezoid

from aad.ensemble import BoostedParams, ForestParams, Model, fit_model, predict_proba
from aad.errors import ClassTooSmall, ConfigError, DataError, SingleClassScores, UndefinedClassRate
from aad.models import ClassifierKind, FeatureMatrix, Representation, TrainingMode, WindowLabel
from aad.selftrain import SelfTrainConfig, SelfTrainReport, self_train
from aad.storage import write_json
from aad.vae import VaeConfig, VaeModel, fit_vae


logger = logging.getLogger(__name__)

CLASSES = (WindowLabel.NORMAL, WindowLabel.AGITATION)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.30
    stratified: bool = True
    seed: int = 0
    by_subject: bool = False  # hold out whole participants instead of windows

    def __post_init__(self) -> None:
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")

    def to_dict(self) -> Dict[str, Any]:
        return {"test_fraction": self.test_fraction, "stratified": self.stratified,
                "seed": self.seed, "by_subject": self.by_subject}


def _n_test(count: int, fraction: float) -> int:
    return int(min(max(np.floor(count * fraction + 0.5), 1), count - 1))


def stratified_split(labels: Any, spec: SplitSpec = SplitSpec()) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded (train, test) row indices over the labeled rows."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    groups = ([np.nonzero(labels == c)[0] for c in CLASSES] if spec.stratified
              else [np.nonzero(labels != WindowLabel.UNLABELED)[0]])
    train_parts, test_parts = [], []
    for cls, rows in zip(CLASSES, groups):
        if len(rows) < 2:
            name = cls.name if spec.stratified else "labeled"
            raise ClassTooSmall(f"Need at least 2 {name} rows to split, found {len(rows)}")
        shuffled = rows[rng.permutation(len(rows))]
        n_test = _n_test(len(rows), spec.test_fraction)
        test_parts.append(shuffled[:n_test])
        train_parts.append(shuffled[n_test:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(test_parts))


def subject_split(labels: Any, participant_ids: Any,
                  spec: SplitSpec = SplitSpec()) -> Tuple[np.ndarray, np.ndarray]:
    """Hold out whole participants until the test side reaches test_fraction of labeled rows."""
    labels = np.asarray(labels)
    participant_ids = np.asarray(participant_ids, dtype=object)
    labeled = np.nonzero(labels != WindowLabel.UNLABELED)[0]
    people = sorted(set(participant_ids[labeled]))
    if len(people) < 2:
        raise ClassTooSmall(f"Subject split needs at least 2 labeled participants, found {len(people)}")
    rng = np.random.default_rng(spec.seed)
    order = [people[i] for i in rng.permutation(len(people))]
    target = spec.test_fraction * len(labeled)
    held_out: List[str] = []
    n_held = 0
    for person in order[:-1]:
        if n_held >= target:
            break
        held_out.append(person)
        n_held += int(np.sum(participant_ids[labeled] == person))
    in_test = np.isin(participant_ids[labeled], held_out)
    train_idx, test_idx = labeled[~in_test], labeled[in_test]
    for side, rows in (("train", train_idx), ("test", test_idx)):
        for cls in CLASSES:
            if not np.any(labels[rows] == cls):
                raise ClassTooSmall(f"Subject split left no {cls.name} rows on the {side} side")
    return train_idx, test_idx


def split_rows(m: FeatureMatrix, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray]:
    if spec.by_subject:
        return subject_split(m.labels, m.participant_ids, spec)
    return stratified_split(m.labels, spec)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion counts, AGITATION positive."""
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DataError("Confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true: Any, y_pred: Any) -> "ConfusionMatrix":
        y_true = np.asarray(y_true) == WindowLabel.AGITATION
        y_pred = np.asarray(y_pred) == WindowLabel.AGITATION
        return cls(
            tp=int(np.sum(y_true & y_pred)),
            fp=int(np.sum(~y_true & y_pred)),
            tn=int(np.sum(~y_true & ~y_pred)),
            fn=int(np.sum(y_true & ~y_pred)),
        )

    def swapped(self) -> "ConfusionMatrix":
        """Same counts with NORMAL as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)

    def to_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise UndefinedClassRate("Balanced accuracy needs both classes among the true labels")
    tpr = cm.tp / (cm.tp + cm.fn)
    tnr = cm.tn / (cm.tn + cm.fp)
    return (tpr + tnr) / 2.0


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self) -> Dict[str, Any]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "support": self.support}


@dataclass(frozen=True)
class PrfScores:
    per_class: Dict[str, ClassScores]
    weighted: ClassScores
    flags: Tuple[str, ...] = ()  # 0/0 ratios reported as 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_class": {k: v.to_dict() for k, v in self.per_class.items()},
            "weighted": self.weighted.to_dict(),
            "flags": list(self.flags),
        }


def _ratio(num: float, den: float, flag: str, flags: List[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def prf_scores(cm: ConfusionMatrix) -> PrfScores:
    flags: List[str] = []
    per_class = {}
    for cls, view in ((WindowLabel.NORMAL, cm.swapped()), (WindowLabel.AGITATION, cm)):
        precision = _ratio(view.tp, view.tp + view.fp, f"precision[{cls.name}] 0/0", flags)
        recall = _ratio(view.tp, view.tp + view.fn, f"recall[{cls.name}] 0/0", flags)
        f1 = _ratio(2 * precision * recall, precision + recall, f"f1[{cls.name}] 0/0", flags)
        per_class[cls.name] = ClassScores(precision, recall, f1, view.tp + view.fn)

    support = sum(s.support for s in per_class.values())

    def weighted(metric: str) -> float:
        total = sum(getattr(s, metric) * s.support for s in per_class.values())
        return _ratio(total, support, f"weighted {metric} 0/0", flags)

    return PrfScores(
        per_class=per_class,
        weighted=ClassScores(weighted("precision"), weighted("recall"), weighted("f1"), support),
        flags=tuple(dict.fromkeys(flags)),
    )


@dataclass(frozen=True, eq=False)
class Curve:
    """Threshold sweep; x/y are (fpr, tpr) for ROC and (recall, precision) for PR."""
    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "x": self.x, "y": self.y})


def _sweep(scores: Any, labels: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    """Cumulative (tp, fp) at each distinct score, highest first."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) == WindowLabel.AGITATION
    if scores.shape != labels.shape:
        raise DataError("scores and labels must have the same length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassScores("Curves need both classes among the labels")
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tps = np.cumsum(labels)[last_of_group].astype(np.float64)
    fps = (last_of_group + 1) - tps
    return scores[last_of_group], tps, fps, n_pos, n_neg


def roc_auc(scores: Any, labels: Any) -> Tuple[float, Curve]:
    thresholds, tps, fps, n_pos, n_neg = _sweep(scores, labels)
    curve = Curve(
        thresholds=np.r_[np.inf, thresholds],
        x=np.r_[0.0, fps / n_neg],
        y=np.r_[0.0, tps / n_pos],
    )
    return float(trapezoid(curve.y, curve.x)), curve


def pr_curve(scores: Any, labels: Any) -> Tuple[float, Curve]:
    """Average precision with step interpolation over the recall increments."""
    thresholds, tps, fps, n_pos, _ = _sweep(scores, labels)
    recall = np.r_[0.0, tps / n_pos]
    precision = np.r_[1.0, tps / (tps + fps)]
    auc_pr = float(np.sum(np.diff(recall) * precision[1:]))
    return auc_pr, Curve(thresholds=np.r_[np.inf, thresholds], x=recall, y=precision)


@dataclass(frozen=True)
class ExperimentSettings:
    """Component settings shared by every experiment of a run."""
    split: SplitSpec = SplitSpec()
    vae: VaeConfig = VaeConfig()
    forest: ForestParams = ForestParams()
    boosted: BoostedParams = BoostedParams()
    threshold: float = 0.7
    max_iter: int = 100


@dataclass(eq=False)
class EvalReport:
    kind: ClassifierKind
    mode: TrainingMode
    representation: Representation
    seed: int
    confusion: ConfusionMatrix
    balanced_accuracy: float
    prf: PrfScores
    auc_roc: float
    auc_pr: float
    roc: Curve
    pr: Curve
    processing_time_seconds: float
    representation_time_seconds: float
    label_counts: Dict[str, Dict[str, int]]
    train_indices: np.ndarray
    test_indices: np.ndarray
    unlabeled_indices: np.ndarray
    selftrain: Optional[SelfTrainReport] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"{self.representation.value}-{self.mode.value}-{self.kind.value}"

    def metrics(self) -> Dict[str, float]:
        """Deterministic scalar metrics, in table order."""
        out = {"balanced_accuracy": self.balanced_accuracy}
        for cls, scores in self.prf.per_class.items():
            out[f"precision_{cls.lower()}"] = scores.precision
            out[f"recall_{cls.lower()}"] = scores.recall
            out[f"f1_{cls.lower()}"] = scores.f1
        out["precision_weighted"] = self.prf.weighted.precision
        out["recall_weighted"] = self.prf.weighted.recall
        out["f1_weighted"] = self.prf.weighted.f1
        out["auc_roc"] = self.auc_roc
        out["auc_pr"] = self.auc_pr
        return out

    def to_dict(self, include_timings: bool = True) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "classifier": self.kind.value,
            "mode": self.mode.value,
            "representation": self.representation.value,
            "seed": self.seed,
            "metrics": self.metrics(),
            "confusion": self.confusion.to_dict(),
            "prf": self.prf.to_dict(),
            "label_counts": self.label_counts,
            "warnings": list(self.warnings),
        }
        if self.selftrain is not None:
            data["selftrain"] = self.selftrain.to_dict()
        if include_timings:
            data["processing_time_seconds"] = self.processing_time_seconds
            data["representation_time_seconds"] = self.representation_time_seconds
        return data


def _rows_key(mode: TrainingMode, rows: np.ndarray) -> Tuple[str, str]:
    return mode.value, blake3(np.ascontiguousarray(rows, dtype=np.int64).tobytes()).hexdigest()


def _counts(labels: np.ndarray) -> Dict[str, int]:
    return {c.name: int(np.sum(labels == c)) for c in WindowLabel}


def run_experiment(matrix: FeatureMatrix, kind: ClassifierKind, mode: TrainingMode,
                   representation: Representation, seed: int,
                   settings: ExperimentSettings = ExperimentSettings(),
                   vae_cache: Optional[Dict[Tuple[str, str], VaeModel]] = None) -> EvalReport:
    """Split, optionally encode, train, and score the untouched test rows.

    The normalizer and VAE only ever see train-side rows; in SELF_TRAIN mode
    that includes the unlabeled pool, which never reaches the test set.
    """
    train_idx, test_idx = split_rows(matrix, settings.split)
    if mode is TrainingMode.SELF_TRAIN:
        unlabeled_idx = np.nonzero(~matrix.labeled_mask)[0]
    else:
        unlabeled_idx = np.array([], dtype=np.int64)
    fit_rows = np.concatenate([train_idx, unlabeled_idx])
    logger.debug("Split: %d train, %d test, %d unlabeled pool", len(train_idx), len(test_idx), len(unlabeled_idx))

    rep_start = time.perf_counter()
    if representation is Representation.VAE:
        key = _rows_key(mode, fit_rows)
        vae_model = vae_cache.get(key) if vae_cache is not None else None
        if vae_model is None:
            vae_model = fit_vae(matrix.select_rows(fit_rows), settings.vae)
            if vae_cache is not None:
                vae_cache[key] = vae_model
        features = vae_model.transform(matrix)
    else:
        features = matrix
    representation_time = time.perf_counter() - rep_start

    X, y = features.values, features.labels
    warnings: List[str] = []
    selftrain_report = None
    start = time.perf_counter()
    if mode is TrainingMode.SUPERVISED:
        model = fit_model(kind, X[train_idx], y[train_idx], seed, settings.forest, settings.boosted)
        train_labels = y[train_idx]
    else:
        cfg = SelfTrainConfig(threshold=settings.threshold, max_iter=settings.max_iter, base=kind, seed=seed)
        model, augmented, selftrain_report = self_train(features.select_rows(fit_rows), cfg,
                                                        settings.forest, settings.boosted)
        train_labels = augmented.labels
    proba = predict_proba(model, X[test_idx])
    processing_time = time.perf_counter() - start
    warnings.extend(model.warnings)

    y_test = y[test_idx]
    report = EvalReport(
        kind=kind, mode=mode, representation=representation, seed=seed,
        **_scores(proba, y_test, warnings),
        processing_time_seconds=processing_time,
        representation_time_seconds=representation_time,
        label_counts={"train": _counts(train_labels), "test": _counts(y_test),
                      "unlabeled_pool": {"UNLABELED": len(unlabeled_idx)}},
        train_indices=train_idx, test_indices=test_idx, unlabeled_indices=unlabeled_idx,
        selftrain=selftrain_report, warnings=warnings,
    )
    logger.info("%s: balanced accuracy %.4f, AUC-ROC %.4f, AUC-PR %.4f (%.2fs)", report.name,
                report.balanced_accuracy, report.auc_roc, report.auc_pr, processing_time)
    return report


def _scores(proba: np.ndarray, y_test: np.ndarray, warnings: List[str]) -> Dict[str, Any]:
    y_pred = (proba[:, 1] > proba[:, 0]).astype(np.int8)
    confusion = ConfusionMatrix.from_predictions(y_test, y_pred)
    auc_roc, roc = roc_auc(proba[:, 1], y_test)
    auc_pr, pr = pr_curve(proba[:, 1], y_test)
    prf = prf_scores(confusion)
    warnings.extend(prf.flags)
    return {"confusion": confusion, "balanced_accuracy": balanced_accuracy(confusion), "prf": prf,
            "auc_roc": auc_roc, "auc_pr": auc_pr, "roc": roc, "pr": pr}


def score_model(model: Model, features: FeatureMatrix, test_idx: np.ndarray, mode: TrainingMode,
                representation: Representation) -> EvalReport:
    """Score an already fitted model on the given rows."""
    test_idx = np.asarray(test_idx, dtype=np.int64)
    start = time.perf_counter()
    proba = predict_proba(model, features.values[test_idx])
    elapsed = time.perf_counter() - start
    warnings = list(model.warnings)
    y_test = features.labels[test_idx]
    return EvalReport(
        kind=model.kind, mode=mode, representation=representation, seed=model.seed,
        **_scores(proba, y_test, warnings),
        processing_time_seconds=elapsed, representation_time_seconds=0.0,
        label_counts={"test": _counts(y_test)},
        train_indices=np.array([], dtype=np.int64), test_indices=test_idx,
        unlabeled_indices=np.array([], dtype=np.int64), warnings=warnings,
    )


def write_eval_report(report: EvalReport, out_dir: Union[str, Path]) -> Path:
    """report.json with every scalar plus roc.csv and pr.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "report.json", report.to_dict(include_timings=True))
    report.roc.to_frame().to_csv(out_dir / "roc.csv", index=False, float_format="%.17g")
    report.pr.to_frame().to_csv(out_dir / "pr.csv", index=False, float_format="%.17g")
    return out_dir
