"""
End-to-end experiment runner for aad.
Builds the window feature matrix, runs the representation x training mode x
classifier matrix, and writes reports, Markdown tables and a reproducible summary.
"""

import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Tuple

from aad.config import PipelineConfig
from aad.errors import ConfigError, DataError
from aad.evaluation import EvalReport, run_experiment, write_eval_report
from aad.features import (
    WindowSpec,
    drop_gap_windows,
    drop_invalid_columns,
    extract_features,
    label_windows,
    write_feature_matrix,
)
from aad.ingest import discover_sessions, load_session, validate_session
from aad.models import (
    ClassifierKind,
    FeatureMatrix,
    LabelSet,
    Representation,
    SessionRecording,
    TrainingMode,
    concat_matrices,
)
from aad.preprocess import align_session
from aad.selftrain import write_selftrain_report
from aad.storage import write_json
from aad.synth import iter_cohort
from aad.vae import VaeModel, save_vae, write_history_csv


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OWNED_OUTPUTS = ("features", "vae", "experiments", "tables.md", "summary.json")

CONFIGURATIONS: Tuple[Tuple[Representation, TrainingMode, str], ...] = (
    (Representation.RAW, TrainingMode.SUPERVISED, "Supervised learning, statistical features"),
    (Representation.RAW, TrainingMode.SELF_TRAIN, "Self-training, statistical features"),
    (Representation.VAE, TrainingMode.SUPERVISED, "Supervised learning, VAE latent features"),
    (Representation.VAE, TrainingMode.SELF_TRAIN, "Self-training, VAE latent features"),
)
CLASSIFIERS = (ClassifierKind.RANDOM_FOREST, ClassifierKind.EXTRA_TREES, ClassifierKind.BOOSTED)
CLASSIFIER_TITLES = {
    ClassifierKind.RANDOM_FOREST: "Random Forest",
    ClassifierKind.EXTRA_TREES: "Extra Trees",
    ClassifierKind.BOOSTED: "Boosted Trees",
}
TABLE_METRICS = (
    ("balanced_accuracy", "Balanced accuracy"),
    ("precision_weighted", "Precision (weighted)"),
    ("recall_weighted", "Recall (weighted)"),
    ("f1_weighted", "F1 (weighted)"),
    ("precision_agitation", "Precision (AA)"),
    ("recall_agitation", "Recall (AA)"),
    ("f1_agitation", "F1 (AA)"),
    ("auc_roc", "AUC-ROC"),
    ("auc_pr", "AUC-PR"),
)


def session_features(rec: SessionRecording, labels: LabelSet, window: WindowSpec = WindowSpec()) -> FeatureMatrix:
    """Validate, align, window and label one session."""
    validate_session(rec, labels)
    aligned = align_session(rec)
    return label_windows(extract_features(aligned, window), labels, window)


def build_feature_matrix(sessions: Iterable[Tuple[SessionRecording, LabelSet]],
                         window: WindowSpec = WindowSpec()) -> FeatureMatrix:
    """One cleaned matrix over every session; gap windows first, then non-finite columns."""
    matrices = [session_features(rec, labels, window) for rec, labels in sessions]
    if not matrices:
        raise DataError("No sessions to extract features from")
    matrix = drop_invalid_columns(drop_gap_windows(concat_matrices(matrices)))
    logger.info("Feature matrix: %d windows x %d columns, labels %s", matrix.n_rows, matrix.n_columns,
                matrix.label_counts())
    return matrix


def iter_sessions(config: PipelineConfig) -> Iterator[Tuple[SessionRecording, LabelSet]]:
    """Sessions from [pipeline] data_dir, or the synthetic cohort when unset."""
    if config.pipeline.data_dir is None:
        yield from iter_cohort(config.cohort_spec())
        return
    for session_dir in discover_sessions(config.pipeline.data_dir):
        logger.info("Loading %s", session_dir)
        yield load_session(session_dir)


@dataclass
class PipelineResult:
    out_dir: Path
    matrix: FeatureMatrix
    reports: List[EvalReport] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)

    def report(self, representation: Representation, mode: TrainingMode, kind: ClassifierKind) -> EvalReport:
        for r in self.reports:
            if (r.representation, r.mode, r.kind) == (representation, mode, kind):
                return r
        raise KeyError(f"No report for {representation.value}/{mode.value}/{kind.value}")


def _fmt(value: float) -> str:
    return f"{value:.4f}"


def results_tables(reports: List[EvalReport]) -> str:
    """One Markdown table per configuration; rows are metrics, columns classifiers."""
    by_key = {(r.representation, r.mode, r.kind): r for r in reports}
    blocks = []
    for representation, mode, title in CONFIGURATIONS:
        row_reports = [by_key.get((representation, mode, kind)) for kind in CLASSIFIERS]
        if not any(row_reports):
            continue
        lines = [f"## {title}", "",
                 "| Metric | " + " | ".join(CLASSIFIER_TITLES[k] for k in CLASSIFIERS) + " |",
                 "|---|" + "---:|" * len(CLASSIFIERS)]
        for key, label in TABLE_METRICS:
            cells = [_fmt(r.metrics()[key]) if r else "-" for r in row_reports]
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
        cells = [f"{r.processing_time_seconds:.2f}" if r else "-" for r in row_reports]
        lines.append("| Processing time (s) | " + " | ".join(cells) + " |")
        if mode is TrainingMode.SELF_TRAIN:
            cells = [str(r.selftrain.n_iterations) if r and r.selftrain else "-" for r in row_reports]
            lines.append("| Self-training iterations | " + " | ".join(cells) + " |")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def _write_outputs(config: PipelineConfig, matrix: FeatureMatrix, reports: List[EvalReport],
                   vae_models: Dict[TrainingMode, VaeModel], out: Path) -> Dict:
    features_dir = out / "features"
    write_feature_matrix(matrix, features_dir / "raw.csv")

    vae_summary = {}
    for mode, model in vae_models.items():
        digest = save_vae(model, out / "vae" / f"vae-{mode.value}.json")
        write_history_csv(model.history, out / "vae" / f"history-{mode.value}.csv")
        encoded = model.transform(matrix)
        write_feature_matrix(encoded, features_dir / f"vae-{mode.value}.csv")
        vae_summary[mode.value] = {"model_digest": digest, "features_digest": encoded.digest(),
                                   "final_train_vae": model.history.records[-1].train_vae,
                                   "train_entropy_floor": model.history.train_entropy_floor}

    experiments = {}
    for report in reports:
        exp_dir = write_eval_report(report, out / "experiments" / report.name)
        if report.selftrain is not None:
            write_selftrain_report(report.selftrain, exp_dir / "selftrain.csv", exp_dir / "pseudo_labels.csv")
        experiments[report.name] = report.to_dict(include_timings=False)

    with open(out / "tables.md", "w") as f:
        f.write(results_tables(reports))

    summary = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "features": {
            "rows": matrix.n_rows,
            "columns": matrix.n_columns,
            "removed_columns": list(matrix.removed_columns),
            "label_counts": matrix.label_counts(),
            "digest": matrix.digest(),
        },
        "vae": vae_summary,
        "experiments": experiments,
    }
    write_json(out / "summary.json", summary)
    return summary


def _check_out_dir(out: Path) -> None:
    if out.exists() and not out.is_dir():
        raise ConfigError(f"Output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not (out / "summary.json").is_file():
        raise ConfigError(f"Output directory {out} is not empty and holds no aad summary.json; "
                          "choose an empty or new directory")


def _publish(staging: Path, out: Path) -> None:
    """Move staged outputs into out, replacing only the entries aad writes."""
    if not out.exists():
        os.replace(staging, out)
        return
    for name in OWNED_OUTPUTS:
        target = out / name
        if target.is_dir() and not target.is_symlink():
            shutil.rmtree(target)
        elif target.exists() or target.is_symlink():
            target.unlink()
    # summary.json last; it marks a complete run
    for entry in sorted(staging.iterdir(), key=lambda p: p.name == "summary.json"):
        os.replace(entry, out / entry.name)
    staging.rmdir()


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    """Run all twelve experiments; outputs appear in out_dir only if every step succeeds.

    An existing out_dir must be empty or hold a previous aad run; only the entries
    in OWNED_OUTPUTS are replaced, anything else in it is left alone.
    """
    out = Path(config.pipeline.out_dir).resolve()
    _check_out_dir(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        matrix = build_feature_matrix(iter_sessions(config), config.window)
        settings = config.experiment_settings()
        seed = config.seeds.classifier
        vae_cache: Dict = {}
        reports = []
        for representation, mode, _ in CONFIGURATIONS:
            for kind in CLASSIFIERS:
                reports.append(run_experiment(matrix, kind, mode, representation, seed, settings, vae_cache))
        vae_models = {TrainingMode(key[0]): model for key, model in vae_cache.items()}
        summary = _write_outputs(config, matrix, reports, vae_models, staging)

        _publish(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    logger.info("Wrote %d experiment reports to %s", len(reports), out)
    return PipelineResult(out_dir=out, matrix=matrix, reports=reports, summary=summary)
