"""
Main CLI interface for aad.
"""

import functools
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Optional, Tuple

import click
import numpy as np

from aad.config import PipelineConfig, load_config
from aad.ensemble import fit_model, load_model, save_model
from aad.errors import AadError, ConfigError
from aad.evaluation import score_model, split_rows, write_eval_report
from aad.features import read_feature_matrix, write_feature_matrix
from aad.ingest import discover_sessions, load_session, validate_session
from aad.models import ClassifierKind, FeatureMatrix, Representation, TrainingMode
from aad.pipeline import build_feature_matrix, iter_sessions, run_pipeline
from aad.selftrain import SelfTrainConfig, self_train, write_selftrain_report
from aad.storage import write_json
from aad.synth import write_cohort
from aad.vae import fit_vae, load_vae, save_vae, write_history_csv


logger = logging.getLogger(__name__)


class AadWorkspace:
    """Effective configuration plus the operations the CLI commands run."""

    def __init__(self, config_path: Optional[str] = None, seed: Optional[int] = None):
        self.config: PipelineConfig = load_config(config_path).with_overrides(seed=seed)

    def show_config(self) -> None:
        click.echo("Effective Configuration:")
        for section_name, section_data in self.config.to_dict().items():
            click.echo(f"\n[{section_name}]")
            for key, value in section_data.items():
                click.echo(f"  {key} = {value}")

    def _fit_rows(self, matrix: FeatureMatrix, mode: TrainingMode) -> Tuple[np.ndarray, np.ndarray]:
        """(train-side rows, test rows) under the configured split."""
        train_idx, test_idx = split_rows(matrix, self.config.experiment_settings().split)
        if mode is TrainingMode.SELF_TRAIN:
            train_idx = np.concatenate([train_idx, np.nonzero(~matrix.labeled_mask)[0]])
        return train_idx, test_idx

    def synth(self, out: Path) -> None:
        written = write_cohort(self.config.cohort_spec(), out)
        click.echo(f"Wrote {len(written)} synthetic sessions to {out}")

    def ingest(self, data_dir: Path, out: Optional[Path]) -> None:
        reports = []
        for session_dir in discover_sessions(data_dir):
            rec, labels = load_session(session_dir)
            report = validate_session(rec, labels)
            reports.append(report.to_dict())
            status = "clean" if report.is_clean else (
                f"{len(report.coverage_gaps)} gap(s), {len(report.misalignments)} misaligned span(s)")
            click.echo(f"{rec.participant_id}/{rec.session_id}: {report.usable_minutes:.1f} usable min, "
                       f"{len(labels.spans)} span(s), {'fully labeled' if labels.fully_labeled else 'unlabeled'}, "
                       f"{status}")
        if out is not None:
            write_json(out, {"sessions": reports})
            click.echo(f"Validation reports written to {out}")

    def extract(self, data_dir: Optional[Path], out: Path) -> None:
        config = self.config.with_overrides(data_dir=data_dir) if data_dir else self.config
        matrix = build_feature_matrix(iter_sessions(config), config.window)
        write_feature_matrix(matrix, out)
        click.echo(f"Wrote {matrix.n_rows} windows x {matrix.n_columns} features to {out} "
                   f"({matrix.label_counts()})")

    def train_vae(self, features: Path, mode: TrainingMode, out: Path) -> None:
        matrix = read_feature_matrix(features)
        rows, _ = self._fit_rows(matrix, mode)
        model = fit_vae(matrix.select_rows(rows), self.config.experiment_settings().vae)
        digest = save_vae(model, out)
        write_history_csv(model.history, out.with_suffix(".history.csv"))
        click.echo(f"Trained VAE on {len(rows)} rows; final loss {model.history.records[-1].train_vae:.4f}; "
                   f"saved to {out} ({digest[:16]})")

    def encode(self, features: Path, model_path: Path, out: Path) -> None:
        encoded = load_vae(model_path).transform(read_feature_matrix(features))
        write_feature_matrix(encoded, out)
        click.echo(f"Encoded {encoded.n_rows} windows into {encoded.n_columns} latent features: {out}")

    def fit(self, features: Path, kind: ClassifierKind, out: Path) -> None:
        matrix = read_feature_matrix(features)
        rows, _ = self._fit_rows(matrix, TrainingMode.SUPERVISED)
        settings = self.config.experiment_settings()
        model = fit_model(kind, matrix.values[rows], matrix.labels[rows], self.config.seeds.classifier,
                          settings.forest, settings.boosted)
        save_model(model, out)
        click.echo(f"Fitted {kind.value} on {len(rows)} labeled rows; saved to {out}")

    def self_train(self, features: Path, kind: ClassifierKind, out: Path) -> None:
        matrix = read_feature_matrix(features)
        rows, _ = self._fit_rows(matrix, TrainingMode.SELF_TRAIN)
        settings = self.config.experiment_settings()
        cfg = SelfTrainConfig(threshold=settings.threshold, max_iter=settings.max_iter, base=kind,
                              seed=self.config.seeds.classifier)
        model, _, report = self_train(matrix.select_rows(rows), cfg, settings.forest, settings.boosted)
        save_model(model, out)
        write_selftrain_report(report, out.with_suffix(".selftrain.csv"), out.with_suffix(".pseudo_labels.csv"))
        click.echo(f"Self-trained {kind.value}: {report.n_iterations} iteration(s), "
                   f"{report.n_pseudo_labeled} pseudo-labels, {report.termination_reason.value}; saved to {out}")

    def evaluate(self, features: Path, model_path: Path, mode: TrainingMode,
                 representation: Representation, out: Path) -> None:
        matrix = read_feature_matrix(features)
        _, test_idx = self._fit_rows(matrix, mode)
        report = score_model(load_model(model_path), matrix, test_idx, mode, representation)
        write_eval_report(report, out)
        click.echo(f"{report.name}: balanced accuracy {report.balanced_accuracy:.4f}, "
                   f"AUC-ROC {report.auc_roc:.4f}, AUC-PR {report.auc_pr:.4f}; report in {out}")

    def pipeline(self, out: Optional[Path], data_dir: Optional[Path], synth: bool) -> None:
        if synth and data_dir:
            raise ConfigError("--synth and --data are mutually exclusive")
        config = self.config.with_overrides(out_dir=out, data_dir=data_dir)
        if synth:
            config = replace(config, pipeline=replace(config.pipeline, data_dir=None))
        result = run_pipeline(config)
        click.echo(f"Ran {len(result.reports)} experiments on {result.matrix.n_rows} windows; "
                   f"results in {result.out_dir}")
        click.echo((result.out_dir / "tables.md").read_text())


def handle_errors(func: Callable[..., Any]) -> Callable[..., Any]:
    """Map aad errors onto exit codes with a diagnostic on stderr."""
    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except AadError as e:
            logger.debug("Command failed", exc_info=True)
            click.echo(f"Error ({type(e).__name__}): {e}", err=True)
            raise SystemExit(e.exit_code)
    return wrapper


def workspace_options(func: Callable[..., Any]) -> Callable[..., Any]:
    func = click.option("--seed", type=int, default=None, help="Master seed (overrides [pipeline] seed).")(func)
    func = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                        help="TOML configuration file.")(func)
    return func


CLASSIFIER_CHOICE = click.Choice([k.value for k in ClassifierKind])
MODE_CHOICE = click.Choice([m.value for m in TrainingMode])
REPRESENTATION_CHOICE = click.Choice([r.value for r in Representation])
PATH = click.Path(path_type=Path)


# CLI Commands
@click.group()
@click.option("--debug", is_flag=True, help="Enable verbose debug logging.")
@click.pass_context
def cli(ctx, debug):
    """aad detects agitation episodes in wearable sensor sessions."""
    ctx.ensure_object(dict)
    ctx.obj["debug"] = debug

    log_level = logging.DEBUG if debug else logging.INFO
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        force=True
    )


@cli.command()
@workspace_options
@handle_errors
def config(config_path, seed):
    """Show the effective configuration."""
    AadWorkspace(config_path, seed).show_config()


@cli.command()
@workspace_options
@click.option("--out", type=PATH, required=True, help="Directory for the generated archives.")
@handle_errors
def synth(config_path, seed, out):
    """Generate the synthetic cohort as E4 archives and label files."""
    AadWorkspace(config_path, seed).synth(out)


@cli.command()
@click.argument("data_dir", type=PATH)
@workspace_options
@click.option("--out", type=PATH, default=None, help="Write validation reports as JSON.")
@handle_errors
def ingest(data_dir, config_path, seed, out):
    """Parse and validate every session under DATA_DIR."""
    AadWorkspace(config_path, seed).ingest(data_dir, out)


@cli.command()
@click.option("--data", "data_dir", type=PATH, default=None, help="Session root; omit to use the synthetic cohort.")
@workspace_options
@click.option("--out", type=PATH, required=True, help="Feature matrix CSV to write.")
@handle_errors
def extract(data_dir, config_path, seed, out):
    """Build the labeled window feature matrix."""
    AadWorkspace(config_path, seed).extract(data_dir, out)


@cli.command(name="train-vae")
@click.argument("features", type=PATH)
@workspace_options
@click.option("--mode", type=MODE_CHOICE, default=TrainingMode.SUPERVISED.value,
              help="selftrain also trains on the unlabeled pool.")
@click.option("--out", type=PATH, required=True, help="VAE model file to write.")
@handle_errors
def train_vae(features, config_path, seed, mode, out):
    """Train the VAE on the train side of FEATURES."""
    AadWorkspace(config_path, seed).train_vae(features, TrainingMode(mode), out)


@cli.command()
@click.argument("features", type=PATH)
@click.option("--model", "model_path", type=PATH, required=True, help="VAE model file.")
@click.option("--out", type=PATH, required=True, help="Latent feature CSV to write.")
@handle_errors
def encode(features, model_path, out):
    """Replace features by the VAE latent means."""
    AadWorkspace().encode(features, model_path, out)


@cli.command()
@click.argument("features", type=PATH)
@workspace_options
@click.option("--classifier", type=CLASSIFIER_CHOICE, default=ClassifierKind.BOOSTED.value)
@click.option("--out", type=PATH, required=True, help="Model file to write.")
@handle_errors
def fit(features, config_path, seed, classifier, out):
    """Supervised fit on the labeled train side of FEATURES."""
    AadWorkspace(config_path, seed).fit(features, ClassifierKind(classifier), out)


@cli.command(name="self-train")
@click.argument("features", type=PATH)
@workspace_options
@click.option("--classifier", type=CLASSIFIER_CHOICE, default=ClassifierKind.BOOSTED.value)
@click.option("--out", type=PATH, required=True, help="Model file to write.")
@handle_errors
def self_train_command(features, config_path, seed, classifier, out):
    """Self-train on the train side of FEATURES plus its unlabeled rows."""
    AadWorkspace(config_path, seed).self_train(features, ClassifierKind(classifier), out)


@cli.command()
@click.argument("features", type=PATH)
@workspace_options
@click.option("--model", "model_path", type=PATH, required=True, help="Classifier model file.")
@click.option("--mode", type=MODE_CHOICE, default=TrainingMode.SUPERVISED.value)
@click.option("--representation", type=REPRESENTATION_CHOICE, default=Representation.RAW.value)
@click.option("--out", type=PATH, required=True, help="Report directory.")
@handle_errors
def evaluate(features, config_path, seed, model_path, mode, representation, out):
    """Score a model on the held-out test side of FEATURES."""
    AadWorkspace(config_path, seed).evaluate(features, model_path, TrainingMode(mode),
                                             Representation(representation), out)


@cli.command()
@workspace_options
@click.option("--synth", "use_synth", is_flag=True, help="Use the synthetic cohort (default without --data).")
@click.option("--data", "data_dir", type=PATH, default=None, help="Session root directory.")
@click.option("--out", type=PATH, default=None, help="Output directory (overrides [pipeline] out_dir).")
@handle_errors
def pipeline(config_path, seed, use_synth, data_dir, out):
    """Run the full 12-experiment matrix."""
    AadWorkspace(config_path, seed).pipeline(out, data_dir, use_synth)


if __name__ == "__main__":
    cli()
