"""
Pipeline configuration for aad.
A TOML document with one table per component; every randomness source is
derived from the single [pipeline] seed.
"""

import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Type, Union

import toml

from aad.ensemble import BoostedParams, ForestParams
from aad.errors import ConfigError
from aad.evaluation import ExperimentSettings, SplitSpec
from aad.features import WindowSpec
from aad.selftrain import SelfTrainConfig
from aad.seeding import expand_seed
from aad.synth import CohortSpec
from aad.vae import VaeConfig


logger = logging.getLogger(__name__)

SEED_ORDER = ("synth", "split", "vae", "classifier")


@dataclass(frozen=True)
class ComponentSeeds:
    synth: int
    split: int
    vae: int
    classifier: int

    def to_dict(self) -> Dict[str, int]:
        return {name: getattr(self, name) for name in SEED_ORDER}


def derive_seeds(master_seed: int) -> ComponentSeeds:
    """Component seeds in fixed order from the splitmix64 stream of the master seed."""
    return ComponentSeeds(*expand_seed(master_seed, len(SEED_ORDER)))


@dataclass(frozen=True)
class SelfTrainSettings:
    """Loop settings; the base classifier and seed are chosen per experiment."""
    threshold: float = 0.7
    max_iter: int = 100

    def __post_init__(self) -> None:
        SelfTrainConfig(threshold=self.threshold, max_iter=self.max_iter)

    def to_dict(self) -> Dict[str, Any]:
        return {"threshold": self.threshold, "max_iter": self.max_iter}


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    data_dir: Optional[str] = None   # None means generate the synthetic cohort
    out_dir: str = "results"
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if self.n_jobs < 1:
            raise ConfigError("pipeline n_jobs must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        data = {"seed": self.seed, "out_dir": self.out_dir, "n_jobs": self.n_jobs}
        if self.data_dir is not None:
            data["data_dir"] = self.data_dir
        return data


# Seeds come from [pipeline] only; a per-section seed would bypass the expansion.
SECTIONS: Dict[str, Type[Any]] = {
    "synth": CohortSpec,
    "window": WindowSpec,
    "vae": VaeConfig,
    "forest": ForestParams,
    "boosted": BoostedParams,
    "selftrain": SelfTrainSettings,
    "split": SplitSpec,
    "pipeline": RunSettings,
}
DERIVED_KEYS = {"synth": {"seed"}, "vae": {"seed", "input_dim"}, "split": {"seed"}}


@dataclass(frozen=True)
class PipelineConfig:
    synth: CohortSpec = CohortSpec()
    window: WindowSpec = WindowSpec()
    vae: VaeConfig = VaeConfig()
    forest: ForestParams = ForestParams()
    boosted: BoostedParams = BoostedParams()
    selftrain: SelfTrainSettings = SelfTrainSettings()
    split: SplitSpec = SplitSpec()
    pipeline: RunSettings = RunSettings()

    @property
    def seeds(self) -> ComponentSeeds:
        return derive_seeds(self.pipeline.seed)

    def cohort_spec(self) -> CohortSpec:
        return replace(self.synth, seed=self.seeds.synth)

    def experiment_settings(self) -> ExperimentSettings:
        seeds = self.seeds
        return ExperimentSettings(
            split=replace(self.split, seed=seeds.split),
            vae=replace(self.vae, seed=seeds.vae),
            forest=replace(self.forest, n_jobs=max(self.forest.n_jobs, self.pipeline.n_jobs)),
            boosted=self.boosted,
            threshold=self.selftrain.threshold,
            max_iter=self.selftrain.max_iter,
        )

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None,
                       data_dir: Optional[Union[str, Path]] = None) -> "PipelineConfig":
        run = self.pipeline
        if seed is not None:
            run = replace(run, seed=seed)
        if out_dir is not None:
            run = replace(run, out_dir=str(out_dir))
        if data_dir is not None:
            run = replace(run, data_dir=str(data_dir))
        return replace(self, pipeline=run)

    def to_dict(self) -> Dict[str, Any]:
        """Effective configuration including the derived seeds."""
        data = {name: getattr(self, name).to_dict() for name in SECTIONS}
        for name, keys in DERIVED_KEYS.items():
            for key in keys:
                data[name].pop(key, None)
        data["seeds"] = self.seeds.to_dict()
        return data


def _build_section(name: str, values: Any) -> Any:
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{name}] unknown key(s): {', '.join(unknown)}")
    derived = sorted(set(values) & DERIVED_KEYS.get(name, set()))
    if derived:
        raise ConfigError(f"[{name}] {', '.join(derived)} is derived and cannot be set; use [pipeline] seed")
    if name == "vae" and "hidden_dims" in values:
        values = {**values, "hidden_dims": tuple(values["hidden_dims"])}
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def config_from_dict(data: Dict[str, Any]) -> PipelineConfig:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown configuration section(s): {', '.join(unknown)}")
    return PipelineConfig(**{name: _build_section(name, values) for name, values in data.items()})


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """Read a TOML file; missing sections and keys take their defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file does not exist: {path}")
    try:
        with open(path, "r") as f:
            data = toml.load(f)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})") from e
    config = config_from_dict(data)
    logger.debug("Loaded configuration from %s", path)
    return config


def save_config(config: PipelineConfig, path: Union[str, Path]) -> Path:
    """Write the settable part of a configuration back as TOML."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = config.to_dict()
    data.pop("seeds")
    with open(path, "w") as f:
        toml.dump(data, f)
    return path
