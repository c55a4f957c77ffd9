"""
Window feature extraction for aad.
Slices aligned streams into 1-minute windows and computes 22 statistics per stream.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import find_peaks

from aad.errors import AllColumnsInvalid, ConfigError, DataError, NoCompleteWindow, SessionMismatch
from aad.models import (
    GRID_RATE,
    STREAM_NAMES,
    WINDOW_SECONDS,
    AlignedSession,
    FeatureMatrix,
    LabelClass,
    LabelSet,
    WindowLabel,
)


logger = logging.getLogger(__name__)

MAX_GAP_FRACTION = 0.5
HIST_BINS = 16
PERM_ORDER = 3
SVD_EMBEDDING = 10


@dataclass(frozen=True)
class WindowSpec:
    """Non-overlapping analysis windows."""
    length: float = WINDOW_SECONDS  # seconds
    overlap: float = 0.0

    def __post_init__(self) -> None:
        if not self.length > 0:
            raise ConfigError("Window length must be positive")
        if self.overlap != 0:
            raise ConfigError("Only non-overlapping windows are supported")

    def samples(self, grid_rate: float = GRID_RATE) -> int:
        return int(round(self.length * grid_rate))

    def to_dict(self) -> Dict[str, float]:
        return {"length": self.length, "overlap": self.overlap}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WindowSpec":
        return cls(**data)


def _entropy(probabilities: np.ndarray, n_states: int) -> float:
    """Shannon entropy normalised to [0, 1] by log(n_states)."""
    p = probabilities[probabilities > 0]
    return float(-np.sum(p * np.log(p)) / math.log(n_states))


def _is_flat(x: np.ndarray, m2: float) -> bool:
    return m2 <= (1e-12 * max(1.0, abs(float(x.mean())))) ** 2


def skewness(x: np.ndarray) -> float:
    deviation = x - x.mean()
    m2 = float(np.mean(deviation ** 2))
    if _is_flat(x, m2):
        return math.nan
    return float(np.mean(deviation ** 3) / m2 ** 1.5)


def kurtosis(x: np.ndarray) -> float:
    """Excess kurtosis."""
    deviation = x - x.mean()
    m2 = float(np.mean(deviation ** 2))
    if _is_flat(x, m2):
        return math.nan
    return float(np.mean(deviation ** 4) / m2 ** 2 - 3.0)


def energy(x: np.ndarray) -> float:
    return float(np.sum(x * x))


def line_integral(x: np.ndarray) -> float:
    return float(np.sum(np.abs(np.diff(x))))


def iqr(x: np.ndarray) -> float:
    q25, q75 = np.percentile(x, [25, 75])
    return float(q75 - q25)


def inter_percentile_range(x: np.ndarray) -> float:
    p5, p95 = np.percentile(x, [5, 95])
    return float(p95 - p5)


def sign_changes(x: np.ndarray) -> float:
    return float(np.count_nonzero(np.diff(np.signbit(x))))


def histogram_entropy(x: np.ndarray, bins: int = HIST_BINS) -> float:
    counts, _ = np.histogram(x, bins=bins)
    return _entropy(counts / counts.sum(), bins)


def permutation_entropy(x: np.ndarray, order: int = PERM_ORDER) -> float:
    if len(x) < order:
        return math.nan
    ranks = np.argsort(sliding_window_view(x, order), axis=1, kind="stable")
    codes = ranks @ (order ** np.arange(order))
    _, counts = np.unique(codes, return_counts=True)
    return _entropy(counts / counts.sum(), math.factorial(order))


def svd_entropy(x: np.ndarray, embedding: int = SVD_EMBEDDING) -> float:
    if len(x) < embedding:
        return math.nan
    singular = np.linalg.svd(sliding_window_view(x, embedding), compute_uv=False)
    total = singular.sum()
    if not total > 0:
        return math.nan
    return _entropy(singular / total, embedding)


STATISTICS: Dict[str, Callable[[np.ndarray], float]] = {
    "mean": lambda x: float(np.mean(x)),
    "std": lambda x: float(np.std(x)),
    "min": lambda x: float(np.min(x)),
    "max": lambda x: float(np.max(x)),
    "ptp": lambda x: float(np.ptp(x)),
    "sum": lambda x: float(np.sum(x)),
    "energy": energy,
    "skewness": skewness,
    "kurtosis": kurtosis,
    "n_peaks": lambda x: float(len(find_peaks(x)[0])),
    "rms": lambda x: float(np.sqrt(np.mean(x * x))),
    "line_integral": line_integral,
    "n_above_mean": lambda x: float(np.count_nonzero(x > x.mean())),
    "n_below_mean": lambda x: float(np.count_nonzero(x < x.mean())),
    "n_sign_changes": sign_changes,
    "iqr": iqr,
    "ipr_5_95": inter_percentile_range,
    "p5": lambda x: float(np.percentile(x, 5)),
    "p95": lambda x: float(np.percentile(x, 95)),
    "hist_entropy": histogram_entropy,
    "perm_entropy": permutation_entropy,
    "svd_entropy": svd_entropy,
}


@dataclass(frozen=True)
class FeatureCatalog:
    """Ordered statistic names computed for every stream."""
    names: Tuple[str, ...] = tuple(STATISTICS)
    version: str = "1"

    def __post_init__(self) -> None:
        if len(self.names) != 22 or len(set(self.names)) != 22:
            raise ConfigError("The catalog holds exactly 22 unique statistics")
        unknown = [name for name in self.names if name not in STATISTICS]
        if unknown:
            raise ConfigError(f"Unknown statistics: {', '.join(unknown)}")

    def column_names(self, streams: Tuple[str, ...] = STREAM_NAMES) -> Tuple[str, ...]:
        return tuple(f"{stream}.{stat}" for stream in streams for stat in self.names)


DEFAULT_CATALOG = FeatureCatalog()


def stat_features(window: np.ndarray, gap_mask: Optional[np.ndarray] = None,
                  catalog: FeatureCatalog = DEFAULT_CATALOG) -> np.ndarray:
    """Catalog statistics of one window; gap samples are excluded."""
    window = np.asarray(window, dtype=np.float64)
    if gap_mask is not None and np.any(gap_mask):
        gap_mask = np.asarray(gap_mask, dtype=bool)
        if gap_mask.mean() > MAX_GAP_FRACTION:
            return np.full(len(catalog.names), np.nan)
        window = window[~gap_mask]
    return np.array([STATISTICS[name](window) for name in catalog.names], dtype=np.float64)


def extract_features(aligned: AlignedSession, spec: WindowSpec = WindowSpec(),
                     catalog: FeatureCatalog = DEFAULT_CATALOG) -> FeatureMatrix:
    """198-column matrix, one row per complete window; rows start UNLABELED."""
    per_window = spec.samples(aligned.grid_rate)
    n_windows = aligned.n_samples // per_window
    if n_windows == 0:
        raise NoCompleteWindow(
            f"{aligned.participant_id}/{aligned.session_id}: {aligned.n_samples} grid samples "
            f"hold no complete {spec.length:.0f} s window"
        )
    usable = n_windows * per_window
    gaps = aligned.gap_mask[:usable].reshape(n_windows, per_window)

    n_stats = len(catalog.names)
    values = np.empty((n_windows, len(STREAM_NAMES) * n_stats), dtype=np.float64)
    for s, stream in enumerate(STREAM_NAMES):
        windows = aligned.streams[stream][:usable].reshape(n_windows, per_window)
        for w in range(n_windows):
            values[w, s * n_stats:(s + 1) * n_stats] = stat_features(windows[w], gaps[w], catalog)

    logger.info("Extracted %d windows x %d features from %s/%s", n_windows, values.shape[1],
                aligned.participant_id, aligned.session_id)
    return FeatureMatrix(
        column_names=catalog.column_names(),
        values=values,
        participant_ids=[aligned.participant_id] * n_windows,
        session_ids=[aligned.session_id] * n_windows,
        window_starts=aligned.grid_start + np.arange(n_windows) * spec.length,
        labels=np.full(n_windows, WindowLabel.UNLABELED, dtype=np.int8),
    )


def drop_gap_windows(m: FeatureMatrix) -> FeatureMatrix:
    """Remove rows with no finite value (windows dominated by gaps)."""
    keep = np.isfinite(m.values).any(axis=1)
    if not keep.all():
        logger.info("Dropping %d gap-dominated window(s)", int((~keep).sum()))
    return m.select_rows(np.flatnonzero(keep))


def drop_invalid_columns(m: FeatureMatrix) -> FeatureMatrix:
    """Remove every column holding a NaN or infinite value."""
    finite = np.isfinite(m.values).all(axis=0)
    if not finite.any():
        raise AllColumnsInvalid(f"All {m.n_columns} feature columns contain non-finite values")
    removed = tuple(name for name, ok in zip(m.column_names, finite) if not ok)
    if removed:
        logger.warning("Dropping %d non-finite column(s): %s", len(removed), ", ".join(removed))
    return m.with_values(
        column_names=[name for name, ok in zip(m.column_names, finite) if ok],
        values=m.values[:, finite],
        removed_columns=m.removed_columns + removed,
    )


def _touches(window_starts: np.ndarray, start: float, end: float, per_window: int,
             grid_rate: float) -> np.ndarray:
    """Window has at least one grid sample inside [start, end)."""
    first = np.maximum(np.ceil((start - window_starts) * grid_rate - 1e-9), 0)
    return (first < per_window) & (window_starts + first / grid_rate < end)


def label_windows(m: FeatureMatrix, labels: LabelSet, spec: WindowSpec = WindowSpec(),
                  grid_rate: float = GRID_RATE) -> FeatureMatrix:
    """Attach window labels from a session's spans.

    Any grid sample inside an AGITATION span makes the window AGITATION;
    otherwise NORMAL when the session is fully labeled or the window lies
    entirely inside a NORMAL span; otherwise UNLABELED.
    """
    mismatched = (m.participant_ids != labels.participant_id) | (m.session_ids != labels.session_id)
    if mismatched.any():
        raise SessionMismatch(
            f"Labels for {labels.participant_id}/{labels.session_id} applied to rows of "
            f"{m.participant_ids[mismatched][0]}/{m.session_ids[mismatched][0]}"
        )

    per_window = spec.samples(grid_rate)
    starts = m.window_starts
    agitation = np.zeros(m.n_rows, dtype=bool)
    for span in labels.spans_of(LabelClass.AGITATION):
        agitation |= _touches(starts, span.start, span.end, per_window, grid_rate)

    normal = np.full(m.n_rows, labels.fully_labeled)
    if not labels.fully_labeled:
        last_sample = starts + (per_window - 1) / grid_rate
        for span in labels.spans_of(LabelClass.NORMAL):
            normal |= (starts >= span.start) & (last_sample < span.end)

    codes = np.where(agitation, WindowLabel.AGITATION,
                     np.where(normal, WindowLabel.NORMAL, WindowLabel.UNLABELED)).astype(np.int8)
    return m.with_labels(codes)


META_COLUMNS = ("participant_id", "session_id", "window_start", "label")
REMOVED_PREFIX = "# removed_columns="


def write_feature_matrix(m: FeatureMatrix, path: Union[str, Path]) -> Path:
    """CSV with metadata columns first; reals with 17 significant digits.

    Columns dropped during cleaning are listed on a leading comment line.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(m.values, columns=list(m.column_names))
    frame.insert(0, "label", [WindowLabel(code).name for code in m.labels])
    frame.insert(0, "window_start", m.window_starts)
    frame.insert(0, "session_id", m.session_ids)
    frame.insert(0, "participant_id", m.participant_ids)
    with open(path, "w", newline="") as f:
        if m.removed_columns:
            f.write(REMOVED_PREFIX + ",".join(m.removed_columns) + "\n")
        frame.to_csv(f, index=False, float_format="%.17g")
    return path


def read_feature_matrix(path: Union[str, Path]) -> FeatureMatrix:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Feature matrix does not exist: {path}")
    with open(path, "r") as f:
        first = f.readline().rstrip("\n")
    has_comment = first.startswith(REMOVED_PREFIX)
    removed = tuple(c for c in first[len(REMOVED_PREFIX):].split(",") if c) if has_comment else ()
    frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=False, na_values=[""],
                        skiprows=1 if has_comment else 0,
                        dtype={"participant_id": str, "session_id": str, "label": str})
    missing = [c for c in META_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {', '.join(missing)}")
    try:
        labels = [WindowLabel[name] for name in frame["label"]]
    except KeyError as e:
        raise DataError(f"{path}: unknown label {e}") from e
    columns = [c for c in frame.columns if c not in META_COLUMNS]
    return FeatureMatrix(
        column_names=tuple(columns),
        values=frame[columns].to_numpy(dtype=np.float64),
        participant_ids=frame["participant_id"].to_numpy(dtype=object),
        session_ids=frame["session_id"].to_numpy(dtype=object),
        window_starts=frame["window_start"].to_numpy(dtype=np.float64),
        labels=np.array(labels, dtype=np.int8),
        removed_columns=removed,
    )
