"""
Core data models for aad.
Recordings, label sets, aligned streams and feature matrices shared across modules.
"""

from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from blake3 import blake3

from aad.errors import (
    DataError,
    InvalidSpan,
    MissingChannel,
    NonMonotonicData,
    OverlapConflict,
    ShapeMismatch,
)


GRID_RATE = 4.0
WINDOW_SECONDS = 60.0
IBI_RANGE = (0.33, 2.0)  # seconds


class ChannelName(Enum):
    """Raw wristband channels."""
    ACC_X = "ACC_X"
    ACC_Y = "ACC_Y"
    ACC_Z = "ACC_Z"
    BVP = "BVP"
    EDA = "EDA"
    TEMP = "TEMP"


REQUIRED_CHANNELS: Tuple[ChannelName, ...] = tuple(ChannelName)

# Stream-major order of the aligned session and of the feature columns.
STREAM_NAMES: Tuple[str, ...] = (
    "ACC_X", "ACC_Y", "ACC_Z", "ACC_MAG", "BVP_F", "HR", "EDA_PHASIC", "EDA_TONIC", "TEMP",
)


class LabelClass(Enum):
    """Classes a nurse-annotated span may carry."""
    NORMAL = "NORMAL"
    AGITATION = "AGITATION"


class WindowLabel(IntEnum):
    """Per-window label codes; -1 marks unlabeled rows."""
    UNLABELED = -1
    NORMAL = 0
    AGITATION = 1


class ClassifierKind(Enum):
    """Base classifiers of the experiment matrix."""
    RANDOM_FOREST = "rf"
    EXTRA_TREES = "et"
    BOOSTED = "boosted"


class TrainingMode(Enum):
    SUPERVISED = "supervised"
    SELF_TRAIN = "selftrain"


class Representation(Enum):
    RAW = "raw"
    VAE = "vae"


def _frozen_array(values: Any, dtype: Any = np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ChannelSeries:
    """One raw channel sampled at a fixed rate."""
    name: ChannelName
    start_time: float        # unix seconds, UTC
    sample_rate: float       # Hz
    values: np.ndarray       # physical units
    gap_mask: Optional[np.ndarray] = None  # True where the source cell was invalid

    def __post_init__(self) -> None:
        if not self.sample_rate > 0:
            raise NonMonotonicData(
                f"{self.name.value}: sample rate must be positive, got {self.sample_rate}"
            )
        values = _frozen_array(self.values)
        if values.ndim != 1:
            raise ShapeMismatch(f"{self.name.value}: values must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise DataError(f"{self.name.value}: values contain NaN or Inf; record them as gaps")
        if self.gap_mask is None:
            gaps = np.zeros(len(values), dtype=bool)
        else:
            gaps = np.array(self.gap_mask, dtype=bool, copy=True)
            if gaps.shape != values.shape:
                raise ShapeMismatch(f"{self.name.value}: gap mask length differs from values")
        gaps.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gap_mask", gaps)

    @property
    def n_samples(self) -> int:
        return len(self.values)

    @property
    def duration(self) -> float:
        """Seconds covered by the samples."""
        return self.n_samples / self.sample_rate

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(self.n_samples) / self.sample_rate

    def with_values(self, values: np.ndarray, gap_mask: Optional[np.ndarray] = None) -> "ChannelSeries":
        """Copy with new sample values (same name, start and rate)."""
        return replace(self, values=values, gap_mask=self.gap_mask if gap_mask is None else gap_mask)


@dataclass(frozen=True, eq=False)
class SessionRecording:
    """One participant-session of raw wristband channels."""
    participant_id: str
    session_id: str
    channels: Dict[ChannelName, ChannelSeries]

    def __post_init__(self) -> None:
        missing = [c.value for c in REQUIRED_CHANNELS if c not in self.channels]
        if missing:
            raise MissingChannel(
                f"Session {self.participant_id}/{self.session_id} is missing channels: {', '.join(missing)}"
            )

    def __getitem__(self, name: ChannelName) -> ChannelSeries:
        return self.channels[name]

    @property
    def session_ref(self) -> Tuple[str, str]:
        return (self.participant_id, self.session_id)

    def common_span(self) -> Tuple[float, float]:
        """Start and end of the interval covered by every channel."""
        start = max(series.start_time for series in self.channels.values())
        end = min(series.end_time for series in self.channels.values())
        return start, end


@dataclass(frozen=True)
class LabelSpan:
    """A nurse-annotated interval, end exclusive."""
    start: float
    end: float
    label: LabelClass

    def __post_init__(self) -> None:
        if not self.end > self.start:
            raise InvalidSpan(f"Span end {self.end} must be after start {self.start}")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def overlaps(self, other: "LabelSpan") -> bool:
        return self.start < other.end and other.start < self.end

    def to_dict(self) -> Dict[str, Any]:
        return {"start": self.start, "end": self.end, "label": self.label.value}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LabelSpan":
        return cls(start=data["start"], end=data["end"], label=LabelClass(data["label"]))


@dataclass(frozen=True)
class LabelSet:
    """Label spans of one session plus its fully-labeled flag."""
    participant_id: str
    session_id: str
    spans: Tuple[LabelSpan, ...] = ()
    fully_labeled: bool = False

    def __post_init__(self) -> None:
        spans = tuple(sorted(self.spans, key=lambda s: (s.start, s.end)))
        for previous, current in zip(spans, spans[1:]):
            if previous.overlaps(current):
                raise OverlapConflict(
                    f"Spans ({previous.start}, {previous.end}, {previous.label.value}) and "
                    f"({current.start}, {current.end}, {current.label.value}) overlap"
                )
        object.__setattr__(self, "spans", spans)

    @property
    def session_ref(self) -> Tuple[str, str]:
        return (self.participant_id, self.session_id)

    def spans_of(self, label: LabelClass) -> List[LabelSpan]:
        return [span for span in self.spans if span.label == label]

    def minutes(self, label: LabelClass) -> float:
        return sum(span.duration for span in self.spans_of(label)) / 60.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "participant_id": self.participant_id,
            "session_id": self.session_id,
            "fully_labeled": self.fully_labeled,
            "spans": [span.to_dict() for span in self.spans],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LabelSet":
        return cls(
            participant_id=data["participant_id"],
            session_id=data["session_id"],
            spans=tuple(LabelSpan.from_dict(s) for s in data.get("spans", [])),
            fully_labeled=data.get("fully_labeled", False),
        )


@dataclass(frozen=True)
class CoverageGap:
    """A run of invalid samples in one raw channel."""
    channel: ChannelName
    start: float
    seconds: float


@dataclass(frozen=True)
class Misalignment:
    """A label span reaching outside the common recording span."""
    span: LabelSpan
    outside_seconds: float


@dataclass(frozen=True)
class ValidationReport:
    """Findings of validate_session; never raises."""
    participant_id: str
    session_id: str
    coverage_gaps: Tuple[CoverageGap, ...]
    misalignments: Tuple[Misalignment, ...]
    usable_minutes: float

    @property
    def is_clean(self) -> bool:
        return not self.coverage_gaps and not self.misalignments

    def to_dict(self) -> Dict[str, Any]:
        return {
            "participant_id": self.participant_id,
            "session_id": self.session_id,
            "usable_minutes": self.usable_minutes,
            "coverage_gaps": [
                {"channel": g.channel.value, "start": g.start, "seconds": g.seconds}
                for g in self.coverage_gaps
            ],
            "misalignments": [
                {"span": m.span.to_dict(), "outside_seconds": m.outside_seconds}
                for m in self.misalignments
            ],
        }


@dataclass(frozen=True, eq=False)
class IbiSeries:
    """Detected beats and the gated intervals between consecutive beats.

    beat_times keeps every detected beat. intervals holds only the
    consecutive-beat intervals inside IBI_RANGE, and interval_starts the beat
    opening each of them; raw_intervals has one entry per beat pair.
    """
    beat_times: np.ndarray       # unix seconds, strictly increasing
    intervals: np.ndarray        # seconds, each within IBI_RANGE
    interval_starts: np.ndarray  # unix seconds, a subset of beat_times

    def __post_init__(self) -> None:
        beats = _frozen_array(self.beat_times)
        intervals = _frozen_array(self.intervals)
        starts = _frozen_array(self.interval_starts)
        if np.any(np.diff(beats) <= 0):
            raise NonMonotonicData("Beat times must be strictly increasing")
        if len(starts) != len(intervals) or len(intervals) > max(len(beats) - 1, 0):
            raise ShapeMismatch("Each IBI interval needs one opening beat")
        outside = (intervals < IBI_RANGE[0]) | (intervals > IBI_RANGE[1])
        if outside.any():
            raise DataError(f"IBI interval {intervals[outside][0]:.3f} s is outside "
                            f"[{IBI_RANGE[0]}, {IBI_RANGE[1]}] s")
        if len(intervals):
            position = np.searchsorted(beats, starts)
            if (np.any(position >= len(beats) - 1) or not np.array_equal(beats[position], starts)
                    or not np.allclose(beats[position + 1] - starts, intervals)):
                raise ShapeMismatch("IBI intervals must span consecutive detected beats")
        object.__setattr__(self, "beat_times", beats)
        object.__setattr__(self, "intervals", intervals)
        object.__setattr__(self, "interval_starts", starts)

    @property
    def raw_intervals(self) -> np.ndarray:
        """Every consecutive-beat interval, gated or not."""
        return np.diff(self.beat_times)

    @classmethod
    def from_beats(cls, beat_times: Any) -> "IbiSeries":
        """Gate the intervals between consecutive beats to IBI_RANGE."""
        beats = np.asarray(beat_times, dtype=np.float64)
        raw = np.diff(beats)
        keep = (raw >= IBI_RANGE[0]) & (raw <= IBI_RANGE[1])
        return cls(beat_times=beats, intervals=raw[keep], interval_starts=beats[:-1][keep])


@dataclass(frozen=True, eq=False)
class AlignedSession:
    """All analysis streams on a shared 4 Hz grid."""
    participant_id: str
    session_id: str
    grid_start: float
    streams: Dict[str, np.ndarray]
    gap_mask: np.ndarray
    grid_rate: float = GRID_RATE

    def __post_init__(self) -> None:
        missing = [name for name in STREAM_NAMES if name not in self.streams]
        if missing:
            raise ShapeMismatch(f"Aligned session is missing streams: {', '.join(missing)}")
        lengths = {len(self.streams[name]) for name in STREAM_NAMES}
        if len(lengths) != 1 or len(self.gap_mask) not in lengths:
            raise ShapeMismatch("Aligned streams must share one length")
        object.__setattr__(
            self, "streams", {name: _frozen_array(self.streams[name]) for name in STREAM_NAMES}
        )
        object.__setattr__(self, "gap_mask", _frozen_array(self.gap_mask, dtype=bool))

    @property
    def session_ref(self) -> Tuple[str, str]:
        return (self.participant_id, self.session_id)

    @property
    def n_samples(self) -> int:
        return len(self.gap_mask)

    def timestamps(self) -> np.ndarray:
        return self.grid_start + np.arange(self.n_samples) / self.grid_rate


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Windows x named features with per-row metadata and labels."""
    column_names: Tuple[str, ...]
    values: np.ndarray
    participant_ids: np.ndarray
    session_ids: np.ndarray
    window_starts: np.ndarray
    labels: np.ndarray                       # WindowLabel codes
    removed_columns: Tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        names = tuple(self.column_names)
        if len(set(names)) != len(names):
            raise ShapeMismatch("Feature column names must be unique")
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1, len(names))
        n_rows = values.shape[0]
        meta = {
            "participant_ids": np.array(self.participant_ids, dtype=object).reshape(-1),
            "session_ids": np.array(self.session_ids, dtype=object).reshape(-1),
            "window_starts": np.array(self.window_starts, dtype=np.float64).reshape(-1),
            "labels": np.array(self.labels, dtype=np.int8).reshape(-1),
        }
        for key, array in meta.items():
            if len(array) != n_rows:
                raise ShapeMismatch(f"{key} has {len(array)} entries for {n_rows} rows")
            array.setflags(write=False)
            object.__setattr__(self, key, array)
        if not np.isin(meta["labels"], [int(label) for label in WindowLabel]).all():
            raise DataError("Labels must be WindowLabel codes")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "removed_columns", tuple(self.removed_columns))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != WindowLabel.UNLABELED

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    def label_counts(self) -> Dict[str, int]:
        return {label.name: int(np.sum(self.labels == label)) for label in WindowLabel}

    def select_rows(self, rows: Sequence[int]) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            values=self.values[rows],
            participant_ids=self.participant_ids[rows],
            session_ids=self.session_ids[rows],
            window_starts=self.window_starts[rows],
            labels=self.labels[rows],
        )

    def with_values(self, column_names: Sequence[str], values: np.ndarray,
                    removed_columns: Iterable[str] = ()) -> "FeatureMatrix":
        """Same rows and labels, new columns."""
        return replace(self, column_names=tuple(column_names), values=values,
                       removed_columns=tuple(removed_columns))

    def with_labels(self, labels: np.ndarray) -> "FeatureMatrix":
        return replace(self, labels=labels)

    def digest(self) -> str:
        """BLAKE3 digest over names, metadata, labels and values."""
        hasher = blake3()
        hasher.update("\x1f".join(self.column_names).encode("utf-8"))
        hasher.update("\x1f".join(f"{p}/{s}" for p, s in zip(self.participant_ids, self.session_ids)).encode("utf-8"))
        hasher.update(np.ascontiguousarray(self.window_starts).tobytes())
        hasher.update(np.ascontiguousarray(self.labels).tobytes())
        hasher.update(np.ascontiguousarray(self.values).tobytes())
        return hasher.hexdigest()


def concat_matrices(matrices: Sequence[FeatureMatrix]) -> FeatureMatrix:
    """Stack matrices with identical columns, preserving order."""
    if not matrices:
        raise DataError("Nothing to concatenate")
    names = matrices[0].column_names
    for m in matrices[1:]:
        if m.column_names != names:
            raise ShapeMismatch("Cannot concatenate matrices with different columns")
    return FeatureMatrix(
        column_names=names,
        values=np.vstack([m.values for m in matrices]),
        participant_ids=np.concatenate([m.participant_ids for m in matrices]),
        session_ids=np.concatenate([m.session_ids for m in matrices]),
        window_starts=np.concatenate([m.window_starts for m in matrices]),
        labels=np.concatenate([m.labels for m in matrices]),
        removed_columns=matrices[0].removed_columns,
    )
