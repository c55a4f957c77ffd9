"""
Wristband archive and label file parsing for aad.
Reads the Empatica E4 CSV export layout and nurse label interval files.
"""

import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from aad.errors import (
    DataError,
    InvalidSpan,
    MalformedHeader,
    MissingChannel,
    MissingInput,
    NonMonotonicData,
    OverlapConflict,
)
from aad.models import (
    ChannelName,
    ChannelSeries,
    CoverageGap,
    LabelClass,
    LabelSet,
    LabelSpan,
    Misalignment,
    SessionRecording,
    ValidationReport,
)


logger = logging.getLogger(__name__)

ACC_COUNTS_PER_G = 64.0
LABEL_FILE_NAME = "labels.csv"
GAP_CELL = "nan"

# file name -> channels stored in its columns
ARCHIVE_FILES: Dict[str, Tuple[ChannelName, ...]] = {
    "ACC.csv": (ChannelName.ACC_X, ChannelName.ACC_Y, ChannelName.ACC_Z),
    "BVP.csv": (ChannelName.BVP,),
    "EDA.csv": (ChannelName.EDA,),
    "TEMP.csv": (ChannelName.TEMP,),
}


def _format_number(value: float) -> str:
    """Integral values without a fraction, everything else as shortest repr."""
    value = float(value)
    if value.is_integer() and abs(value) < 2 ** 53:
        return str(int(value))
    return repr(value)


def _read_header(path: Path, n_columns: int) -> Tuple[float, float]:
    """Parse the start-timestamp and sample-rate rows."""
    with open(path, "r") as f:
        rows = [f.readline().strip() for _ in range(2)]
    try:
        starts = [float(cell) for cell in rows[0].split(",")]
        rates = [float(cell) for cell in rows[1].split(",")]
    except ValueError as e:
        raise MalformedHeader(f"{path}: first two rows must be timestamp and sample rate ({e})") from e

    if len(starts) != n_columns or len(rates) != n_columns:
        raise MalformedHeader(
            f"{path}: expected {n_columns} header column(s), got {len(starts)} and {len(rates)}"
        )
    if len(set(starts)) != 1 or len(set(rates)) != 1:
        raise MalformedHeader(f"{path}: header values differ between columns")
    if not np.isfinite(starts[0]) or not np.isfinite(rates[0]):
        raise MalformedHeader(f"{path}: header values must be finite")
    if rates[0] <= 0:
        raise NonMonotonicData(f"{path}: sample rate must be positive, got {rates[0]}")
    return starts[0], rates[0]


def _fill_gaps(values: np.ndarray, name: ChannelName) -> Tuple[np.ndarray, np.ndarray]:
    """Linearly bridge invalid cells and return (values, gap_mask)."""
    gaps = ~np.isfinite(values)
    if not gaps.any():
        return values, gaps
    if gaps.all():
        raise DataError(f"{name.value}: no valid samples")
    index = np.arange(len(values))
    filled = values.copy()
    filled[gaps] = np.interp(index[gaps], index[~gaps], values[~gaps])
    logger.warning("%s: %d invalid sample(s) recorded as gaps", name.value, int(gaps.sum()))
    return filled, gaps


def parse_e4_archive(dir_path: Union[str, Path], participant_id: Optional[str] = None,
                     session_id: Optional[str] = None) -> SessionRecording:
    """Parse an E4 export directory into a SessionRecording.

    Identifiers default to the parent and own directory names.
    ACC counts are scaled to g.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise MissingInput(f"Archive directory does not exist: {dir_path}")
    participant_id = participant_id or dir_path.parent.name
    session_id = session_id or dir_path.name

    channels: Dict[ChannelName, ChannelSeries] = {}
    for file_name, names in ARCHIVE_FILES.items():
        path = dir_path / file_name
        if not path.exists():
            raise MissingChannel(f"{dir_path}: required file {file_name} is absent")

        start, rate = _read_header(path, len(names))
        try:
            frame = pd.read_csv(path, header=None, skiprows=2, float_precision="round_trip",
                                skip_blank_lines=False)
        except pd.errors.EmptyDataError:
            raise DataError(f"{path}: no samples after header")
        if frame.shape[1] != len(names):
            raise MalformedHeader(f"{path}: expected {len(names)} column(s), got {frame.shape[1]}")

        for column, name in enumerate(names):
            raw = pd.to_numeric(frame.iloc[:, column], errors="coerce").to_numpy(dtype=np.float64)
            values, gaps = _fill_gaps(raw, name)
            if file_name == "ACC.csv":
                values = values / ACC_COUNTS_PER_G
            channels[name] = ChannelSeries(
                name=name, start_time=start, sample_rate=rate, values=values, gap_mask=gaps
            )
        logger.debug("Parsed %s: %d samples at %s Hz", path, len(frame), rate)

    return SessionRecording(participant_id=participant_id, session_id=session_id, channels=channels)


def _write_channel_file(path: Path, series: Sequence[ChannelSeries], scale: float = 1.0,
                        as_int: bool = False) -> None:
    start = _format_number(series[0].start_time)
    rate = _format_number(series[0].sample_rate)
    columns = []
    for s in series:
        scaled = s.values * scale
        cells = [str(int(v)) if as_int else repr(v) for v in scaled.tolist()]
        columns.append([GAP_CELL if gap else cell for cell, gap in zip(cells, s.gap_mask.tolist())])
    with open(path, "w") as f:
        f.write(",".join([start] * len(series)) + "\n")
        f.write(",".join([rate] * len(series)) + "\n")
        f.write("\n".join(",".join(cells) for cells in zip(*columns)))
        f.write("\n")


def write_e4_archive(rec: SessionRecording, dir_path: Union[str, Path]) -> Path:
    """Write a recording in the E4 export layout (inverse of parse_e4_archive).

    Gap samples are written as GAP_CELL so parsing restores the gap mask.
    """
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)

    acc = [rec[name] for name in ARCHIVE_FILES["ACC.csv"]]
    counts = np.concatenate([s.values[~s.gap_mask] for s in acc]) * ACC_COUNTS_PER_G
    _write_channel_file(dir_path / "ACC.csv", acc, scale=ACC_COUNTS_PER_G,
                        as_int=bool(np.all(counts == np.round(counts))))
    for file_name in ("BVP.csv", "EDA.csv", "TEMP.csv"):
        _write_channel_file(dir_path / file_name, [rec[ARCHIVE_FILES[file_name][0]]])
    logger.debug("Wrote archive for %s/%s to %s", rec.participant_id, rec.session_id, dir_path)
    return dir_path


def _merge_spans(spans: List[LabelSpan]) -> List[LabelSpan]:
    """Merge overlapping same-class spans; cross-class overlap is an error."""
    merged: List[LabelSpan] = []
    for span in sorted(spans, key=lambda s: (s.start, s.end)):
        if merged and merged[-1].overlaps(span):
            last = merged[-1]
            if last.label != span.label:
                raise OverlapConflict(
                    f"{last.label.value} span ({last.start}, {last.end}) overlaps "
                    f"{span.label.value} span ({span.start}, {span.end})"
                )
            merged[-1] = LabelSpan(start=last.start, end=max(last.end, span.end), label=last.label)
        else:
            merged.append(span)

    # a merge can reach a later span of the other class
    for previous, current in zip(merged, merged[1:]):
        if previous.overlaps(current):
            raise OverlapConflict(
                f"{previous.label.value} span ({previous.start}, {previous.end}) overlaps "
                f"{current.label.value} span ({current.start}, {current.end})"
            )
    return merged


def _parse_flag(text: str, path: Path) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise DataError(f"{path}: fully_labeled must be true or false, got '{text}'")


def parse_labels(file_path: Union[str, Path]) -> LabelSet:
    """Parse a label file: `participant_id,session_id,fully_labeled` then span rows."""
    path = Path(file_path)
    if not path.exists():
        raise MissingInput(f"Label file does not exist: {path}")

    with open(path, "r") as f:
        lines = [line.strip() for line in f if line.strip()]
    # optional literal column-name rows
    lines = [line for line in lines
             if line.replace(" ", "") not in ("participant_id,session_id,fully_labeled",
                                              "start_unix,end_unix,class")]
    if not lines:
        raise DataError(f"{path}: empty label file")

    header = [cell.strip() for cell in lines[0].split(",")]
    if len(header) != 3:
        raise DataError(f"{path}: header must be participant_id,session_id,fully_labeled")
    participant_id, session_id, flag = header

    spans: List[LabelSpan] = []
    for line_no, line in enumerate(lines[1:], start=2):
        cells = [cell.strip() for cell in line.split(",")]
        if len(cells) != 3:
            raise DataError(f"{path}:{line_no}: expected start,end,class")
        try:
            start, end = float(cells[0]), float(cells[1])
            label = LabelClass(cells[2].upper())
        except ValueError as e:
            raise DataError(f"{path}:{line_no}: {e}") from e
        if not end > start:
            raise InvalidSpan(f"{path}:{line_no}: span end {end} must be after start {start}")
        spans.append(LabelSpan(start=start, end=end, label=label))

    return LabelSet(
        participant_id=participant_id,
        session_id=session_id,
        spans=tuple(_merge_spans(spans)),
        fully_labeled=_parse_flag(flag, path),
    )


def write_labels(labels: LabelSet, file_path: Union[str, Path]) -> Path:
    """Serialize a LabelSet in the format parse_labels reads."""
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(f"{labels.participant_id},{labels.session_id},{str(labels.fully_labeled).lower()}\n")
        for span in labels.spans:
            f.write(f"{_format_number(span.start)},{_format_number(span.end)},{span.label.value}\n")
    return path


def _gap_runs(series: ChannelSeries) -> List[CoverageGap]:
    mask = series.gap_mask.astype(np.int8)
    edges = np.diff(np.concatenate([[0], mask, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [
        CoverageGap(
            channel=series.name,
            start=series.start_time + begin / series.sample_rate,
            seconds=(end - begin) / series.sample_rate,
        )
        for begin, end in zip(starts, ends)
    ]


def _gap_seconds(gaps: List[CoverageGap], start: float, end: float) -> float:
    """Length of the union of gaps clipped to [start, end]."""
    spans = sorted((max(g.start, start), min(g.start + g.seconds, end)) for g in gaps)
    total, reach = 0.0, start
    for begin, finish in spans:
        begin = max(begin, reach)
        if finish > begin:
            total += finish - begin
            reach = finish
    return total


def validate_session(rec: SessionRecording, labels: LabelSet) -> ValidationReport:
    """Report gaps, label spans outside the recording, and usable duration.

    Usable time is the span every channel covers, minus the time any channel
    spends in a parse gap inside it.
    """
    gaps: List[CoverageGap] = []
    for name in ChannelName:
        gaps.extend(_gap_runs(rec[name]))

    common_start, common_end = rec.common_span()
    misalignments: List[Misalignment] = []
    for span in labels.spans:
        before = min(max(0.0, common_start - span.start), span.duration)
        after = min(max(0.0, span.end - common_end), span.duration)
        outside = min(before + after, span.duration)
        if outside > 0:
            misalignments.append(Misalignment(span=span, outside_seconds=outside))

    if labels.session_ref != rec.session_ref:
        logger.warning("Label file %s/%s validated against recording %s/%s",
                       labels.participant_id, labels.session_id, rec.participant_id, rec.session_id)
    for finding in misalignments:
        logger.warning("%s/%s: span (%s, %s) reaches %.1f s outside the recording",
                       rec.participant_id, rec.session_id, finding.span.start, finding.span.end,
                       finding.outside_seconds)

    return ValidationReport(
        participant_id=rec.participant_id,
        session_id=rec.session_id,
        coverage_gaps=tuple(gaps),
        misalignments=tuple(misalignments),
        usable_minutes=max(0.0, common_end - common_start - _gap_seconds(gaps, common_start, common_end)) / 60.0,
    )


def discover_sessions(root: Union[str, Path]) -> List[Path]:
    """Session directories under root/<participant>/<session>/, sorted."""
    root = Path(root)
    if not root.is_dir():
        raise MissingInput(f"Data directory does not exist: {root}")
    sessions = []
    for dir_name, _, file_names in os.walk(root):
        if any(name in file_names for name in ARCHIVE_FILES):
            sessions.append(Path(dir_name))
    if not sessions:
        raise MissingInput(f"No E4 archives found under {root}")
    return sorted(sessions)


def load_session(dir_path: Union[str, Path]) -> Tuple[SessionRecording, LabelSet]:
    """Parse an archive and its label file; a missing label file means unlabeled."""
    dir_path = Path(dir_path)
    label_path = dir_path / LABEL_FILE_NAME
    if label_path.exists():
        labels = parse_labels(label_path)
        rec = parse_e4_archive(dir_path, labels.participant_id, labels.session_id)
    else:
        rec = parse_e4_archive(dir_path)
        labels = LabelSet(participant_id=rec.participant_id, session_id=rec.session_id)
    return rec, labels
