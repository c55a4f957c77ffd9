"""
Signal conditioning for aad.
Filters, derives and resamples raw channels onto the shared 4 Hz analysis grid.
"""

import logging
import math
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import butter, find_peaks, sosfiltfilt

from aad.errors import CutoffAboveNyquist, DataError, InsufficientOverlap, NoBeatsDetected
from aad.models import (
    GRID_RATE,
    IBI_RANGE,
    STREAM_NAMES,
    WINDOW_SECONDS,
    AlignedSession,
    ChannelName,
    ChannelSeries,
    IbiSeries,
    SessionRecording,
)


logger = logging.getLogger(__name__)

FILTER_ORDER = 4
ACC_CUTOFF_HZ = 10.0
BVP_BAND_HZ = (0.5, 4.0)
EDA_SMOOTH_HZ = 1.0
EDA_VALID_RANGE = (0.01, 100.0)  # microsiemens
EDA_TONIC_SECONDS = 30.0
MAX_BRIDGED_GAP_SECONDS = 5.0
PEAK_STD_WINDOW_SECONDS = 10.0
PEAK_PROMINENCE_FACTOR = 0.3


def _zero_phase(sos: np.ndarray, values: np.ndarray, sample_rate: float) -> np.ndarray:
    """Forward-backward filtering with padding long enough for slow sections to settle."""
    padlen = min(len(values) - 1, max(3 * (2 * len(sos) + 1), int(10 * sample_rate)))
    if padlen < 1:
        return values.copy()
    return sosfiltfilt(sos, values, padlen=padlen)


def _check_cutoff(series: ChannelSeries, cutoff: float) -> None:
    if not 0 < cutoff < series.sample_rate / 2:
        raise CutoffAboveNyquist(
            f"{series.name.value}: cutoff {cutoff} Hz must lie below Nyquist "
            f"({series.sample_rate / 2} Hz)"
        )


def lowpass_filter(series: ChannelSeries, cutoff: float, order: int = FILTER_ORDER) -> ChannelSeries:
    """Zero-phase Butterworth low-pass."""
    _check_cutoff(series, cutoff)
    if order < 1:
        raise ValueError("Filter order must be at least 1")
    sos = butter(order, cutoff, btype="low", fs=series.sample_rate, output="sos")
    return series.with_values(_zero_phase(sos, series.values, series.sample_rate))


def highpass_filter(series: ChannelSeries, cutoff: float, order: int = FILTER_ORDER) -> ChannelSeries:
    """Zero-phase Butterworth high-pass."""
    _check_cutoff(series, cutoff)
    if order < 1:
        raise ValueError("Filter order must be at least 1")
    sos = butter(order, cutoff, btype="high", fs=series.sample_rate, output="sos")
    return series.with_values(_zero_phase(sos, series.values, series.sample_rate))


def bandpass_filter(series: ChannelSeries, low: float, high: float,
                    order: int = FILTER_ORDER) -> ChannelSeries:
    """High-pass then low-pass cascade."""
    return lowpass_filter(highpass_filter(series, low, order), high, order)


def _grid_length(duration: float, grid_rate: float) -> int:
    return int(math.floor(duration * grid_rate + 1e-9))


def _bin_index(n_source: int, sample_rate: float, offset: float, grid_rate: float) -> np.ndarray:
    """Output bin of every source sample; offset = grid_start - source start."""
    positions = np.arange(n_source) * (grid_rate / sample_rate) - offset * grid_rate
    return np.floor(positions + 1e-9).astype(np.int64)


def resample_to_grid(series: ChannelSeries, grid_rate: float = GRID_RATE,
                     grid_start: Optional[float] = None,
                     n_samples: Optional[int] = None) -> np.ndarray:
    """Bin-mean decimation onto a grid (linear interpolation when upsampling).

    The grid defaults to the series' own start and duration.
    """
    if grid_start is None:
        grid_start = series.start_time
    if n_samples is None:
        n_samples = _grid_length(series.end_time - grid_start, grid_rate)
    offset = grid_start - series.start_time

    if series.sample_rate == grid_rate and offset == 0:
        return np.array(series.values[:n_samples], dtype=np.float64)

    if series.sample_rate < grid_rate:
        grid_times = offset + np.arange(n_samples) / grid_rate
        source_times = np.arange(series.n_samples) / series.sample_rate
        return np.interp(grid_times, source_times, series.values)

    bins = _bin_index(series.n_samples, series.sample_rate, offset, grid_rate)
    keep = (bins >= 0) & (bins < n_samples)
    sums = np.bincount(bins[keep], weights=series.values[keep], minlength=n_samples)
    counts = np.bincount(bins[keep], minlength=n_samples)
    out = np.empty(n_samples, dtype=np.float64)
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled]
    if not filled.all():
        index = np.arange(n_samples)
        out[~filled] = np.interp(index[~filled], index[filled], out[filled])
    return out


def resample_mask(mask: np.ndarray, sample_rate: float, offset: float, n_samples: int,
                  grid_rate: float = GRID_RATE) -> np.ndarray:
    """Grid sample is flagged when any source sample in its bin is flagged."""
    mask = np.asarray(mask, dtype=bool)
    if sample_rate < grid_rate:
        source = np.floor((offset + np.arange(n_samples) / grid_rate) * sample_rate + 1e-9)
        source = np.clip(source.astype(np.int64), 0, len(mask) - 1)
        return mask[source]
    bins = _bin_index(len(mask), sample_rate, offset, grid_rate)
    keep = (bins >= 0) & (bins < n_samples)
    return np.bincount(bins[keep], weights=mask[keep].astype(np.float64), minlength=n_samples) > 0


def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def _long_runs(mask: np.ndarray, sample_rate: float,
               max_seconds: float = MAX_BRIDGED_GAP_SECONDS) -> np.ndarray:
    """Keep only runs longer than max_seconds."""
    out = np.zeros(len(mask), dtype=bool)
    limit = max_seconds * sample_rate
    for begin, end in _runs(mask):
        if end - begin > limit:
            out[begin:end] = True
    return out


def detect_ibi(bvp: ChannelSeries) -> IbiSeries:
    """Beat detection on band-passed BVP with physiological interval gating."""
    filtered = bandpass_filter(bvp, *BVP_BAND_HZ).values
    window = max(1, int(round(PEAK_STD_WINDOW_SECONDS * bvp.sample_rate)))
    rolling_std = (
        pd.Series(filtered).rolling(window, center=True, min_periods=1).std(ddof=0).to_numpy()
    )
    distance = max(1, int(math.ceil(IBI_RANGE[0] * bvp.sample_rate)))
    peaks, _ = find_peaks(filtered, distance=distance,
                          prominence=PEAK_PROMINENCE_FACTOR * rolling_std)

    if len(peaks) < 2:
        raise NoBeatsDetected(f"Only {len(peaks)} peak(s) found in {bvp.duration:.0f} s of BVP")
    ibi = IbiSeries.from_beats(bvp.start_time + peaks / bvp.sample_rate)
    if not len(ibi.intervals):
        raise NoBeatsDetected("No inter-beat interval passed physiological gating")
    logger.debug("Detected %d beats, %d of %d intervals accepted",
                 len(peaks), len(ibi.intervals), len(peaks) - 1)
    return ibi


def heart_rate_on_grid(ibi: IbiSeries, grid_start: float, n_samples: int,
                       grid_rate: float = GRID_RATE) -> np.ndarray:
    """Beats per minute, piecewise constant from the beat opening each interval.

    Gaps left by rejected intervals hold the last accepted rate; samples before
    the first accepted interval take its rate.
    """
    if not len(ibi.intervals):
        raise NoBeatsDetected("No accepted inter-beat interval to derive heart rate from")
    rates = 60.0 / ibi.intervals
    times = grid_start + np.arange(n_samples) / grid_rate
    index = np.searchsorted(ibi.interval_starts, times, side="right") - 1
    return rates[np.clip(index, 0, len(rates) - 1)]


def eda_artifact_removal(eda: ChannelSeries) -> Tuple[ChannelSeries, np.ndarray]:
    """Bridge short out-of-range runs, flag long ones.

    Samples outside the valid range (or recorded as parse gaps) are invalid;
    runs up to 5 s are linearly interpolated, longer runs are held at the
    nearest valid neighbour and flagged in the returned mask.
    """
    values = eda.values
    invalid = (values < EDA_VALID_RANGE[0]) | (values > EDA_VALID_RANGE[1]) | eda.gap_mask
    if not invalid.any():
        return eda, np.zeros(eda.n_samples, dtype=bool)
    if invalid.all():
        raise DataError("EDA: every sample is outside the valid range")

    index = np.arange(eda.n_samples)
    cleaned = values.copy()
    cleaned[invalid] = np.interp(index[invalid], index[~invalid], values[~invalid])

    long_mask = _long_runs(invalid, eda.sample_rate)
    for begin, end in _runs(long_mask):
        left = values[begin - 1] if begin > 0 else values[end]
        right = values[end] if end < eda.n_samples else left
        middle = begin + (end - begin + 1) // 2
        cleaned[begin:middle] = left
        cleaned[middle:end] = right
    logger.debug("EDA: %d invalid samples, %d flagged as unrecoverable",
                 int(invalid.sum()), int(long_mask.sum()))
    return eda.with_values(cleaned, gap_mask=np.zeros(eda.n_samples, dtype=bool)), long_mask


def eda_decompose(eda: ChannelSeries) -> Tuple[np.ndarray, np.ndarray]:
    """Split smoothed EDA into (tonic, phasic); tonic + phasic == smoothed."""
    smoothed = lowpass_filter(eda, EDA_SMOOTH_HZ).values
    window = max(1, int(round(EDA_TONIC_SECONDS * eda.sample_rate)))
    tonic = pd.Series(smoothed).rolling(window, center=True, min_periods=1).mean().to_numpy()
    phasic = smoothed - tonic
    return tonic, phasic


def align_session(rec: SessionRecording) -> AlignedSession:
    """Run every per-channel pipeline and join the results on the 4 Hz grid."""
    grid_start, grid_end = rec.common_span()
    n = _grid_length(grid_end - grid_start, GRID_RATE)
    if n < int(WINDOW_SECONDS * GRID_RATE):
        raise InsufficientOverlap(
            f"{rec.participant_id}/{rec.session_id}: channels share only "
            f"{max(0.0, grid_end - grid_start):.1f} s"
        )

    def on_grid(series: ChannelSeries) -> np.ndarray:
        return resample_to_grid(series, GRID_RATE, grid_start, n)

    def gaps_on_grid(series: ChannelSeries, mask: np.ndarray) -> np.ndarray:
        return resample_mask(mask, series.sample_rate, grid_start - series.start_time, n)

    streams = {}
    gap_mask = np.zeros(n, dtype=bool)

    for name, stream in ((ChannelName.ACC_X, "ACC_X"), (ChannelName.ACC_Y, "ACC_Y"),
                         (ChannelName.ACC_Z, "ACC_Z")):
        series = rec[name]
        if ACC_CUTOFF_HZ < series.sample_rate / 2:
            series = lowpass_filter(series, ACC_CUTOFF_HZ)
        else:
            logger.debug("%s at %s Hz: skipping %s Hz low-pass", name.value,
                         series.sample_rate, ACC_CUTOFF_HZ)
        streams[stream] = on_grid(series)
    streams["ACC_MAG"] = np.sqrt(streams["ACC_X"] ** 2 + streams["ACC_Y"] ** 2 + streams["ACC_Z"] ** 2)

    bvp = rec[ChannelName.BVP]
    streams["BVP_F"] = on_grid(bandpass_filter(bvp, *BVP_BAND_HZ))
    streams["HR"] = heart_rate_on_grid(detect_ibi(bvp), grid_start, n)

    eda, eda_gaps = eda_artifact_removal(rec[ChannelName.EDA])
    tonic, phasic = eda_decompose(eda)
    streams["EDA_TONIC"] = on_grid(eda.with_values(tonic))
    streams["EDA_PHASIC"] = on_grid(eda.with_values(phasic))
    gap_mask |= gaps_on_grid(eda, eda_gaps)

    streams["TEMP"] = on_grid(rec[ChannelName.TEMP])

    for series in rec.channels.values():
        gap_mask |= gaps_on_grid(series, _long_runs(series.gap_mask, series.sample_rate))

    logger.info("Aligned %s/%s: %d grid samples (%.1f min), %d gap samples",
                rec.participant_id, rec.session_id, n, n / GRID_RATE / 60.0, int(gap_mask.sum()))
    return AlignedSession(
        participant_id=rec.participant_id,
        session_id=rec.session_id,
        grid_start=grid_start,
        streams={name: streams[name] for name in STREAM_NAMES},
        gap_mask=gap_mask,
    )


def write_aligned_csv(aligned: AlignedSession, path: Union[str, Path]) -> Path:
    """Debug dump, one row per grid sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"t": aligned.timestamps()})
    for name in STREAM_NAMES:
        frame[name.lower()] = aligned.streams[name]
    frame["gap"] = aligned.gap_mask.astype(int)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path
