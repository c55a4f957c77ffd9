"""
Tests for window statistics, feature extraction, cleaning and window labels.
"""

import math

import numpy as np
import pytest
from scipy import stats

from aad.errors import AllColumnsInvalid, ConfigError, NoCompleteWindow, SessionMismatch
from aad.features import (
    DEFAULT_CATALOG,
    FeatureCatalog,
    WindowSpec,
    drop_gap_windows,
    drop_invalid_columns,
    extract_features,
    label_windows,
    read_feature_matrix,
    stat_features,
    write_feature_matrix,
)
from aad.models import STREAM_NAMES, AlignedSession, LabelClass, LabelSet, LabelSpan, WindowLabel

from tests.helpers import T0, make_matrix


def aligned_session(minutes: float, seed: int = 0, gap_mask=None) -> AlignedSession:
    n = int(round(minutes * 60 * 4))
    rng = np.random.default_rng(seed)
    streams = {name: rng.normal(size=n) for name in STREAM_NAMES}
    streams["TEMP"] = np.full(n, 33.0)
    return AlignedSession(
        participant_id="P01", session_id="S1", grid_start=T0, streams=streams,
        gap_mask=np.zeros(n, dtype=bool) if gap_mask is None else gap_mask,
    )


def percentile(x, q):
    s = sorted(x)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def entropy(counts, n_states):
    total = sum(counts)
    return -sum(c / total * math.log(c / total) for c in counts if c > 0) / math.log(n_states)


def brute_force_statistics(x):
    """Independent per-element implementation of the 22 window statistics."""
    n = len(x)
    values = list(x)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    edges = np.linspace(min(values), max(values), 17)
    bins = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, 15)
    patterns = {}
    for i in range(n - 2):
        key = tuple(sorted(range(3), key=lambda k: values[i + k]))
        patterns[key] = patterns.get(key, 0) + 1
    embedded = np.array([values[i:i + 10] for i in range(n - 9)])
    singular = np.linalg.svd(embedded, compute_uv=False)
    return {
        "mean": mean,
        "std": math.sqrt(var),
        "min": min(values),
        "max": max(values),
        "ptp": max(values) - min(values),
        "sum": math.fsum(values),
        "energy": math.fsum(v * v for v in values),
        "skewness": stats.skew(x, bias=True),
        "kurtosis": stats.kurtosis(x, fisher=True, bias=True),
        "n_peaks": sum(1 for i in range(1, n - 1) if values[i - 1] < values[i] > values[i + 1]),
        "rms": math.sqrt(math.fsum(v * v for v in values) / n),
        "line_integral": math.fsum(abs(values[i + 1] - values[i]) for i in range(n - 1)),
        "n_above_mean": sum(1 for v in values if v > mean),
        "n_below_mean": sum(1 for v in values if v < mean),
        "n_sign_changes": sum(1 for i in range(n - 1) if (values[i] < 0) != (values[i + 1] < 0)),
        "iqr": percentile(values, 75) - percentile(values, 25),
        "ipr_5_95": percentile(values, 95) - percentile(values, 5),
        "p5": percentile(values, 5),
        "p95": percentile(values, 95),
        "hist_entropy": entropy(np.bincount(bins, minlength=16), 16),
        "perm_entropy": entropy(list(patterns.values()), 6),
        "svd_entropy": entropy(list(singular), 10),
    }


class TestStatFeatures:
    """Test the 22 window statistics."""

    def test_catalog_shape(self):
        assert len(DEFAULT_CATALOG.names) == 22
        columns = DEFAULT_CATALOG.column_names()
        assert len(columns) == 198
        assert columns[0] == "ACC_X.mean"
        assert columns[-1] == "TEMP.svd_entropy"

    def test_catalog_rejects_wrong_size(self):
        with pytest.raises(ConfigError):
            FeatureCatalog(names=("mean", "std"))

    def test_constant_window(self):
        out = dict(zip(DEFAULT_CATALOG.names, stat_features(np.full(240, 3.0))))
        assert out["mean"] == 3.0
        assert out["std"] == 0.0
        assert out["min"] == 3.0 and out["max"] == 3.0
        assert out["ptp"] == 0.0
        assert out["sum"] == 720.0
        assert out["energy"] == 2160.0
        assert out["rms"] == 3.0
        assert out["n_sign_changes"] == 0.0
        assert math.isnan(out["skewness"])
        assert math.isnan(out["kurtosis"])

    def test_random_windows_match_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            x = rng.uniform(-1.0, 1.0, 240)
            out = dict(zip(DEFAULT_CATALOG.names, stat_features(x)))
            oracle = brute_force_statistics(x)
            for name in DEFAULT_CATALOG.names:
                assert out[name] == pytest.approx(oracle[name], rel=1e-9, abs=1e-9), name

    def test_gap_samples_excluded(self):
        x = np.r_[np.full(200, 1.0), np.full(40, 100.0)]
        gaps = np.r_[np.zeros(200, dtype=bool), np.ones(40, dtype=bool)]
        out = dict(zip(DEFAULT_CATALOG.names, stat_features(x, gaps)))
        assert out["max"] == 1.0

    def test_gap_dominated_window_is_nan(self):
        gaps = np.r_[np.ones(121, dtype=bool), np.zeros(119, dtype=bool)]
        assert np.isnan(stat_features(np.ones(240), gaps)).all()


class TestExtractFeatures:
    """Test extract_features shapes and determinism."""

    def test_ten_minutes(self):
        m = extract_features(aligned_session(10))
        assert (m.n_rows, m.n_columns) == (10, 198)
        assert np.all(m.labels == WindowLabel.UNLABELED)
        assert np.array_equal(m.window_starts, T0 + 60.0 * np.arange(10))

    def test_partial_window_discarded(self):
        assert extract_features(aligned_session(10.5)).n_rows == 10

    def test_constant_temp_column(self):
        m = extract_features(aligned_session(10))
        assert np.all(m.column("TEMP.mean") == 33.0)

    def test_deterministic(self):
        a = extract_features(aligned_session(5, seed=3))
        b = extract_features(aligned_session(5, seed=3))
        assert a.digest() == b.digest()

    def test_no_complete_window(self):
        with pytest.raises(NoCompleteWindow):
            extract_features(aligned_session(0.5))

    def test_window_spec_validation(self):
        with pytest.raises(ConfigError):
            WindowSpec(overlap=0.5)
        with pytest.raises(ConfigError):
            WindowSpec(length=0)


class TestCleaning:
    """Test gap-window and invalid-column removal."""

    def test_gap_window_dropped(self):
        gaps = np.zeros(2400, dtype=bool)
        gaps[:200] = True
        m = drop_gap_windows(extract_features(aligned_session(10, gap_mask=gaps)))
        assert m.n_rows == 9
        assert m.window_starts[0] == T0 + 60.0

    def test_nan_column_removed(self):
        values = np.random.default_rng(0).normal(size=(5, 4))
        values[:, 2] = np.nan
        m = drop_invalid_columns(make_matrix(values, np.zeros(5)))

        assert m.column_names == ("f0", "f1", "f3")
        assert m.removed_columns == ("f2",)
        assert np.array_equal(m.values, values[:, [0, 1, 3]])

    def test_infinite_value_removes_column(self):
        values = np.ones((3, 2))
        values[1, 0] = np.inf
        assert drop_invalid_columns(make_matrix(values, np.zeros(3))).column_names == ("f1",)

    def test_finite_matrix_unchanged(self):
        values = np.random.default_rng(1).normal(size=(5, 4))
        m = make_matrix(values, np.zeros(5))
        out = drop_invalid_columns(m)
        assert out.column_names == m.column_names
        assert out.digest() == m.digest()

    def test_constant_stream_columns_removed(self):
        m = drop_invalid_columns(extract_features(aligned_session(3)))
        expected = {name for name, ok in zip(DEFAULT_CATALOG.column_names(),
                                             np.isfinite(extract_features(aligned_session(3)).values).all(axis=0))
                    if not ok}
        assert set(m.removed_columns) == expected
        assert {"TEMP.skewness", "TEMP.kurtosis"} <= expected

    def test_all_columns_invalid(self):
        with pytest.raises(AllColumnsInvalid):
            drop_invalid_columns(make_matrix(np.full((2, 2), np.nan), np.zeros(2)))


def minute_matrix(n_minutes: int):
    return make_matrix(np.zeros((n_minutes, 1)), np.full(n_minutes, WindowLabel.UNLABELED))


class TestLabelWindows:
    """Test the window label rule."""

    def test_agitation_span_minutes_five_to_seven(self):
        labels = LabelSet("P01", "S1", (LabelSpan(T0 + 300, T0 + 420, LabelClass.AGITATION),), True)
        m = label_windows(minute_matrix(10), labels)
        expected = np.zeros(10)
        expected[[5, 6]] = WindowLabel.AGITATION
        assert np.array_equal(m.labels, expected)

    def test_partial_overlap_is_agitation(self):
        labels = LabelSet("P01", "S1", (LabelSpan(T0 + 119, T0 + 121, LabelClass.AGITATION),), True)
        m = label_windows(minute_matrix(4), labels)
        assert list(m.labels) == [0, 1, 1, 0]

    def test_unlabeled_session(self):
        m = label_windows(minute_matrix(10), LabelSet("P01", "S1"))
        assert np.all(m.labels == WindowLabel.UNLABELED)

    def test_random_spans_match_per_minute_oracle(self):
        rng = np.random.default_rng(9)
        n_minutes = 1000
        points = np.sort(rng.uniform(T0, T0 + 60.0 * n_minutes, 200))
        spans = tuple(LabelSpan(points[2 * i], points[2 * i + 1],
                                LabelClass.AGITATION if rng.random() < 0.4 else LabelClass.NORMAL)
                      for i in range(100))
        labels = LabelSet("P01", "S1", spans, fully_labeled=False)
        m = label_windows(minute_matrix(n_minutes), labels)

        for w in range(n_minutes):
            t = T0 + 60.0 * w + np.arange(240) / 4.0
            agitation = any(((t >= s.start) & (t < s.end)).any() for s in spans if s.label is LabelClass.AGITATION)
            normal = any(((t >= s.start) & (t < s.end)).all() for s in spans if s.label is LabelClass.NORMAL)
            expected = WindowLabel.AGITATION if agitation else (WindowLabel.NORMAL if normal else WindowLabel.UNLABELED)
            assert m.labels[w] == expected, w

    def test_session_mismatch(self):
        with pytest.raises(SessionMismatch):
            label_windows(minute_matrix(3), LabelSet("P02", "S1"))


class TestFeatureMatrixFile:
    """Test the feature matrix CSV."""

    def test_round_trip(self, tmp_path):
        values = np.random.default_rng(4).normal(size=(6, 3)) * 1e3
        values[2, 1] = np.nan
        m = make_matrix(values, [0, 1, -1, 0, 1, -1], participant_ids=["P01", "P01", "P02", "P02", "P03", "P03"])
        path = write_feature_matrix(m, tmp_path / "features.csv")
        back = read_feature_matrix(path)

        assert back.column_names == m.column_names
        assert np.array_equal(back.values, m.values, equal_nan=True)
        assert np.array_equal(back.labels, m.labels)
        assert list(back.participant_ids) == list(m.participant_ids)
        assert np.array_equal(back.window_starts, m.window_starts)
        again = write_feature_matrix(back, tmp_path / "again.csv")
        assert again.read_bytes() == path.read_bytes()
        assert back.removed_columns == ()

    def test_removed_columns_survive(self, tmp_path):
        m = make_matrix(np.arange(6.0).reshape(3, 2), [0, 1, -1])
        m = m.with_values(m.column_names, m.values, ("TEMP.skewness", "TEMP.kurtosis"))
        path = write_feature_matrix(m, tmp_path / "features.csv")
        back = read_feature_matrix(path)

        assert path.read_text().splitlines()[0] == "# removed_columns=TEMP.skewness,TEMP.kurtosis"
        assert back.removed_columns == ("TEMP.skewness", "TEMP.kurtosis")
        assert back.column_names == m.column_names
        assert back.digest() == m.digest()
