"""
Tests for E4 archive parsing, label files and session validation.
"""

import numpy as np
import pytest

from aad.errors import MalformedHeader, MissingChannel, MissingInput, OverlapConflict
from aad.ingest import (
    LABEL_FILE_NAME,
    discover_sessions,
    load_session,
    parse_e4_archive,
    parse_labels,
    validate_session,
    write_e4_archive,
    write_labels,
)
from aad.models import ChannelName, LabelClass, LabelSet, LabelSpan
from aad.synth import EpisodeSpec, generate_session

from tests.helpers import T0, make_recording


ARCHIVE_FILES = ("ACC.csv", "BVP.csv", "EDA.csv", "TEMP.csv")


@pytest.fixture
def archive_dir(tmp_path):
    return write_e4_archive(make_recording(duration=60.0), tmp_path / "P01" / "S1")


class TestParseArchive:
    """Test parse_e4_archive on hand-written and generated exports."""

    def test_constant_temp_channel(self, archive_dir):
        """A 240-sample TEMP file parses to a constant 4 Hz series."""
        (archive_dir / "TEMP.csv").write_text("1600000000\n4\n" + "33.0\n" * 240)
        rec = parse_e4_archive(archive_dir)

        temp = rec[ChannelName.TEMP]
        assert temp.n_samples == 240
        assert temp.sample_rate == 4.0
        assert temp.start_time == T0
        assert np.all(temp.values == 33.0)

    def test_identifiers_default_to_directories(self, archive_dir):
        rec = parse_e4_archive(archive_dir)
        assert rec.session_ref == ("P01", "S1")

    def test_acc_counts_scaled_to_g(self, archive_dir):
        rec = parse_e4_archive(archive_dir)
        assert np.all(rec[ChannelName.ACC_Z].values == 1.0)
        assert np.all(rec[ChannelName.ACC_X].values == 0.0)

    def test_missing_bvp(self, archive_dir):
        (archive_dir / "BVP.csv").unlink()
        with pytest.raises(MissingChannel, match="BVP.csv"):
            parse_e4_archive(archive_dir)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingInput):
            parse_e4_archive(tmp_path / "nowhere")

    def test_malformed_header(self, archive_dir):
        (archive_dir / "EDA.csv").write_text("start\n4\n2.0\n2.0\n")
        with pytest.raises(MalformedHeader, match="EDA.csv"):
            parse_e4_archive(archive_dir)

    def test_acc_header_column_count(self, archive_dir):
        (archive_dir / "ACC.csv").write_text("1600000000\n32\n0,0,64\n")
        with pytest.raises(MalformedHeader):
            parse_e4_archive(archive_dir)

    def test_invalid_cells_become_gaps(self, archive_dir):
        (archive_dir / "EDA.csv").write_text("1600000000\n4\n2.0\nerr\n4.0\n" + "2.0\n" * 237)
        rec = parse_e4_archive(archive_dir)

        eda = rec[ChannelName.EDA]
        assert eda.values[1] == pytest.approx(3.0)
        assert eda.gap_mask[1]
        assert eda.gap_mask.sum() == 1

    def test_round_trip_preserves_values(self, tmp_path):
        """Write, parse and write again: identical files and identical samples."""
        episodes = [EpisodeSpec(start=60.0, duration=120.0)]
        rec, _ = generate_session(seed=7, duration=240.0, episodes=episodes)
        first = write_e4_archive(rec, tmp_path / "a" / "P01" / "S1")
        parsed = parse_e4_archive(first)
        second = write_e4_archive(parsed, tmp_path / "b" / "P01" / "S1")

        for name in ChannelName:
            assert np.array_equal(parsed[name].values, rec[name].values), name
            assert parsed[name].sample_rate == rec[name].sample_rate
            assert parsed[name].start_time == rec[name].start_time
        for file_name in ARCHIVE_FILES:
            assert (first / file_name).read_bytes() == (second / file_name).read_bytes()

    def test_round_trip_preserves_gaps(self, archive_dir, tmp_path):
        (archive_dir / "TEMP.csv").write_text("1600000000\n4\n" + "33.0\n" * 100 + "x\n" * 8 + "34.0\n" * 132)
        parsed = parse_e4_archive(archive_dir)
        copy = write_e4_archive(parsed, tmp_path / "copy" / "P01" / "S1")
        reparsed = parse_e4_archive(copy)

        temp = reparsed[ChannelName.TEMP]
        assert np.array_equal(temp.gap_mask, parsed[ChannelName.TEMP].gap_mask)
        assert temp.gap_mask.sum() == 8
        assert np.array_equal(temp.values, parsed[ChannelName.TEMP].values)
        assert (copy / "TEMP.csv").read_text().splitlines().count("nan") == 8


class TestParseLabels:
    """Test the label interval file format."""

    def test_single_span(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("P01,S1,true\n0,120,AGITATION\n")
        labels = parse_labels(path)

        assert labels.session_ref == ("P01", "S1")
        assert labels.fully_labeled
        assert len(labels.spans) == 1
        assert labels.minutes(LabelClass.AGITATION) == 2.0

    def test_overlapping_same_class_merged(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("P01,S1,false\n0,60,AGITATION\n30,120,agitation\n")
        labels = parse_labels(path)

        assert labels.spans == (LabelSpan(0.0, 120.0, LabelClass.AGITATION),)
        assert not labels.fully_labeled

    def test_cross_class_overlap(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("P01,S1,false\n0,60,AGITATION\n30,120,NORMAL\n")
        with pytest.raises(OverlapConflict):
            parse_labels(path)

    def test_column_name_rows_ignored(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("participant_id,session_id,fully_labeled\nP01,S1,true\n"
                        "start_unix,end_unix,class\n10,20,NORMAL\n")
        assert parse_labels(path).spans == (LabelSpan(10.0, 20.0, LabelClass.NORMAL),)

    def test_shuffled_spans_sorted(self, tmp_path):
        rng = np.random.default_rng(3)
        points = np.sort(rng.choice(np.arange(0, 100000), size=100, replace=False)).astype(float)
        spans = [LabelSpan(points[2 * i], points[2 * i + 1],
                           LabelClass.AGITATION if rng.random() < 0.5 else LabelClass.NORMAL)
                 for i in range(50)]
        shuffled = [spans[i] for i in rng.permutation(50)]
        path = tmp_path / "labels.csv"
        path.write_text("P01,S1,false\n" + "".join(
            f"{int(s.start)},{int(s.end)},{s.label.value}\n" for s in shuffled))

        parsed = parse_labels(path)
        assert list(parsed.spans) == spans

    def test_write_then_parse(self, tmp_path):
        labels = LabelSet("P03", "S2", (LabelSpan(T0, T0 + 90.5, LabelClass.AGITATION),
                                        LabelSpan(T0 + 200, T0 + 400, LabelClass.NORMAL)), True)
        path = write_labels(labels, tmp_path / "labels.csv")
        assert parse_labels(path) == labels
        assert write_labels(parse_labels(path), tmp_path / "again.csv").read_bytes() == path.read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInput):
            parse_labels(tmp_path / "labels.csv")


class TestValidateSession:
    """Test validate_session findings."""

    def test_spans_inside_recording(self):
        rec = make_recording(duration=600.0)
        labels = LabelSet("P01", "S1", (LabelSpan(T0 + 60, T0 + 180, LabelClass.AGITATION),), True)
        report = validate_session(rec, labels)

        assert report.misalignments == ()
        assert report.is_clean
        assert report.usable_minutes == pytest.approx(10.0)

    def test_span_past_recording_end(self):
        rec = make_recording(duration=600.0)
        labels = LabelSet("P01", "S1", (LabelSpan(T0 + 500, T0 + 700, LabelClass.AGITATION),), True)
        report = validate_session(rec, labels)

        assert len(report.misalignments) == 1
        assert report.misalignments[0].outside_seconds == pytest.approx(100.0)

    def test_usable_duration_matches_interval_intersection(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            offsets = {name: float(rng.integers(0, 120)) for name in ChannelName}
            rec = make_recording(duration=300.0, starts={n: T0 + o for n, o in offsets.items()})
            report = validate_session(rec, LabelSet("P01", "S1"))
            expected = (T0 + 300.0 + min(offsets.values())) - (T0 + max(offsets.values()))
            assert report.usable_minutes == pytest.approx(expected / 60.0)

    def test_gap_runs_reported(self, archive_dir):
        (archive_dir / "TEMP.csv").write_text("1600000000\n4\n" + "33.0\n" * 100 + "x\n" * 8 + "33.0\n" * 132)
        rec = parse_e4_archive(archive_dir)
        report = validate_session(rec, LabelSet("P01", "S1"))

        assert len(report.coverage_gaps) == 1
        gap = report.coverage_gaps[0]
        assert gap.channel is ChannelName.TEMP
        assert gap.start == pytest.approx(T0 + 25.0)
        assert gap.seconds == pytest.approx(2.0)
        assert report.usable_minutes == pytest.approx(58.0 / 60.0)

    def test_overlapping_gaps_counted_once(self, archive_dir):
        (archive_dir / "TEMP.csv").write_text("1600000000\n4\n" + "33.0\n" * 100 + "x\n" * 8 + "33.0\n" * 132)
        (archive_dir / "EDA.csv").write_text("1600000000\n4\n" + "2.0\n" * 104 + "x\n" * 12 + "2.0\n" * 124)
        report = validate_session(parse_e4_archive(archive_dir), LabelSet("P01", "S1"))

        assert len(report.coverage_gaps) == 2
        assert report.usable_minutes == pytest.approx(56.0 / 60.0)


class TestDiscovery:
    """Test session discovery and loading."""

    def test_labeled_and_unlabeled_sessions(self, tmp_path):
        first = write_e4_archive(make_recording(duration=60.0), tmp_path / "P01" / "S1")
        write_labels(LabelSet("P01", "S1", (), True), first / LABEL_FILE_NAME)
        write_e4_archive(make_recording(duration=60.0, participant_id="P02"), tmp_path / "P02" / "S1")

        sessions = discover_sessions(tmp_path)
        assert sessions == [tmp_path / "P01" / "S1", tmp_path / "P02" / "S1"]

        _, labels = load_session(sessions[0])
        assert labels.fully_labeled
        rec, labels = load_session(sessions[1])
        assert rec.session_ref == ("P02", "S1")
        assert labels.spans == () and not labels.fully_labeled

    def test_empty_root(self, tmp_path):
        with pytest.raises(MissingInput, match="No E4 archives"):
            discover_sessions(tmp_path)
