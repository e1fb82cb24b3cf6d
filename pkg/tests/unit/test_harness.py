"""Unit tests for dataset synthesis, evaluation and reports"""

import json

import numpy as np
import pandas as pd
import pytest

from neurododge.errors import ConfigError, NeuroDodgeError, ShapeError
from neurododge.harness import (
    MANIFEST, REPORT_COLUMNS, LabeledStream, emit_report, evaluate, group_conditions, kep_statistics,
    load_report, make_dataset, make_split, read_dataset, render_markdown, report_frame, stratified_labels,
    plot_report, scene_for, write_dataset,
)
from neurododge.models import (
    EvalMode, EvalReport, EvalRow, ExperimentConfig, KepConfig, Lighting, ObjectKind, ReportFormat,
)
from neurododge.scene import render_scene
from tests.conftest import assert_valid_stream, moving_bar_stream, random_stream
from tests.fixtures.test_data import TINY_T


def small_experiment(**overrides) -> ExperimentConfig:
    values = dict(width=48, height=48, radius_range=(2.0, 3.0), speed_range=(0.3, 0.5), windows=[20],
                  train_size=6, test_size=4, test_objects=[ObjectKind.DISK], seed=3)
    values.update(overrides)
    return ExperimentConfig(**values)


def sample_report() -> EvalReport:
    rows = []
    for mode, rate in ((EvalMode.ASYNC, 0.95), (EvalMode.EF_SNN, 0.5)):
        for lighting in (Lighting.INDOOR_NORMAL, Lighting.INDOOR_LOW):
            rows.append(EvalRow(object=ObjectKind.DISK, lighting=lighting, window_ms=50, mode=mode, n=20,
                                success_rate=rate, mean_counts=[30.5, 9.0], mean_synaptic_events=1234.5,
                                mean_raw_events=900.0, mean_main_events=700.0, mean_key_events=300.0))
    return EvalReport(checkpoint="net50.snn", rows=rows)


class TestSynthesis:
    """Test cases for labeled scene generation"""

    @pytest.mark.unit
    @pytest.mark.parametrize("n,balance,zeros", [(800, 0.5, 400), (10, 0.3, 3), (7, 0.5, 4)])
    def test_stratified_labels(self, n, balance, zeros):
        """Test the exact label split"""
        labels = stratified_labels(n, balance, np.random.default_rng(0))

        assert len(labels) == n
        assert int((labels == 0).sum()) == zeros

    @pytest.mark.unit
    def test_split_is_deterministic(self):
        """Test the same seed gives the same scenes"""
        a = make_split(small_experiment(), "train", [ObjectKind.DISK], list(Lighting), 20, 4)
        b = make_split(small_experiment(), "train", [ObjectKind.DISK], list(Lighting), 20, 4)

        assert [s.stream for s in a] == [s.stream for s in b]
        assert [s.label for s in a] == [s.label for s in b]

    @pytest.mark.unit
    def test_splits_differ(self):
        """Test train and test scenes are drawn independently"""
        train = make_split(small_experiment(), "train", [ObjectKind.DISK], [Lighting.INDOOR_NORMAL], 20, 3)
        test = make_split(small_experiment(), "test", [ObjectKind.DISK], [Lighting.INDOOR_NORMAL], 20, 3)

        assert [s.stream for s in train] != [s.stream for s in test]

    @pytest.mark.unit
    def test_scene_streams_valid(self):
        """Test every scene is a valid stream over the requested window"""
        samples = make_split(small_experiment(), "test", [ObjectKind.TALL_BLOB], [Lighting.OUTDOOR_LOW], 20, 4)

        for s in samples:
            assert_valid_stream(s.stream)
            assert s.stream.window_us == 20_000
            assert (s.stream.width, s.stream.height) == (48, 48)
            assert s.object == ObjectKind.TALL_BLOB
            assert s.label in (0, 1)

    @pytest.mark.unit
    def test_round_robin_lightings(self):
        """Test lightings are assigned in turn"""
        samples = make_split(small_experiment(), "train", [ObjectKind.DISK], list(Lighting), 20, 8)

        assert [s.lighting for s in samples] == list(Lighting) * 2

    @pytest.mark.unit
    def test_low_light_adds_events(self):
        """Test the same approaches render more events under low light than under normal light"""
        config = small_experiment(width=128, height=128, radius_range=(4.0, 7.0), speed_range=(0.4, 1.2))
        totals = {}
        for lighting in (Lighting.INDOOR_NORMAL, Lighting.INDOOR_LOW):
            scenes = [scene_for(config, ObjectKind.DISK, lighting, 50, i % 2, np.random.default_rng(i))
                      for i in range(5)]
            totals[lighting] = sum(len(render_scene(s).stream) for s in scenes)

        assert totals[Lighting.INDOOR_LOW] > totals[Lighting.INDOOR_NORMAL]

    @pytest.mark.unit
    def test_dataset_layout(self):
        """Test one training split per window and one test set per condition"""
        config = small_experiment(lightings=[Lighting.INDOOR_NORMAL, Lighting.OUTDOOR_NORMAL],
                                  test_objects=[ObjectKind.DISK, ObjectKind.TALL_BLOB])

        dataset = make_dataset(config)

        assert list(dataset.train) == [20]
        assert len(dataset.train[20]) == 6
        assert len(dataset.test) == 4
        assert all(len(v) == 4 for v in dataset.test.values())


class TestDatasetFiles:
    """Test cases for dataset directories"""

    @pytest.mark.unit
    @pytest.mark.parametrize("suffix", [".evs", ".csv"])
    def test_roundtrip(self, tmp_path, tiny_dataset, suffix):
        """Test written datasets read back with labels and conditions"""
        write_dataset(tiny_dataset, tmp_path, suffix)

        loaded = read_dataset(tmp_path)

        assert [s.stream for s in loaded] == [s.stream for s in tiny_dataset]
        assert [s.label for s in loaded] == [s.label for s in tiny_dataset]
        assert pd.read_csv(tmp_path / MANIFEST).shape[0] == len(tiny_dataset)

    @pytest.mark.unit
    def test_missing_manifest(self, tmp_path):
        """Test a directory without a manifest is rejected"""
        with pytest.raises(ConfigError):
            read_dataset(tmp_path)

    @pytest.mark.unit
    def test_window_mismatch(self, tmp_path, tiny_dataset):
        """Test a manifest window that disagrees with the stream file"""
        write_dataset(tiny_dataset[:1], tmp_path)
        df = pd.read_csv(tmp_path / MANIFEST)
        df["window_ms"] = 50
        df.to_csv(tmp_path / MANIFEST, index=False)

        with pytest.raises(ShapeError):
            read_dataset(tmp_path)

    @pytest.mark.unit
    def test_group_conditions(self, tiny_dataset):
        """Test samples group by object, lighting and window"""
        extra = LabeledStream(moving_bar_stream(), 0, ObjectKind.TALL_BLOB, Lighting.OUTDOOR_LOW)

        groups = group_conditions(tiny_dataset + [extra])

        assert list(groups) == [(ObjectKind.DISK, Lighting.INDOOR_NORMAL, TINY_T),
                                (ObjectKind.TALL_BLOB, Lighting.OUTDOOR_LOW, TINY_T)]
        assert len(groups[(ObjectKind.DISK, Lighting.INDOOR_NORMAL, TINY_T)]) == 8


class TestEvaluate:
    """Test cases for condition-wise evaluation"""

    @pytest.mark.unit
    def test_one_row_per_condition(self, tiny_network, tiny_dataset):
        """Test the report row summarizes the condition"""
        report = evaluate(tiny_network, tiny_dataset, max_workers=2)

        assert len(report.rows) == 1
        row = report.rows[0]
        assert row.n == 8
        assert row.window_ms == TINY_T
        assert 0.0 <= row.success_rate <= 1.0
        assert row.ms_per_inference is None and row.peak_memory_mb is None
        assert row.mean_raw_events == row.mean_key_events

    @pytest.mark.unit
    def test_deterministic_without_timing(self, tiny_network, tiny_dataset):
        """Test two evaluations produce identical reports"""
        a = evaluate(tiny_network, tiny_dataset, EvalMode.SYNC)
        b = evaluate(tiny_network, tiny_dataset, EvalMode.SYNC)

        assert a.model_dump_json() == b.model_dump_json()

    @pytest.mark.unit
    def test_timing_fields(self, tiny_network, tiny_dataset):
        """Test timing fills the per-inference time"""
        report = evaluate(tiny_network, tiny_dataset, timing=True)

        assert report.rows[0].ms_per_inference >= 0

    @pytest.mark.unit
    def test_quantized_and_kep_flags(self, tiny_network, tiny_dataset):
        """Test quantization and KEP are recorded on the rows"""
        report = evaluate(tiny_network, tiny_dataset, quantized=True, kep_config=KepConfig())

        assert report.rows[0].quantized and report.rows[0].kep
        assert report.config["quantized"] is True

    @pytest.mark.unit
    def test_window_must_match(self, tiny_network):
        """Test streams of another window cannot be evaluated"""
        sample = LabeledStream(random_stream(seed=1, n=20, window_us=30_000), 0)

        with pytest.raises(ShapeError):
            evaluate(tiny_network, [sample])

    @pytest.mark.unit
    def test_kep_statistics(self):
        """Test per-stream KEP sizes"""
        streams = [random_stream(seed=i, n=200 * (i + 1), width=64, height=64, window_us=50_000) for i in range(3)]

        df = kep_statistics(streams)

        assert list(df.columns) == ["stream", "raw", "main", "key", "ratio", "kl"]
        assert df["raw"].tolist() == [200, 400, 600]
        assert (df["key"] <= df["main"]).all() and (df["main"] <= df["raw"]).all()


class TestReports:
    """Test cases for report output"""

    @pytest.mark.unit
    def test_frame_columns(self):
        """Test the flat report has one row per condition and the fixed columns"""
        df = report_frame(sample_report())

        assert list(df.columns) == REPORT_COLUMNS
        assert len(df) == 4
        assert df["mean_counts"].iloc[0] == "30.5;9"

    @pytest.mark.unit
    def test_markdown_table(self):
        """Test one markdown row per object and mode with percentages"""
        text = render_markdown(sample_report())
        lines = text.strip().splitlines()

        assert lines[0] == "| Object | Mode | indoor-normal 50 ms | indoor-low 50 ms |"
        assert len(lines) == 4
        assert lines[2] == "| disk | async | 95.0 | 95.0 |"
        assert lines[3] == "| disk | ef-snn | 50.0 | 50.0 |"

    @pytest.mark.unit
    @pytest.mark.parametrize("fmt,name", [(ReportFormat.JSON, "r.json"), (ReportFormat.CSV, "r.csv")])
    def test_roundtrip(self, tmp_path, fmt, name):
        """Test JSON and CSV reports load back to the same rows"""
        report = sample_report()
        path = emit_report(report, tmp_path / name, fmt)

        loaded = load_report(path)

        assert loaded.rows == report.rows

    @pytest.mark.unit
    def test_json_is_parseable(self, tmp_path):
        """Test the JSON report carries the checkpoint name"""
        path = emit_report(sample_report(), tmp_path / "r.json")

        assert json.loads(path.read_text())["checkpoint"] == "net50.snn"

    @pytest.mark.unit
    def test_unwritable_path(self, tmp_path):
        """Test a report path inside a missing directory"""
        with pytest.raises(NeuroDodgeError):
            emit_report(sample_report(), tmp_path / "missing" / "r.json")

    @pytest.mark.unit
    def test_plot(self, tmp_path):
        """Test the success-rate plot is written"""
        path = plot_report(sample_report(), tmp_path / "plot.png")

        assert path.exists() and path.stat().st_size > 0

    @pytest.mark.unit
    def test_plot_empty_report(self, tmp_path):
        """Test an empty report cannot be plotted"""
        with pytest.raises(ConfigError):
            plot_report(EvalReport(), tmp_path / "plot.png")
