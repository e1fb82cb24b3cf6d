"""Experiment driver: synthetic datasets, training runs, evaluation sweeps and reports"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from neurododge.checkpoint import save_network
from neurododge.errors import ConfigError, FormatError, NeuroDodgeError, ShapeError
from neurododge.events import EventStream, read_stream, window_to_us, write_stream
from neurododge.executor import EvalExecutor
from neurododge.kep import apply_kep
from neurododge.models import (
    LIGHTING_PROFILES, EvalMode, EvalReport, EvalRow, ExperimentConfig, KepConfig, Lighting, ObjectKind,
    ReportFormat, SceneConfig, TrainConfig,
)
from neurododge.scene import render_scene
from neurododge.snn import Network, build_network
from neurododge.deploy import quantize_weights
from neurododge.train import TrainingHistory, calibrate_network, fit

logger = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ["file", "label", "object", "lighting", "window_ms"]
REPORT_COLUMNS = [
    "object", "lighting", "window_ms", "mode", "kep", "quantized", "n", "success_rate", "mean_counts",
    "mean_synaptic_events", "mean_raw_events", "mean_main_events", "mean_key_events",
    "ms_per_inference", "peak_memory_mb",
]
SPLIT_CODES = {"train": 0, "test": 1}

Condition = Tuple[ObjectKind, Lighting, int]


@dataclass(frozen=True)
class LabeledStream:
    stream: EventStream
    label: int
    object: ObjectKind = ObjectKind.DISK
    lighting: Lighting = Lighting.INDOOR_NORMAL
    object_mask: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def window_ms(self) -> int:
        return int(round(self.stream.window_ms))


@dataclass
class Dataset:
    train: Dict[int, List[LabeledStream]] = field(default_factory=dict)
    test: Dict[Condition, List[LabeledStream]] = field(default_factory=dict)


# --- synthesis ------------------------------------------------------------

def scene_for(config: ExperimentConfig, kind: ObjectKind, lighting: Lighting, window_ms: int,
              direction: int, rng: np.random.Generator) -> SceneConfig:
    """Draw one approach: label 0 moves left to right (from the left), label 1 the reverse"""
    profile = LIGHTING_PROFILES[Lighting(lighting)]
    W, H = config.width, config.height
    r = rng.uniform(*config.radius_range)
    r_end = r * rng.uniform(1.0, 1.3)
    margin = max(r, r_end) + 1.0
    length = min(rng.uniform(*config.speed_range) * window_ms, W - 2 * margin - 2)
    cx = rng.uniform(margin + length / 2, W - 1 - margin - length / 2)
    cy = rng.uniform(0.3, 0.7) * (H - 1)
    drift = rng.uniform(-0.1, 0.1) * length
    x0, x1 = (cx - length / 2, cx + length / 2) if direction == 0 else (cx + length / 2, cx - length / 2)
    sign = rng.choice([-1.0, 1.0]) if config.mixed_polarity else 1.0
    return SceneConfig(
        kind=kind,
        start=(x0, cy - drift / 2),
        end=(x1, cy + drift / 2),
        radius=r,
        end_radius=r_end,
        direction=direction,
        threshold=config.threshold,
        contrast=sign * config.contrast * profile.contrast_multiplier,
        noise_rate=config.base_noise_rate * profile.noise_multiplier,
        seed=int(rng.integers(0, 2 ** 31 - 1)),
        window_ms=window_ms,
        width=W,
        height=H,
    )


def stratified_labels(n: int, balance: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly round(n * balance) zeros, the rest ones, in random order"""
    n_left = int(round(n * balance))
    return rng.permutation(np.array([0] * n_left + [1] * (n - n_left), dtype=np.int64))


def make_split(config: ExperimentConfig, split: str, kinds: Sequence[ObjectKind],
               lightings: Sequence[Lighting], window_ms: int, n: int) -> List[LabeledStream]:
    """``n`` labeled scenes; objects and lightings are assigned round-robin"""
    kinds, lightings = list(kinds), list(lightings)
    key = [config.seed, SPLIT_CODES[split], window_ms,
           sum(1 << i for i, k in enumerate(ObjectKind) if k in kinds),
           sum(1 << i for i, l in enumerate(Lighting) if l in lightings)]
    labels = stratified_labels(n, config.direction_balance, np.random.default_rng(key))
    samples = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng(key + [i])
        kind, lighting = kinds[i % len(kinds)], lightings[i % len(lightings)]
        result = render_scene(scene_for(config, kind, lighting, window_ms, int(label), rng))
        samples.append(LabeledStream(result.stream, int(label), kind, lighting, result.object_mask))
    return samples


def make_dataset(config: ExperimentConfig) -> Dataset:
    """Training scenes per window plus one test set per object x lighting x window"""
    dataset = Dataset()
    for window in config.windows:
        dataset.train[window] = make_split(config, "train", config.train_objects, config.lightings, window,
                                           config.train_size)
        for kind in config.test_objects:
            for lighting in config.lightings:
                dataset.test[(kind, lighting, window)] = make_split(config, "test", [kind], [lighting], window,
                                                                    config.test_size)
    logger.info(f"Dataset: {sum(map(len, dataset.train.values()))} training scenes, "
                f"{len(dataset.test)} test conditions of {config.test_size}")
    return dataset


# --- dataset directories --------------------------------------------------

def write_dataset(samples: Sequence[LabeledStream], directory: Union[str, Path], suffix: str = ".evs") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, sample in enumerate(samples):
        name = f"{sample.object.value}_{sample.lighting.value}_{sample.window_ms}ms_{i:05d}{suffix}"
        write_stream(sample.stream, directory / name)
        rows.append([name, sample.label, sample.object.value, sample.lighting.value, sample.window_ms])
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(directory / MANIFEST, index=False)
    logger.info(f"Wrote {len(samples)} streams to {directory}")
    return directory / MANIFEST


def read_dataset(directory: Union[str, Path]) -> List[LabeledStream]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise ConfigError(f"No {MANIFEST} in {directory}")
    df = pd.read_csv(manifest)
    missing = set(MANIFEST_COLUMNS) - set(df.columns)
    if missing:
        raise FormatError(f"{manifest} lacks columns {sorted(missing)}", offset=0)
    samples = []
    for row in df.itertuples(index=False):
        stream = read_stream(directory / row.file)
        if int(round(stream.window_ms)) != int(row.window_ms):
            raise ShapeError(f"{row.file}: window {stream.window_ms} ms, manifest says {row.window_ms}")
        samples.append(LabeledStream(stream, int(row.label), ObjectKind(row.object), Lighting(row.lighting)))
    return samples


def group_conditions(samples: Iterable[LabeledStream]) -> Dict[Condition, List[LabeledStream]]:
    groups: Dict[Condition, List[LabeledStream]] = OrderedDict()
    for s in samples:
        groups.setdefault((s.object, s.lighting, s.window_ms), []).append(s)
    return groups


# --- training -------------------------------------------------------------

def run_training(
    config: TrainConfig,
    checkpoint_path: Union[str, Path],
    experiment: Optional[ExperimentConfig] = None,
    history_path: Optional[Union[str, Path]] = None,
) -> Tuple[Network, TrainingHistory]:
    """Train one network for window T (1 ms per step) and write its checkpoint"""
    if config.dataset:
        samples = [s for d in config.dataset for s in read_dataset(d)]
    else:
        experiment = experiment or ExperimentConfig(seed=config.seed)
        samples = make_split(experiment, "train", experiment.train_objects, experiment.lightings, config.T,
                             config.train_size)
    window_us = config.T * 1000
    mismatched = [s for s in samples if s.stream.window_us != window_us]
    if mismatched:
        raise ShapeError(f"{len(mismatched)} streams do not span {config.T} ms; T must equal the window")
    net = build_network(T=config.T, seed=config.seed)
    pairs = [(s.stream, s.label) for s in samples]
    if config.calibration_samples:
        net = calibrate_network(net, pairs[:config.calibration_samples], config=config)
    net, history = fit(net, pairs, config=config)
    save_network(net, checkpoint_path)
    if history_path is not None:
        pd.DataFrame([vars(e) for e in history.epochs]).to_csv(history_path, index=False)
    return net, history


# --- evaluation -----------------------------------------------------------

def evaluate(
    net: Network,
    test_sets: Union[Dict[Condition, List[LabeledStream]], Sequence[LabeledStream]],
    mode: EvalMode = EvalMode.ASYNC,
    quantized: bool = False,
    kep_config: Optional[KepConfig] = None,
    timing: bool = False,
    checkpoint: str = "",
    max_workers: Optional[int] = None,
) -> EvalReport:
    """Success rate per condition: decoded approach channel equals the label"""
    if not isinstance(test_sets, dict):
        test_sets = group_conditions(test_sets)
    if quantized and not net.quantized:
        net = quantize_weights(net)
    executor = EvalExecutor(net, mode, kep_config, max_workers=max_workers)
    rows = []
    for (kind, lighting, window), samples in test_sets.items():
        if window_to_us(window) != net.T * 1000:
            raise ShapeError(f"Network T={net.T} cannot evaluate a {window} ms window")
        if not samples:
            logger.warning(f"No samples for {kind.value}/{lighting.value}/{window} ms")
            continue
        results, peak = executor.evaluate([s.stream for s in samples])
        labels = np.array([s.label for s in samples])
        counts = np.stack([r.counts for r in results])
        hits = np.argmax(counts, axis=1) == labels
        row = EvalRow(
            object=kind, lighting=lighting, window_ms=window, mode=mode,
            kep=kep_config is not None, quantized=net.quantized, n=len(samples),
            success_rate=float(hits.mean()),
            mean_counts=[float(c) for c in counts.mean(axis=0)],
            mean_synaptic_events=float(np.mean([r.synaptic_events for r in results])),
            mean_raw_events=float(np.mean([r.raw_events for r in results])),
            mean_main_events=float(np.mean([r.main_events for r in results])),
            mean_key_events=float(np.mean([r.key_events for r in results])),
            ms_per_inference=1000 * float(np.mean([r.seconds for r in results])) if timing else None,
            peak_memory_mb=peak if timing else None,
        )
        logger.info(f"{kind.value}/{lighting.value}/{window} ms [{EvalMode(mode).value}]: "
                    f"success {row.success_rate:.3f} over {row.n}")
        rows.append(row)
    return EvalReport(checkpoint=checkpoint, rows=rows,
                      config={"mode": EvalMode(mode).value, "kep": kep_config is not None, "quantized": net.quantized,
                              "kep_config": kep_config.model_dump() if kep_config else None})


def evaluate_sweep(
    networks: Sequence[Network],
    test_sets: Dict[Condition, List[LabeledStream]],
    modes: Sequence[EvalMode] = (EvalMode.ASYNC,),
    quantized: bool = False,
    kep_config: Optional[KepConfig] = None,
    timing: bool = False,
    checkpoint: str = "",
) -> EvalReport:
    """Every mode over every condition, each window served by the network whose T matches it"""
    by_T = {net.T: net for net in networks}
    rows = []
    for mode in modes:
        for window in sorted({w for _, _, w in test_sets}):
            if window not in by_T:
                raise ShapeError(f"No checkpoint with T={window} for the {window} ms window")
            subset = OrderedDict((k, v) for k, v in test_sets.items() if k[2] == window)
            report = evaluate(by_T[window], subset, mode, quantized, kep_config, timing)
            rows.extend(report.rows)
    return EvalReport(checkpoint=checkpoint, rows=rows,
                      config={"modes": [EvalMode(m).value for m in modes], "windows": sorted(by_T),
                              "kep": kep_config is not None, "quantized": quantized})


def kep_statistics(streams: Sequence[EventStream], config: Optional[KepConfig] = None) -> pd.DataFrame:
    """Per-stream raw / main / key sizes with the key-to-raw ratio"""
    rows = []
    for i, stream in enumerate(streams):
        result = apply_kep(stream, config)
        raw = len(result.raw)
        rows.append({"stream": i, "raw": raw, "main": len(result.main), "key": len(result.key),
                     "ratio": len(result.key) / raw if raw else 0.0, "kl": result.kl})
    return pd.DataFrame(rows, columns=["stream", "raw", "main", "key", "ratio", "kl"])


# --- reports --------------------------------------------------------------

def report_frame(report: EvalReport) -> pd.DataFrame:
    records = []
    for row in report.rows:
        d = row.model_dump(mode="json")
        d["mean_counts"] = ";".join(f"{c:g}" for c in row.mean_counts)
        records.append(d)
    return pd.DataFrame(records, columns=REPORT_COLUMNS)


def render_markdown(report: EvalReport) -> str:
    """Success rates (%) with one row per object and mode, one column per lighting and window"""
    cells = OrderedDict()
    columns: List[Tuple[str, int]] = []
    for row in report.rows:
        col = (row.lighting.value, row.window_ms)
        if col not in columns:
            columns.append(col)
        cells[(row.object.value, row.mode.value, col)] = row.success_rate
    keys = list(OrderedDict.fromkeys((r.object.value, r.mode.value) for r in report.rows))
    header = ["Object", "Mode"] + [f"{light} {w} ms" for light, w in columns]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for obj, mode in keys:
        values = [f"{100 * cells[(obj, mode, c)]:.1f}" if (obj, mode, c) in cells else "-" for c in columns]
        lines.append("| " + " | ".join([obj, mode] + values) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path: Union[str, Path], fmt: ReportFormat = ReportFormat.JSON) -> Path:
    path = Path(path)
    fmt = ReportFormat(fmt)
    if fmt == ReportFormat.JSON:
        text = report.model_dump_json(indent=2) + "\n"
    elif fmt == ReportFormat.CSV:
        text = report_frame(report).to_csv(index=False)
    else:
        text = render_markdown(report)
    try:
        path.write_text(text)
    except OSError as e:
        raise NeuroDodgeError(f"Cannot write report to {path}: {e}") from e
    logger.info(f"Report ({fmt.value}, {len(report.rows)} rows) written to {path}")
    return path


def _plain(value):
    if isinstance(value, np.generic):
        value = value.item()
    return None if isinstance(value, float) and np.isnan(value) else value


def load_report(path: Union[str, Path]) -> EvalReport:
    """Read a JSON or CSV report back"""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        df = pd.read_csv(path)
        rows = []
        for record in df.to_dict(orient="records"):
            record["mean_counts"] = [float(c) for c in str(record["mean_counts"]).split(";") if c]
            record = {k: _plain(v) for k, v in record.items()}
            rows.append(EvalRow(**record))
        return EvalReport(rows=rows)
    try:
        return EvalReport.model_validate(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not a JSON report: {e.msg}", offset=e.pos) from e


def plot_report(report: EvalReport, path: Union[str, Path]) -> Path:
    """Success rate against window, one line per mode, averaged over conditions"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    df = report_frame(report)
    if df.empty:
        raise ConfigError("Report has no rows to plot")
    summary = df.groupby(["mode", "window_ms"])["success_rate"].mean().reset_index()
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, group in summary.groupby("mode"):
        ax.plot(group["window_ms"], group["success_rate"], marker="o", label=mode)
    ax.set_xlabel("Time window (ms)")
    ax.set_ylabel("Success rate")
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
