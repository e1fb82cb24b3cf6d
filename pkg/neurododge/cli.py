"""Command-line entry point: ``python -m neurododge <command>``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from neurododge import __version__
from neurododge.checkpoint import load_network, save_network
from neurododge.errors import NeuroDodgeError
from neurododge.events import read_stream, write_stream
from neurododge.harness import (
    emit_report, evaluate_sweep, group_conditions, kep_statistics, load_report, make_split, plot_report,
    read_dataset, run_training, write_dataset,
)
from neurododge.deploy import quantize_weights
from neurododge.kep import apply_kep
from neurododge.models import EvalMode, ExperimentConfig, KepConfig, Lighting, ObjectKind, ReportFormat, TrainConfig
from neurododge.train import load_train_config

logger = logging.getLogger("neurododge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1 instead of argparse's 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def _kep_config(args) -> KepConfig:
    return KepConfig(radius=args.kep_radius, trials=args.kep_trials, bins=args.kep_bins, seed=args.kep_seed)


def cmd_gen(args) -> int:
    config = ExperimentConfig(
        seed=args.seed,
        width=args.width,
        height=args.height,
        direction_balance=args.balance,
        base_noise_rate=args.noise_rate,
        mixed_polarity=args.mixed_polarity,
    )
    objects = [ObjectKind(o) for o in args.object]
    lightings = [Lighting(l) for l in args.lighting]
    samples = make_split(config, args.split, objects, lightings, args.window, args.count)
    write_dataset(samples, args.out, suffix=".csv" if args.format == "csv" else ".evs")
    print(f"Generated {len(samples)} streams in {args.out}")
    return EXIT_OK


def cmd_kep(args) -> int:
    config = _kep_config(args)
    streams = [read_stream(p) for p in args.inputs]
    stats = kep_statistics(streams, config)
    stats.insert(0, "file", [Path(p).name for p in args.inputs])
    print(stats.to_string(index=False))
    if len(stats):
        print(f"\nmean raw {stats['raw'].mean():.1f}, main {stats['main'].mean():.1f}, "
              f"key {stats['key'].mean():.1f}, key/raw {stats['ratio'].mean():.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for path, stream in zip(args.inputs, streams):
            write_stream(apply_kep(stream, config).key, out / Path(path).name)
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_train_config(args.config) if args.config else None
    overrides = {"seed": args.seed}
    for key in ("epochs", "T", "lr", "batch_size", "calibration_samples"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.dataset:
        overrides["dataset"] = args.dataset
    if args.kep:
        overrides["kep"] = True
    config = TrainConfig(**{**(config.model_dump() if config else {}), **overrides})
    _, history = run_training(config, args.out, history_path=args.history)
    last = history.epochs[-1]
    print(f"Checkpoint {args.out}: final loss {last.loss:.5f}, accuracy {last.accuracy:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    networks = [load_network(p) for p in args.checkpoint]
    if args.quantize_out:
        save_network(quantize_weights(networks[0]), args.quantize_out)
    samples = [s for d in args.data for s in read_dataset(d)]
    report = evaluate_sweep(
        networks,
        group_conditions(samples),
        modes=[EvalMode(m) for m in args.mode],
        quantized=args.quantized,
        kep_config=_kep_config(args) if args.kep else None,
        timing=args.timing,
        checkpoint=",".join(str(p) for p in args.checkpoint),
    )
    emit_report(report, args.out, ReportFormat(args.format))
    for row in report.rows:
        print(f"{row.object.value:10s} {row.lighting.value:15s} {row.window_ms:4d} ms {row.mode.value:7s} "
              f"success {row.success_rate:.3f} (n={row.n})")
    return EXIT_OK


def cmd_report(args) -> int:
    emit_report(load_report(args.input), args.out, ReportFormat(args.format))
    return EXIT_OK


def cmd_plot(args) -> int:
    plot_report(load_report(args.input), args.out)
    print(f"Plot written to {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    if args.checkpoint:
        os.environ["NEURODODGE_CHECKPOINT"] = str(args.checkpoint)
    uvicorn.run("neurododge.main:app", host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


def _add_kep_options(p: argparse.ArgumentParser) -> None:
    defaults = KepConfig()
    p.add_argument("--kep-radius", type=float, default=defaults.radius, help="Main-stream radius (normalized)")
    p.add_argument("--kep-trials", type=int, default=defaults.trials, help="Random subsets scored per stream")
    p.add_argument("--kep-bins", type=int, default=defaults.bins, help="Histogram cells per axis")
    p.add_argument("--kep-seed", type=int, default=defaults.seed, help="Seed of the subset draws")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="neurododge", description="Asynchronous event-based dodging pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("gen", help="Synthesize labeled event streams")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="Output directory (streams + manifest.csv)")
    p.add_argument("--count", type=int, default=800)
    p.add_argument("--window", type=int, default=50, help="Time window in ms")
    p.add_argument("--object", nargs="+", default=[ObjectKind.DISK.value], choices=[o.value for o in ObjectKind])
    p.add_argument("--lighting", nargs="+", default=[Lighting.INDOOR_NORMAL.value],
                   choices=[l.value for l in Lighting])
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--balance", type=float, default=0.5, help="Fraction of scenes approaching from the left")
    p.add_argument("--noise-rate", type=float, default=ExperimentConfig.model_fields["base_noise_rate"].default,
                   help="Base noise in events/pixel/s; low light multiplies it")
    p.add_argument("--mixed-polarity", action="store_true")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--format", default="evs1", choices=["evs1", "csv"])
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("kep", help="Filter streams and print raw/main/key statistics")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", help="Directory for the key streams")
    _add_kep_options(p)
    p.set_defaults(func=cmd_kep)

    p = sub.add_parser("train", help="Train a network and write an SNN1 checkpoint")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--out", required=True, help="Checkpoint path")
    p.add_argument("--history", help="CSV file for per-epoch loss and accuracy")
    p.add_argument("--dataset", nargs="+", help="Dataset directories (default: generate in-run)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--T", type=int, help="Time steps (= window in ms)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--calibration-samples", type=int, help="Scenes used to balance layer gains (0 disables)")
    p.add_argument("--kep", action="store_true", help="Train on KEP key streams")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate checkpoints on dataset directories")
    p.add_argument("--checkpoint", nargs="+", required=True, help="One checkpoint per window")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--mode", nargs="+", default=[EvalMode.ASYNC.value], choices=[m.value for m in EvalMode])
    p.add_argument("--quantized", action="store_true", help="Quantize weights to 8 bits before evaluating")
    p.add_argument("--quantize-out", help="Also write the quantized first checkpoint here")
    p.add_argument("--kep", action="store_true")
    p.add_argument("--timing", action="store_true", help="Record wall-clock and peak memory")
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="json", choices=[f.value for f in ReportFormat])
    _add_kep_options(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="Convert a report between formats")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="markdown", choices=[f.value for f in ReportFormat])
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="Plot success rate against window")
    p.add_argument("input")
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("serve", help="Run the inference service")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except NeuroDodgeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
