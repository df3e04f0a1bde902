#!/usr/bin/env python3
"""
VCNN Command-Line Interface

Usage:
    python vcnn.py train --epochs 2 --variant imp6 --model artifacts/models/lenet.vcnn
    python vcnn.py predict --model artifacts/models/lenet.vcnn --input t10k-images-idx3-ubyte
    python vcnn.py bench ladder --scale 1 --batch 100 --format csv
    python vcnn.py bench sweep --scale 1 --batches 1,10,100 --variant imp6 --out sweep.json --format json
    python vcnn.py bench breakdown --scale 2 --batch 50
    python vcnn.py bench networks --scale 1 --networks 4 --batches 1,10,100
    python vcnn.py denoise train --model artifacts/models/denoise.vcnn
    python vcnn.py denoise apply --model artifacts/models/denoise.vcnn --input noisy.pgm --out clean.pgm
    python vcnn.py selftest
    python vcnn.py config

Exit codes:
    0  success
    1  usage or configuration error (unknown flag, missing config file, bad spec)
    2  runtime error (parse failure, divergence, I/O)

Bench reports go to stdout unless --out is given; logs always go to stderr.

Invoked by: user
Invokes: config_loader, logging_config, network, variants, bench_runner, bench_monitor,
         dataset_loader, denoise, storage_manager, selftest
"""

import argparse
import sys
import uuid
from pathlib import Path
from typing import List, Optional

from rich.console import Console
from rich.table import Table

from src import __version__
from src.config_loader import Config, ConfigLoader, RunConfig
from src.error_handler import ConfigError, SpecError, UsageError, VcnnError
from src.logging_config import get_logger, set_run_id, setup_logging

EXIT_SUCCESS = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

DEFAULT_MODEL = 'lenet'
SYNTH_TRAIN_SAMPLES = 1000
SYNTH_TEST_SAMPLES = 200

console = Console()
err_console = Console(stderr=True)
logger = get_logger('vcnn')


class VcnnArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting with status 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


# ============================================================================
# Shared helpers
# ============================================================================

def _run_config(args) -> RunConfig:
    return ConfigLoader.load_run_config(args.config) if args.config else RunConfig()


def _precision(args, config: Config, run: Optional[RunConfig] = None) -> str:
    if args.precision:
        return args.precision
    if run is not None and 'precision' in run.train:
        return run.train['precision']
    return config.precision


def _train_config(args, config: Config, run: RunConfig, **defaults):
    """TrainConfig from defaults, then the run document, then command-line flags."""
    from src.network import TrainConfig  # pylint: disable=import-outside-toplevel
    values = {**defaults, **run.train, 'precision': _precision(args, config, run)}
    if getattr(args, 'batch', None):
        values['batch_size'] = args.batch
    if getattr(args, 'epochs', None):
        values['epochs'] = args.epochs
    if args.seed is not None:
        values['seed'] = args.seed
    return TrainConfig.from_dict(values)


def _network_spec(run: RunConfig, seed: int):
    from src.bench_runner import PRESETS, preset_spec  # pylint: disable=import-outside-toplevel
    from src.network import lenet_spec, spec_from_dict  # pylint: disable=import-outside-toplevel
    if run.network is not None:
        return spec_from_dict({**run.network, 'seed': seed})
    preset = run.preset or DEFAULT_MODEL
    if preset == 'lenet':
        return lenet_spec(seed=seed)
    if preset in PRESETS:
        return preset_spec(preset, seed)
    raise ConfigError(f"Unknown preset {preset!r} in {run.source}; expected 'lenet' or one of {sorted(PRESETS)}")


def _history_table(history) -> Table:
    table = Table(title="Training", show_header=True, header_style="bold cyan")
    for column in ('Epoch', 'Loss', 'Seconds', 'Images/s'):
        table.add_column(column, justify='right')
    for stats in history:
        table.add_row(str(stats.epoch), f"{stats.loss:.5f}", f"{stats.seconds:.2f}", f"{stats.images_per_sec:.1f}")
    return table


# ============================================================================
# Commands
# ============================================================================

def cmd_train(args, config: Config) -> int:
    """Train a classifier on MNIST-format data, or synthetic digits without a data directory."""
    # pylint: disable=import-outside-toplevel
    from src.dataset_loader import load_mnist, synth_digits
    from src.network import build_network, evaluate, train
    from src.storage_manager import StorageManager, save_model
    from src.variants import make_executor, train_step

    run = _run_config(args)
    train_config = _train_config(args, config, run)
    spec = _network_spec(run, train_config.seed)

    data_dir = args.data_dir or config.data_dir
    if data_dir:
        train_set, test_set = load_mnist(data_dir)
    else:
        logger.info("No data directory given; training on synthetic digits")
        train_set = synth_digits(SYNTH_TRAIN_SAMPLES, seed=train_config.seed)
        test_set = synth_digits(SYNTH_TEST_SAMPLES, seed=train_config.seed + 1)

    net = build_network(spec, train_config.precision)
    executor = make_executor(args.variant, workers=config.threads)
    net, history = train(net, train_set, train_config, step_fn=train_step(executor))
    accuracy = evaluate(net, test_set)

    model_path = Path(args.model) if args.model else StorageManager().model_path(DEFAULT_MODEL)
    save_model(net, model_path)

    console.print(_history_table(history))
    console.print(f"[green]Test accuracy:[/green] {accuracy:.4f}  [dim]model: {model_path}[/dim]")
    return EXIT_SUCCESS


def cmd_predict(args, config: Config) -> int:
    """Classify IDX images (or one PGM image) with a saved model."""
    # pylint: disable=import-outside-toplevel
    import numpy as np
    from src.dataset_loader import load_idx, read_pgm
    from src.storage_manager import atomic_write, load_model
    from src.variants import make_executor, run_batch

    net = load_model(args.model)
    if not net.head.is_classifier:
        raise SpecError("predict needs a classifier model; use 'denoise apply' for denoise models")
    source = Path(args.input)
    if source.suffix.lower() == '.pgm':
        images = read_pgm(source)[None, None]
        labels = None
    else:
        dataset = load_idx(source, args.labels, split='predict')
        images, labels = dataset.images, (dataset.labels if args.labels else None)

    executor = make_executor(args.variant, workers=config.threads)
    outputs = run_batch(executor, net, images.astype(net.dtype)).outputs
    predictions = outputs.reshape(outputs.shape[0], -1).argmax(axis=1)

    lines = '\n'.join(str(int(p)) for p in predictions) + '\n'
    if args.out:
        atomic_write(args.out, lines)
        console.print(f"Wrote {len(predictions)} predictions to {args.out}")
    else:
        sys.stdout.write(lines)
    if labels is not None:
        accuracy = float(np.mean(predictions == labels))
        console.print(f"[green]Accuracy:[/green] {accuracy:.4f}", highlight=False)
    return EXIT_SUCCESS


def _bench_table(reports) -> Table:
    table = Table(title="Bench", show_header=True, header_style="bold cyan")
    for column in ('Network', 'Variant', 'Mode', 'Batch', 'Images/s', 'Conv', 'Pool', 'Full', 'Other'):
        table.add_column(column, justify='right')
    for report in reports:
        if report.available:
            fractions = report.fractions
            shares = [f"{fractions[f'{c}_f'] + fractions[f'{c}_b']:.0%}" for c in ('conv', 'pool', 'full', 'other')]
            rate = f"{report.images_per_sec:.1f}"
        else:
            shares = [''] * 4
            rate = f"[yellow]n/a ({report.reason})[/yellow]"
        table.add_row(report.network or report.scale, report.variant, report.mode, str(report.batch), rate, *shares)
    return table


def _summary_tables(reports) -> List[Table]:
    """Best batch per network and speedup over the least vectorized variant, where the run covers them."""
    from src.bench_runner import optimal_batch, speedup_table  # pylint: disable=import-outside-toplevel
    tables = []
    if len({report.batch for report in reports}) > 1:
        best = Table(title="Optimal batch", show_header=True, header_style="bold cyan")
        for column in ('Network', 'Variant', 'Mode', 'Batch'):
            best.add_column(column, justify='right')
        for (network, variant, mode), batch in sorted(optimal_batch(reports).items()):
            best.add_row(network, variant, mode, str(batch))
        tables.append(best)
    if len({report.variant for report in reports}) > 1:
        speedup = Table(title="Speedup", show_header=True, header_style="bold cyan")
        for column in ('Scale', 'Mode', 'Batch', 'Variant', 'Baseline', 'Speedup'):
            speedup.add_column(column, justify='right')
        for row in speedup_table(reports):
            ratio = f"{row['speedup']:.2f}x" if row['speedup'] is not None else 'n/a'
            speedup.add_row(row['scale'], row['mode'], str(row['batch']), row['variant'],
                            row['baseline'] or '-', ratio)
        tables.append(speedup)
    return tables


def _emit_reports(args, reports) -> None:
    # pylint: disable=import-outside-toplevel
    from src.bench_monitor import BenchMonitor
    from src.bench_runner import reports_to_csv, reports_to_json, write_reports
    from src.storage_manager import StorageManager

    if args.history:
        with BenchMonitor(args.history) as monitor:
            for report in reports:
                monitor.record_and_compare(report, run_id=args.run_id)

    out = args.out
    if out is None and args.save:
        out = str(StorageManager().report_path(args.save, args.format))
    if out:
        write_reports(reports, out, args.format)
        console.print(_bench_table(reports))
        for table in _summary_tables(reports):
            console.print(table)
        console.print(f"[dim]Report written to {out}[/dim]")
    else:
        sys.stdout.write(reports_to_csv(reports) if args.format == 'csv' else reports_to_json(reports) + '\n')
        for table in _summary_tables(reports):
            err_console.print(table)


def cmd_bench(args, config: Config) -> int:
    """Run one of the bench suites and emit CSV/JSON."""
    # pylint: disable=import-outside-toplevel
    from src.bench_runner import run_breakdown, run_ladder, run_network_sweep, run_sweep

    precision = _precision(args, config)
    timeout = args.timeout if args.timeout is not None else config.bench_timeout
    common = {'reps': args.reps, 'warmup': args.warmup, 'timeout': timeout, 'seed': args.seed or 0,
              'precision': precision}

    if args.bench_command == 'ladder':
        variants = [args.variant] if args.variant else None
        reports = run_ladder(args.scale, args.batch, args.mode, variants, **common)
    elif args.bench_command == 'sweep':
        reports = run_sweep(args.scale, args.batches, args.mode, args.variant or 'imp6', **common)
    elif args.bench_command == 'breakdown':
        reports = [run_breakdown(args.scale, args.batch, args.variant or 'imp6', **common)]
    else:
        reports = run_network_sweep(args.scale, args.networks, args.batches, args.mode,
                                    variant=args.variant or 'imp6', **common)
    _emit_reports(args, reports)
    return EXIT_SUCCESS


def cmd_denoise_train(args, config: Config) -> int:
    """Train the conv-only denoiser on synthesized noisy/clean pairs."""
    # pylint: disable=import-outside-toplevel
    from src.denoise import DenoiseConfig, denoise_spec, train_denoiser
    from src.network import spec_from_dict
    from src.storage_manager import StorageManager

    run = _run_config(args)
    defaults = DenoiseConfig()
    train_config = _train_config(args, config, run, learning_rate=defaults.train.learning_rate,
                                 momentum=defaults.train.momentum, batch_size=defaults.train.batch_size,
                                 epochs=defaults.train.epochs)
    if run.network is not None:
        spec = spec_from_dict({**run.network, 'seed': train_config.seed})
    else:
        spec = denoise_spec(seed=train_config.seed)
    denoise_config = DenoiseConfig(spec=spec, train=train_config,
                                   sigma=float(run.extras.get('sigma', defaults.sigma)),
                                   train_samples=int(run.extras.get('train_samples', defaults.train_samples)),
                                   test_samples=int(run.extras.get('test_samples', defaults.test_samples)),
                                   clean_dir=args.data_dir)
    model_path = Path(args.model) if args.model else StorageManager().model_path('denoise')
    result = train_denoiser(denoise_config, model_path)

    console.print(_history_table(result.history))
    console.print(f"PSNR noisy {result.psnr_noisy:.2f} dB -> denoised {result.psnr_denoised:.2f} dB "
                  f"([green]{result.gain_db:+.2f} dB[/green])  [dim]model: {result.model_path}[/dim]",
                  highlight=False)
    return EXIT_SUCCESS


def cmd_denoise_apply(args, config: Config) -> int:  # pylint: disable=unused-argument
    """Denoise one PGM image with a saved model."""
    # pylint: disable=import-outside-toplevel
    from src.dataset_loader import read_pgm, write_pgm
    from src.denoise import denoise_apply
    from src.storage_manager import load_model

    if not args.out:
        raise UsageError("denoise apply needs --out <file.pgm>")
    net = load_model(args.model)
    image = read_pgm(args.input)
    denoised = denoise_apply(net, image)
    write_pgm(args.out, denoised)
    console.print(f"Denoised {image.shape[0]}x{image.shape[1]} -> {denoised.shape[0]}x{denoised.shape[1]}, "
                  f"written to {args.out}", highlight=False)
    return EXIT_SUCCESS


def cmd_selftest(args, config: Config) -> int:  # pylint: disable=unused-argument
    """Run the oracle suites; exit 0 only when all pass."""
    from src.selftest import run_selftest  # pylint: disable=import-outside-toplevel

    results = run_selftest(quick=not args.full, seed=args.seed or 0)
    table = Table(title="Self-test", show_header=True, header_style="bold cyan")
    for column in ('Suite', 'Result', 'Seconds', 'Detail'):
        table.add_column(column)
    for result in results:
        status = "[green]PASS[/green]" if result.passed else "[bold red]FAIL[/bold red]"
        table.add_row(result.name, status, f"{result.seconds:.2f}", result.detail)
    console.print(table)
    return EXIT_SUCCESS if all(result.passed for result in results) else EXIT_RUNTIME


def cmd_config(args, config: Config) -> int:  # pylint: disable=unused-argument
    """Display the effective process configuration and the artifact store."""
    from src.storage_manager import StorageManager  # pylint: disable=import-outside-toplevel
    table = Table(title="Configuration", show_header=True, header_style="bold cyan")
    table.add_column("Setting", style="cyan")
    table.add_column("Value")
    for setting, value in ConfigLoader.describe(config):
        table.add_row(setting, value)
    store = StorageManager()
    stats = store.get_storage_stats()
    models = ', '.join(path.stem for path in store.list_models()) or '-'
    table.add_row('artifacts', str(store.base_dir))
    table.add_row('stored models', f"{stats['models']} ({models})")
    table.add_row('stored reports', str(stats['reports']))
    table.add_row('artifact bytes', str(stats['total_bytes']))
    console.print(table)
    return EXIT_SUCCESS


# ============================================================================
# Parser
# ============================================================================

def build_parser() -> VcnnArgumentParser:
    """Argument parser with every subcommand."""
    common = VcnnArgumentParser(add_help=False)
    common.add_argument('--config', help='Flat JSON run document')
    common.add_argument('--seed', type=int, default=None, help='Seed for data, initialization and shuffling')
    common.add_argument('--precision', choices=['f32', 'f64'], default=None, help='Floating-point precision')
    common.add_argument('--log-level', default=None, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                        help='Override VCNN_LOG_LEVEL')

    variant = VcnnArgumentParser(add_help=False)
    variant.add_argument('--variant', default=None, help='Implementation imp1..imp6')

    parser = VcnnArgumentParser(
        prog='vcnn.py',
        description='Vectorized CNN framework - training, inference, benchmarks and self-test',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s train --epochs 2                          # Train LeNet on synthetic digits
  %(prog)s train --data-dir ./mnist --variant imp6   # Train on MNIST-format files
  %(prog)s bench ladder --scale 1 --batch 100        # Throughput of every variant
  %(prog)s bench sweep --scale 1 --batches 1,10,100  # Throughput against batch size
  %(prog)s denoise train                             # Train the denoiser
  %(prog)s selftest                                  # Run the oracle suites
        """
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    parser_train = subparsers.add_parser('train', parents=[common, variant], help='Train a classifier')
    parser_train.add_argument('--data-dir', help='Directory with MNIST-format IDX files')
    parser_train.add_argument('--batch', type=int, help='Mini-batch size')
    parser_train.add_argument('--epochs', type=int, help='Training epochs')
    parser_train.add_argument('--model', help='Output ModelFile path')
    parser_train.set_defaults(func=cmd_train, variant='imp6')

    parser_predict = subparsers.add_parser('predict', parents=[common, variant], help='Classify images')
    parser_predict.add_argument('--model', required=True, help='ModelFile path')
    parser_predict.add_argument('--input', required=True, help='IDX image file or PGM image')
    parser_predict.add_argument('--labels', help='IDX label file, to report accuracy')
    parser_predict.add_argument('--out', help='Write one prediction per line to this file')
    parser_predict.set_defaults(func=cmd_predict, variant='imp6')

    parser_bench = subparsers.add_parser('bench', help='Benchmarks')
    bench_sub = parser_bench.add_subparsers(dest='bench_command', help='Bench suites')
    bench_common = VcnnArgumentParser(add_help=False)
    bench_common.add_argument('--scale', default='1', help='Preset: 1, 2, 3 or a preset name')
    bench_common.add_argument('--mode', choices=['train', 'test'], default='train', help='Timed passes')
    bench_common.add_argument('--reps', type=int, default=3, help='Timed repetitions (>= 3)')
    bench_common.add_argument('--warmup', type=int, default=1, help='Untimed passes (>= 1)')
    bench_common.add_argument('--timeout', type=float, default=None, help='Seconds per cell')
    bench_common.add_argument('--format', choices=['csv', 'json'], default='csv', help='Report format')
    bench_common.add_argument('--out', help='Report path (stdout when omitted)')
    bench_common.add_argument('--save', metavar='NAME', help='Store the report as artifacts/reports/NAME.<format>')
    bench_common.add_argument('--history', help='SQLite bench history database')
    bench_parents = [common, variant, bench_common]

    parser_ladder = bench_sub.add_parser('ladder', parents=bench_parents, help='Every variant at one batch size')
    parser_ladder.add_argument('--batch', type=int, default=100, help='Batch size')
    parser_sweep = bench_sub.add_parser('sweep', parents=bench_parents, help='One variant over batch sizes')
    parser_sweep.add_argument('--batches', type=_int_list, default=[1, 10, 100], help='Comma list, increasing')
    parser_breakdown = bench_sub.add_parser('breakdown', parents=bench_parents, help='Per-component times')
    parser_breakdown.add_argument('--batch', type=int, default=100, help='Batch size')
    parser_networks = bench_sub.add_parser('networks', parents=bench_parents, help='Sweeps over derived networks')
    parser_networks.add_argument('--networks', type=int, default=4, help='Number of derived networks')
    parser_networks.add_argument('--batches', type=_int_list, default=[1, 10, 100], help='Comma list, increasing')
    for sub in (parser_ladder, parser_sweep, parser_breakdown, parser_networks):
        sub.set_defaults(func=cmd_bench)

    parser_denoise = subparsers.add_parser('denoise', help='Image denoising')
    denoise_sub = parser_denoise.add_subparsers(dest='denoise_command', help='Denoise commands')
    parser_dtrain = denoise_sub.add_parser('train', parents=[common], help='Train the denoiser')
    parser_dtrain.add_argument('--data-dir', help='Directory of clean PGM images to tile')
    parser_dtrain.add_argument('--batch', type=int, help='Mini-batch size')
    parser_dtrain.add_argument('--epochs', type=int, help='Training epochs')
    parser_dtrain.add_argument('--model', help='Output ModelFile path')
    parser_dtrain.set_defaults(func=cmd_denoise_train)
    parser_dapply = denoise_sub.add_parser('apply', parents=[common], help='Denoise one PGM image')
    parser_dapply.add_argument('--model', required=True, help='ModelFile path')
    parser_dapply.add_argument('--input', required=True, help='Noisy PGM image')
    parser_dapply.add_argument('--out', help='Output PGM image')
    parser_dapply.set_defaults(func=cmd_denoise_apply)

    parser_selftest = subparsers.add_parser('selftest', parents=[common], help='Run the oracle suites')
    parser_selftest.add_argument('--full', action='store_true', help='More random cases per suite')
    parser_selftest.set_defaults(func=cmd_selftest)

    parser_config = subparsers.add_parser('config', parents=[common], help='Show the effective configuration')
    parser_config.set_defaults(func=cmd_config)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    CLI entry point.

    Returns:
        int: 0 on success, 1 on usage/configuration errors, 2 on runtime errors
    """
    try:
        ConfigLoader.pin_threads()
        parser = build_parser()
        args = parser.parse_args(argv)
        if not hasattr(args, 'func'):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        config = ConfigLoader.load()
        if args.config and not Path(args.config).is_file():
            raise ConfigError(f"Config file not found: {args.config}")
    except SystemExit as exit_request:
        return int(exit_request.code or 0)
    except (UsageError, ConfigError, ValueError) as error:
        err_console.print(f"[bold red]Error:[/bold red] {error}", highlight=False)
        return EXIT_USAGE

    setup_logging(log_dir=config.log_dir, log_level=args.log_level or config.log_level)
    args.run_id = uuid.uuid4().hex[:8]
    set_run_id(args.run_id)
    logger.debug("Running %s", args.command, extra={'operation': args.command})

    try:
        return args.func(args, config)
    except (UsageError, ConfigError, SpecError) as error:
        logger.error("%s", error, extra={'error_type': type(error).__name__})
        err_console.print(f"[bold red]Error:[/bold red] {error}", highlight=False)
        return EXIT_USAGE
    except (VcnnError, OSError, ValueError) as error:
        logger.error("%s", error, exc_info=args.log_level == 'DEBUG', extra={'error_type': type(error).__name__})
        err_console.print(f"[bold red]Error:[/bold red] {error}", highlight=False)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
