"""
Bench Runner Module

Benchmark harness for the vectorization ladder: throughput of every variant at
one batch size, throughput against batch size, per-component time breakdown,
and batch sweeps over randomly derived networks.

Methodology:
    - Timing covers forward (test mode) or forward + backward (train mode) only;
      data synthesis and network construction are outside the timed region.
    - Each cell runs `warmup` untimed passes, then `reps` timed passes; the
      reported wall time is the median.
    - throughput = images per pass / median wall time.
    - A cell that exceeds its time budget or runs out of memory is reported as
      not available ("n/a") and the run continues.

Data Flow:
    BenchScenario → measure_cell() → [Executor + ComponentTimer] → BenchReport
    run_ladder / run_sweep / run_breakdown → [BenchReport] → reports_to_csv / reports_to_json

Invoked by: vcnn, scripts/bench_dashboard.py
Invokes: variants, network, error_handler, storage_manager
"""

import csv
import io
import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.error_handler import (BenchmarkError, CellOutcome, ConfigError, Deadline, SlowVariantBreaker,
                               guard_cell)
from src.logging_config import get_logger
from src.network import Network, NetworkSpec, build_network, infer_shapes, spec_from_dict, spec_to_dict
from src.storage_manager import atomic_write
from src.tensor_core import Precision
from src.variants import ComponentTimer, VariantId, make_executor, run_batch

logger = get_logger(__name__)

SCHEMA_VERSION = 'vcnn-bench/1'
MODES = ('train', 'test')
COMPONENT_FIELDS = ['conv_f', 'conv_b', 'pool_f', 'pool_b', 'full_f', 'full_b', 'other_f', 'other_b']
CSV_FIELDS = ['scale', 'variant', 'mode', 'batch', 'images_per_sec'] + COMPONENT_FIELDS + ['reps', 'warmup']
NOT_AVAILABLE = 'n/a'


# ============================================================================
# Presets
# ============================================================================

PRESETS: Dict[str, Dict[str, Any]] = {
    'scale1-analog': {
        'input_shape': [1, 28, 28],
        'layers': [
            {'kind': 'conv', 'maps': 20, 'kernel': 5},
            {'kind': 'pool', 'size': 2, 'stride': 2},
            {'kind': 'conv', 'maps': 50, 'kernel': 5},
            {'kind': 'pool', 'size': 2, 'stride': 2},
            {'kind': 'full', 'units': 500},
            {'kind': 'full', 'units': 500},
            {'kind': 'full', 'units': 10, 'activation': 'identity'},
        ],
        'loss': 'softmax-cross-entropy',
    },
    'scale2-mini': {
        'input_shape': [3, 32, 32],
        'layers': [
            {'kind': 'conv', 'maps': 32, 'kernel': 5},
            {'kind': 'pool', 'size': 2, 'stride': 2},
            {'kind': 'conv', 'maps': 64, 'kernel': 5},
            {'kind': 'pool', 'size': 2, 'stride': 2},
            {'kind': 'conv', 'maps': 64, 'kernel': 3},
            {'kind': 'full', 'units': 2048},
            {'kind': 'full', 'units': 2048},
            {'kind': 'full', 'units': 100, 'activation': 'identity'},
        ],
        'loss': 'softmax-cross-entropy',
    },
}
PRESETS['scale3-mini'] = {
    **PRESETS['scale2-mini'],
    'layers': PRESETS['scale2-mini']['layers'][:-1] + [{'kind': 'full', 'units': 1000, 'activation': 'identity'}],
}

SCALES = {1: 'scale1-analog', 2: 'scale2-mini', 3: 'scale3-mini'}


def preset_name(scale) -> str:
    """
    Resolve a scale number (1..3) or preset name.

    Raises:
        ConfigError: For an unknown scale
    """
    if isinstance(scale, str) and scale in PRESETS:
        return scale
    try:
        return SCALES[int(scale)]
    except (KeyError, ValueError, TypeError):
        raise ConfigError(f"Unknown scale {scale!r}; expected 1, 2, 3 or one of {sorted(PRESETS)}") from None


def preset_spec(scale, seed: int = 0) -> NetworkSpec:
    """NetworkSpec of a bench preset."""
    return spec_from_dict({**PRESETS[preset_name(scale)], 'seed': seed})


# ============================================================================
# Scenario and report
# ============================================================================

@dataclass(frozen=True)
class BenchScenario:
    """
    One bench cell.

    Attributes:
        scale (str): Preset name
        variant (VariantId): Ladder variant
        batch (int): Batch size
        mode (str): 'train' (forward + backward) or 'test' (forward)
        reps (int): Timed repetitions, >= 3
        warmup (int): Untimed passes, >= 1
        timeout (Optional[float]): Seconds per cell, None for unlimited
        seed (int): Data and initialization seed
        precision (str): 'f32' or 'f64'
    """
    scale: str
    variant: VariantId
    batch: int
    mode: str = 'train'
    reps: int = 3
    warmup: int = 1
    timeout: Optional[float] = 120.0
    seed: int = 0
    precision: str = 'f32'

    def __post_init__(self):
        preset_name(self.scale)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.reps < 3:
            raise ConfigError(f"reps must be >= 3, got {self.reps}")
        if self.warmup < 1:
            raise ConfigError(f"warmup must be >= 1, got {self.warmup}")


@dataclass
class BenchReport:
    """
    Result of one bench cell.

    Attributes:
        images_per_sec (Optional[float]): None when the cell is not available
        component_seconds (Dict[str, float]): Median-pass seconds per component
        wall_seconds (Optional[float]): Median wall time of one pass
        images (int): Images per pass
        reason (Optional[str]): Why the cell is not available
        network (str): Label of the measured network
    """
    scale: str
    variant: str
    mode: str
    batch: int
    reps: int
    warmup: int
    images_per_sec: Optional[float] = None
    component_seconds: Dict[str, float] = field(default_factory=dict)
    wall_seconds: Optional[float] = None
    images: int = 0
    reason: Optional[str] = None
    network: str = ''
    started_at: str = ''
    finished_at: str = ''
    environment: Dict[str, Any] = field(default_factory=dict)

    @property
    def available(self) -> bool:
        return self.images_per_sec is not None

    @property
    def fractions(self) -> Dict[str, float]:
        """Share of timed component time per component (sums to 1 when anything was timed)."""
        total = sum(self.component_seconds.get(key, 0.0) for key in COMPONENT_FIELDS)
        if total <= 0:
            return {key: 0.0 for key in COMPONENT_FIELDS}
        return {key: self.component_seconds.get(key, 0.0) / total for key in COMPONENT_FIELDS}


def throughput(images: int, seconds: float) -> float:
    """
    Images per second.

    Raises:
        BenchmarkError: If no images were processed or the time is not positive
    """
    if images <= 0:
        raise BenchmarkError(f"Cannot compute throughput: {images} images processed")
    if not seconds > 0:
        raise BenchmarkError(f"Cannot compute throughput: non-positive wall time {seconds}")
    return images / seconds


def environment_note(precision: str = 'f32') -> Dict[str, Any]:
    """Interpreter, numpy, platform and pinned-thread details recorded with every report."""
    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'platform': platform.platform(),
        'machine': platform.machine(),
        'threads': os.environ.get('OMP_NUM_THREADS') or os.environ.get('VCNN_THREADS') or str(os.cpu_count()),
        'precision': precision,
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _bench_data(spec: NetworkSpec, batch: int, seed: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    images = rng.random((batch, *spec.input_shape)).astype(dtype)
    outputs = infer_shapes(spec)[-1]
    if spec.loss == 'softmax-cross-entropy':
        targets = rng.integers(0, int(np.prod(outputs)), size=batch)
    else:
        targets = rng.random((batch, *outputs)).astype(dtype)
    return images, targets


def measure_cell(scenario: BenchScenario, spec: Optional[NetworkSpec] = None, network: str = '') -> BenchReport:
    """
    Time one scenario.

    Raises:
        DeadlineExceededError: When the scenario's budget runs out
        BenchmarkError: If no images were processed
    """
    spec = spec or preset_spec(scenario.scale, scenario.seed)
    dtype = Precision.parse(scenario.precision).dtype
    net: Network = build_network(spec, dtype)
    images, targets = _bench_data(spec, scenario.batch, scenario.seed, dtype)

    timer = ComponentTimer()
    deadline = Deadline(scenario.timeout)
    executor = make_executor(scenario.variant, timer=timer, deadline=deadline)
    labels = targets if scenario.mode == 'train' else None

    started_at = _now()
    for _ in range(scenario.warmup):
        run_batch(executor, net, images, labels)

    timer.reset()
    walls = []
    for _ in range(scenario.reps):
        started = time.perf_counter()
        run_batch(executor, net, images, labels)
        walls.append(time.perf_counter() - started)

    wall = statistics.median(walls)
    component_seconds = {key: value / scenario.reps for key, value in timer.totals().items()}
    report = BenchReport(
        scale=scenario.scale, variant=scenario.variant.value, mode=scenario.mode, batch=scenario.batch,
        reps=scenario.reps, warmup=scenario.warmup, images_per_sec=throughput(scenario.batch, wall),
        component_seconds=component_seconds, wall_seconds=wall, images=scenario.batch, network=network,
        started_at=started_at, finished_at=_now(), environment=environment_note(scenario.precision),
    )
    logger.info("Cell measured", extra={'scale': report.scale, 'variant': report.variant, 'mode': report.mode,
                                         'batch': report.batch, 'images_per_sec': report.images_per_sec})
    return report


def _unavailable(scenario: BenchScenario, reason: str, network: str = '') -> BenchReport:
    now = _now()
    return BenchReport(scale=scenario.scale, variant=scenario.variant.value, mode=scenario.mode,
                       batch=scenario.batch, reps=scenario.reps, warmup=scenario.warmup, reason=reason,
                       network=network, started_at=now, finished_at=now,
                       environment=environment_note(scenario.precision))


def _guarded(scenario: BenchScenario, breaker: Optional[SlowVariantBreaker] = None,
             spec: Optional[NetworkSpec] = None, network: str = '') -> BenchReport:
    key = f"{network}:{scenario.variant.value}"
    if breaker is not None and breaker.is_open(key, scenario.mode):
        return _unavailable(scenario, 'skipped', network)
    context = {'scale': scenario.scale, 'variant': scenario.variant.value, 'mode': scenario.mode,
               'batch': scenario.batch}
    outcome: CellOutcome = guard_cell(measure_cell, scenario, spec, network, context=context)
    if breaker is not None:
        breaker.record(key, scenario.mode, outcome)
    return outcome.value if outcome.available else _unavailable(scenario, outcome.reason, network)


# ============================================================================
# Runs
# ============================================================================

def run_ladder(scale, batch: int, mode: str = 'train', variants: Optional[Sequence] = None, reps: int = 3,
               warmup: int = 1, timeout: Optional[float] = 120.0, seed: int = 0,
               precision: str = 'f32') -> List[BenchReport]:
    """
    One report per variant at a fixed batch size, sorted by variant.

    Variants that exceed the timeout are reported as not available.
    """
    chosen = sorted({VariantId.parse(v) if not isinstance(v, VariantId) else v for v in (variants or VariantId)},
                    key=lambda v: v.value)
    name = preset_name(scale)
    return [_guarded(BenchScenario(name, variant, batch, mode, reps, warmup, timeout, seed, precision))
            for variant in chosen]


def _check_batches(batches: Sequence[int]) -> List[int]:
    batches = [int(b) for b in batches]
    if not batches:
        raise ConfigError("At least one batch size is required")
    if any(b >= a for b, a in zip(batches, batches[1:])) or batches[0] < 1:
        raise ConfigError(f"Batch sizes must be positive and strictly increasing, got {batches}")
    return batches


def run_sweep(scale, batches: Sequence[int], mode: str = 'train', variant='imp6', reps: int = 3,
              warmup: int = 1, timeout: Optional[float] = 120.0, seed: int = 0, precision: str = 'f32',
              spec: Optional[NetworkSpec] = None, network: str = '',
              breaker: Optional[SlowVariantBreaker] = None) -> List[BenchReport]:
    """
    One report per batch size for one variant.

    Once a cell is not available (timeout or out of memory), the larger batch
    sizes are reported as skipped without being run.

    Raises:
        ConfigError: If batches are not strictly increasing
    """
    batches = _check_batches(batches)
    name = preset_name(scale)
    variant = variant if isinstance(variant, VariantId) else VariantId.parse(variant)
    breaker = breaker or SlowVariantBreaker()
    return [_guarded(BenchScenario(name, variant, batch, mode, reps, warmup, timeout, seed, precision),
                     breaker, spec, network)
            for batch in batches]


def run_breakdown(scale, batch: int, variant='imp6', reps: int = 3, warmup: int = 1,
                  timeout: Optional[float] = 120.0, seed: int = 0, precision: str = 'f32') -> BenchReport:
    """Training-mode cell with per-component times; see BenchReport.fractions."""
    variant = variant if isinstance(variant, VariantId) else VariantId.parse(variant)
    return _guarded(BenchScenario(preset_name(scale), variant, batch, 'train', reps, warmup, timeout, seed,
                                  precision))


def derive_network(scale, rng: np.random.Generator, seed: int = 0, attempts: int = 20) -> NetworkSpec:
    """
    Randomly adjusted copy of a preset: filter sizes, feature-map counts, output
    units and the hidden nonlinearity (ReLU or sigmoid) are varied.
    """
    base = PRESETS[preset_name(scale)]
    for _ in range(attempts):
        activation = str(rng.choice(['relu', 'sigmoid']))
        layers = []
        for index, layer in enumerate(base['layers']):
            entry = dict(layer)
            if entry['kind'] == 'conv':
                entry['maps'] = max(1, int(round(entry['maps'] * rng.choice([0.5, 1.0, 1.5]))))
                entry['kernel'] = max(1, int(entry['kernel'] + rng.choice([-2, 0, 2])))
                entry['activation'] = activation
            elif entry['kind'] == 'full':
                if index == len(base['layers']) - 1:
                    entry['units'] = max(2, int(entry['units'] * rng.choice([0.5, 1.0, 2.0])))
                else:
                    entry['activation'] = activation
            layers.append(entry)
        try:
            return spec_from_dict({**base, 'layers': layers, 'seed': seed})
        except ValueError:
            continue
    return preset_spec(scale, seed)


def run_network_sweep(scale, n_networks: int, batches: Sequence[int], mode: str = 'train', seed: int = 0,
                      variant='imp6', reps: int = 3, warmup: int = 1, timeout: Optional[float] = 120.0,
                      precision: str = 'f32') -> List[BenchReport]:
    """Batch sweeps over `n_networks` randomly derived networks, tagged 'net0', 'net1', ..."""
    batches = _check_batches(batches)
    rng = np.random.default_rng(seed)
    reports: List[BenchReport] = []
    breaker = SlowVariantBreaker()
    for index in range(n_networks):
        spec = derive_network(scale, rng, seed)
        label = f"net{index}"
        logger.debug("Derived network %s: %s", label, json.dumps(spec_to_dict(spec)))
        reports.extend(run_sweep(scale, batches, mode, variant, reps, warmup, timeout, seed, precision,
                                 spec=spec, network=label, breaker=breaker))
    return reports


def optimal_batch(reports: Sequence[BenchReport]) -> Dict[Tuple[str, str, str], int]:
    """Batch size with the highest throughput per (network, variant, mode); n/a cells ignored."""
    best: Dict[Tuple[str, str, str], BenchReport] = {}
    for report in reports:
        if not report.available:
            continue
        key = (report.network or report.scale, report.variant, report.mode)
        if key not in best or report.images_per_sec > best[key].images_per_sec:
            best[key] = report
    return {key: report.batch for key, report in best.items()}


def speedup_table(reports: Sequence[BenchReport]) -> List[Dict[str, Any]]:
    """
    Throughput of each variant relative to the least vectorized available
    variant measured under the same scale, mode and batch.
    """
    groups: Dict[Tuple[str, str, int], List[BenchReport]] = {}
    for report in reports:
        groups.setdefault((report.scale, report.mode, report.batch), []).append(report)
    rows = []
    for (scale, mode, batch), members in groups.items():
        available = sorted((r for r in members if r.available), key=lambda r: r.variant)
        baseline = available[0] if available else None
        for report in sorted(members, key=lambda r: r.variant):
            speedup = None
            if report.available and baseline is not None:
                speedup = report.images_per_sec / baseline.images_per_sec
            rows.append({'scale': scale, 'mode': mode, 'batch': batch, 'variant': report.variant,
                         'images_per_sec': report.images_per_sec,
                         'baseline': baseline.variant if baseline else None, 'speedup': speedup})
    return rows


# ============================================================================
# Output
# ============================================================================

def report_row(report: BenchReport) -> Dict[str, Any]:
    """CSV row: component columns hold fractions of the timed component total."""
    row = {'scale': report.scale, 'variant': report.variant, 'mode': report.mode, 'batch': report.batch,
           'reps': report.reps, 'warmup': report.warmup}
    if report.available:
        row['images_per_sec'] = f"{report.images_per_sec:.4f}"
        row.update({key: f"{value:.6f}" for key, value in report.fractions.items()})
    else:
        row['images_per_sec'] = NOT_AVAILABLE
        row.update({key: '' for key in COMPONENT_FIELDS})
    return row


def reports_to_csv(reports: Sequence[BenchReport]) -> str:
    """CSV text with the fixed bench columns."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_FIELDS, lineterminator='\n')
    writer.writeheader()
    for report in reports:
        writer.writerow(report_row(report))
    return buffer.getvalue()


def reports_to_json(reports: Sequence[BenchReport]) -> str:
    """JSON document with the same fields plus timings, timestamps and environment."""
    entries = []
    for report in reports:
        entry = {key: value for key, value in report_row(report).items() if key not in COMPONENT_FIELDS}
        entry['images_per_sec'] = report.images_per_sec
        entry.update(report.fractions if report.available else {key: None for key in COMPONENT_FIELDS})
        details = asdict(report)
        for key in ('network', 'reason', 'wall_seconds', 'images', 'component_seconds', 'started_at',
                    'finished_at', 'environment'):
            entry[key] = details[key]
        entries.append(entry)
    document = {
        'schema': SCHEMA_VERSION,
        'generated_at': _now(),
        'environment': environment_note(reports[0].environment.get('precision', 'f32')) if reports else {},
        'reports': entries,
    }
    return json.dumps(document, indent=2, sort_keys=False)


def write_reports(reports: Sequence[BenchReport], path: str, fmt: str = 'csv') -> str:
    """Write reports atomically as CSV or JSON; returns the written path."""
    if fmt not in ('csv', 'json'):
        raise ConfigError(f"Unknown report format {fmt!r}; expected csv or json")
    text = reports_to_csv(reports) if fmt == 'csv' else reports_to_json(reports)
    atomic_write(path, text)
    logger.info("Wrote %d reports", len(reports), extra={'path': str(path)})
    return str(path)
