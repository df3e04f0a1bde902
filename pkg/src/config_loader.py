"""
Configuration Loader Module

This module handles loading and validating configuration. Process-wide settings
come from environment variables (optionally seeded from a .env file); per-run
settings come from a flat JSON run document passed with --config.

Data Flow:
    .env + Environment Variables → ConfigLoader.load() → Config → vcnn, bench_runner
    run.json → ConfigLoader.load_run_config() → RunConfig → network, denoise

This module must not import numpy at module level: pin_threads() has to run
before the first numpy import for the thread count to reach the BLAS library.

Invoked by: vcnn, bench_runner, variants
Invokes: network (lazily, to build specs from run documents)
"""

import os
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from src.error_handler import ConfigError

logger = logging.getLogger(__name__)

# Environment variables that control BLAS/OpenMP worker threads
THREAD_ENV_VARS = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS',
                   'VECLIB_MAXIMUM_THREADS', 'NUMEXPR_NUM_THREADS')

VALID_LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
VALID_PRECISIONS = ['f32', 'f64']

# Keys accepted in a run document; anything else is rejected
RUN_CONFIG_KEYS = {
    'learning_rate', 'momentum', 'batch_size', 'epochs', 'precision', 'seed',
    'input_shape', 'loss', 'layers', 'preset', 'sigma', 'train_samples', 'test_samples',
}


@dataclass
class Config:
    """
    Process-wide settings.

    Attributes:
        log_level       -> (str)           -> Logging level
        log_dir         -> (str)           -> Directory for vcnn.log
        threads         -> (int)           -> Pinned primitive parallelism (BLAS + Imp-2 workers)
        bench_timeout   -> (float)         -> Per-cell bench budget in seconds
        data_dir        -> (Optional[str]) -> MNIST-format data directory
        precision       -> (str)           -> Default precision tag (f32|f64)
    """
    log_level: str = 'INFO'
    log_dir: str = './logs'
    threads: int = 1
    bench_timeout: float = 120.0
    data_dir: Optional[str] = None
    precision: str = 'f64'


@dataclass
class RunConfig:
    """
    Parsed run document.

    Attributes:
        train         -> (Dict[str, Any]) -> TrainConfig fields present in the document
        network       -> (Optional[Dict]) -> NetworkSpec dict (input_shape, loss, layers, seed)
        preset        -> (Optional[str])  -> Named network preset instead of explicit layers
        extras        -> (Dict[str, Any]) -> Task-specific keys (sigma, sample counts)
        source        -> (str)            -> Path the document was read from
    """
    train: Dict[str, Any] = field(default_factory=dict)
    network: Optional[Dict[str, Any]] = None
    preset: Optional[str] = None
    extras: Dict[str, Any] = field(default_factory=dict)
    source: str = ''


class ConfigLoader:
    """
    Configuration loader and validator.

    Usage:
        ConfigLoader.pin_threads()
        config = ConfigLoader.load()
        run = ConfigLoader.load_run_config('run.json')
    """

    @staticmethod
    def _parse_threads(raw: Optional[str]) -> int:
        """Parse VCNN_THREADS, defaulting to the CPU count."""
        if raw is None or raw.strip() == '':
            return os.cpu_count() or 1
        try:
            threads = int(raw)
        except ValueError as error:
            raise ValueError(f"Invalid VCNN_THREADS: {raw!r}. Must be a positive integer") from error
        if threads < 1:
            raise ValueError(f"Invalid VCNN_THREADS: {threads}. Must be a positive integer")
        return threads

    @staticmethod
    def pin_threads(env_file: Optional[str] = None) -> int:
        """
        Export the pinned thread count to the BLAS/OpenMP environment.

        Must be called before numpy is imported. Variables that are already set
        explicitly are left alone.

        Args:
            env_file: Optional .env file to read first

        Returns:
            int: The pinned thread count
        """
        load_dotenv(env_file, override=False)
        threads = ConfigLoader._parse_threads(os.getenv('VCNN_THREADS'))
        for name in THREAD_ENV_VARS:
            os.environ.setdefault(name, str(threads))
        return threads

    @staticmethod
    def load(env_file: Optional[str] = None) -> Config:
        """
        Load configuration from environment variables.

        Args:
            env_file: Optional .env file path (default: search from cwd)

        Returns:
            Config: Configuration object with all settings

        Raises:
            ValueError: If a variable holds an invalid value

        Environment Variables:
            VCNN_LOG_LEVEL: Logging level (default: INFO)
            VCNN_LOG_DIR: Log directory (default: ./logs)
            VCNN_THREADS: Primitive parallelism (default: CPU count)
            VCNN_BENCH_TIMEOUT: Seconds per bench cell (default: 120)
            VCNN_DATA_DIR: MNIST-format data directory (optional)
            VCNN_PRECISION: f32 or f64 (default: f64)
        """
        load_dotenv(env_file, override=False)

        log_level = os.getenv('VCNN_LOG_LEVEL', 'INFO').upper()
        if log_level not in VALID_LOG_LEVELS:
            raise ValueError(f"Invalid VCNN_LOG_LEVEL: {log_level}. Must be one of {VALID_LOG_LEVELS}")

        threads = ConfigLoader._parse_threads(os.getenv('VCNN_THREADS'))

        timeout_str = os.getenv('VCNN_BENCH_TIMEOUT', '120')
        try:
            bench_timeout = float(timeout_str)
        except ValueError as error:
            raise ValueError(f"Invalid VCNN_BENCH_TIMEOUT: {timeout_str!r}") from error
        if not 1 <= bench_timeout <= 86400:
            raise ValueError(
                f"Invalid VCNN_BENCH_TIMEOUT: {bench_timeout}. Must be between 1 and 86400 seconds"
            )

        precision = os.getenv('VCNN_PRECISION', 'f64').lower()
        if precision not in VALID_PRECISIONS:
            raise ValueError(f"Invalid VCNN_PRECISION: {precision}. Must be one of {VALID_PRECISIONS}")

        data_dir = os.getenv('VCNN_DATA_DIR') or None

        return Config(
            log_level=log_level,
            log_dir=os.getenv('VCNN_LOG_DIR', './logs'),
            threads=threads,
            bench_timeout=bench_timeout,
            data_dir=data_dir,
            precision=precision,
        )

    @staticmethod
    def load_run_config(path: str) -> RunConfig:
        """
        Load a flat JSON run document.

        Args:
            path: Path to the JSON document

        Returns:
            RunConfig: Split into training, network and task-specific parts

        Raises:
            ConfigError: Missing file, malformed JSON, unknown keys or bad types
        """
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"Config file not found: {path}")

        try:
            document = json.loads(config_path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as error:
            raise ConfigError(f"Malformed JSON in {path}: {error}") from error

        if not isinstance(document, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")

        unknown = sorted(set(document) - RUN_CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"Unknown config key(s) in {path}: {', '.join(unknown)}")

        train_keys = ('learning_rate', 'momentum', 'batch_size', 'epochs', 'precision', 'seed')
        train = {key: document[key] for key in train_keys if key in document}
        if 'precision' in train and train['precision'] not in VALID_PRECISIONS:
            raise ConfigError(f"Invalid precision {train['precision']!r} in {path}")

        network = None
        if 'layers' in document:
            if 'preset' in document:
                raise ConfigError(f"{path}: 'layers' and 'preset' are mutually exclusive")
            network = {
                'layers': document['layers'],
                'input_shape': document.get('input_shape'),
                'loss': document.get('loss', 'softmax-cross-entropy'),
                'seed': document.get('seed', 0),
            }
            if network['input_shape'] is None:
                raise ConfigError(f"{path}: 'input_shape' is required with 'layers'")
            # Validates structure early, raising SpecError/ConfigError with the key name
            from src.network import spec_from_dict  # pylint: disable=import-outside-toplevel
            spec_from_dict(network)

        extras = {key: document[key] for key in ('sigma', 'train_samples', 'test_samples') if key in document}

        logger.info("Loaded run config", extra={'path': str(config_path)})
        return RunConfig(train=train, network=network, preset=document.get('preset'),
                         extras=extras, source=str(config_path))

    @staticmethod
    def describe(config: Config) -> List[List[str]]:
        """Rows of (setting, value) for display."""
        return [
            ['log_level', config.log_level],
            ['log_dir', config.log_dir],
            ['threads', str(config.threads)],
            ['bench_timeout', f"{config.bench_timeout:g}s"],
            ['data_dir', config.data_dir or '-'],
            ['precision', config.precision],
        ]
