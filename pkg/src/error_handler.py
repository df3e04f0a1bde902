"""
Error Handler Module

This module defines the exception hierarchy shared by every VCNN module and the
guards the benchmark harness uses to turn slow or oversized cells into
"not available" entries instead of failed runs.

Data Flow:
    Bench cell → guard_cell() → [Run → Deadline/MemoryError → CellOutcome(n/a)] → Report

Invoked by: tensor_core, vectorize_ops, layers, network, variants, bench_runner,
            dataset_loader, storage_manager, denoise, vcnn
Invokes: None
"""

import time
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Set, Tuple

# Configure module logger
logger = logging.getLogger(__name__)


class VcnnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VcnnError, ValueError):
    """
    Raised when array shapes do not agree.

    Attributes:
        shapes (Tuple): The offending shapes, in argument order
    """

    def __init__(self, message: str, *shapes: Any):
        self.shapes = tuple(tuple(s) if s is not None else None for s in shapes)
        super().__init__(message)


class GeometryError(VcnnError, ValueError):
    """Raised when a kernel or pooling window does not fit its input."""


class IndexBoundsError(VcnnError, IndexError):
    """Raised when an index map points outside its declared domain."""


class ConfigError(VcnnError, ValueError):
    """Raised for missing, malformed or unknown configuration entries."""


class SpecError(VcnnError, ValueError):
    """Raised when a network spec is invalid for the requested use."""


class UsageError(VcnnError):
    """Raised for command-line usage mistakes (exit code 1)."""


class BenchmarkError(VcnnError):
    """Raised when a benchmark measurement cannot be computed."""


class ParseError(VcnnError, ValueError):
    """
    Raised when a binary file (IDX, PGM, model file) cannot be decoded.

    Attributes:
        offset (int): Byte offset where decoding failed
        path (Optional[str]): Source file, when known
    """

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")


class TrainingError(VcnnError):
    """
    Raised when training diverges.

    Attributes:
        layer_index (Optional[int]): Index of the first layer whose output is not finite
        layer_kind (Optional[str]): Kind of that layer ('conv', 'pool', 'full', 'loss')
    """

    def __init__(self, message: str, layer_index: Optional[int] = None,
                 layer_kind: Optional[str] = None):
        self.layer_index = layer_index
        self.layer_kind = layer_kind
        if layer_index is not None:
            message = f"{message} (layer {layer_index}: {layer_kind})"
        super().__init__(message)


class DeadlineExceededError(VcnnError):
    """
    Raised when a cooperative deadline expires.

    Attributes:
        budget (float): Budget in seconds
        elapsed (float): Seconds elapsed when the check failed
    """

    def __init__(self, budget: float, elapsed: float):
        self.budget = budget
        self.elapsed = elapsed
        super().__init__(f"Deadline of {budget:.1f}s exceeded after {elapsed:.1f}s")


class Deadline:
    """
    Cooperative wall-clock budget.

    Long-running loops call check() at natural boundaries (between samples or
    layers). Python threads cannot be interrupted safely, so the budget is only
    enforced at those points.

    Attributes:
        budget (Optional[float]): Seconds allowed, None for unlimited
        started (float): Monotonic start time
    """

    def __init__(self, budget: Optional[float]):
        self.budget = budget
        self.started = time.perf_counter()

    def elapsed(self) -> float:
        """Seconds since the deadline was created."""
        return time.perf_counter() - self.started

    def expired(self) -> bool:
        """Return True when the budget is spent."""
        return self.budget is not None and self.elapsed() > self.budget

    def check(self):
        """
        Raise DeadlineExceededError when the budget is spent.

        Raises:
            DeadlineExceededError: If elapsed time exceeds the budget
        """
        if self.expired():
            raise DeadlineExceededError(self.budget, self.elapsed())


@dataclass
class CellOutcome:
    """
    Result of a guarded bench cell.

    Attributes:
        value (Any): Return value of the cell, None when not available
        available (bool): False when the cell timed out or ran out of memory
        reason (Optional[str]): 'timeout' or 'out-of-memory' when not available
    """
    value: Any = None
    available: bool = True
    reason: Optional[str] = None


def guard_cell(func: Callable, *args, context: Optional[Dict[str, Any]] = None, **kwargs) -> CellOutcome:
    """
    Run one bench cell, converting timeouts and memory exhaustion into n/a.

    Args:
        func (Callable): Cell function
        *args: Positional arguments for func
        context (Optional[Dict]): Logging extras (variant, scale, batch, ...)
        **kwargs: Keyword arguments for func

    Returns:
        CellOutcome: Value on success, unavailable marker otherwise

    Example:
        outcome = guard_cell(measure, scenario, context={'variant': 'imp1'})
        if not outcome.available:
            print(outcome.reason)
    """
    extra = dict(context or {})
    try:
        return CellOutcome(value=func(*args, **kwargs))
    except DeadlineExceededError as error:
        extra['error_type'] = 'timeout'
        logger.warning("Cell marked n/a: %s", error, extra=extra)
        return CellOutcome(available=False, reason='timeout')
    except MemoryError:
        extra['error_type'] = 'out-of-memory'
        logger.warning("Cell marked n/a: out of memory", extra=extra)
        return CellOutcome(available=False, reason='out-of-memory')


class SlowVariantBreaker:
    """
    Skip cells for variants that already proved too slow.

    A sweep over increasing batch sizes trips the breaker for a variant the first
    time one of its cells is not available; later cells for that variant are
    reported as n/a without being run.
    """

    def __init__(self):
        self._tripped: Set[Tuple[str, str]] = set()

    def is_open(self, variant: str, mode: str) -> bool:
        """Return True if cells for (variant, mode) should be skipped."""
        return (variant, mode) in self._tripped

    def record(self, variant: str, mode: str, outcome: CellOutcome):
        """Trip the breaker when a cell was not available."""
        if not outcome.available and (variant, mode) not in self._tripped:
            self._tripped.add((variant, mode))
            logger.info("Skipping remaining %s cells for %s", mode, variant,
                        extra={'variant': variant, 'mode': mode})
