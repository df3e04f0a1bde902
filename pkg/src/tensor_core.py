"""
Tensor Core Module

Dense tensor conventions and the three primitive operator families every
vectorized operation in this package reduces to: matrix product, element-wise
map and indexed accumulation.

Layout:
    A Tensor is a numpy array with up to 4 axes ordered (batch, channels, height,
    width). Its C-order linear index is therefore row-major within an image
    plane, then channels, then batch outermost:

        linear(b, c, y, x) = ((b * C + c) * H + y) * W + x

    Every index map in this package is expressed against that order.

Invoked by: vectorize_ops, layers, network, variants
Invokes: error_handler
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence, Tuple

import numpy as np

from src.error_handler import IndexBoundsError, ShapeError

# Type aliases: a Tensor is an ndarray of 1..4 axes (N, C, H, W); a Matrix is 2-D.
Tensor = np.ndarray
Matrix = np.ndarray
Vector = np.ndarray

MAX_AXES = 4


class Precision(Enum):
    """Precision tag: double for correctness work, single for benchmark runs."""
    DOUBLE = 'f64'
    SINGLE = 'f32'

    @property
    def dtype(self) -> np.dtype:
        """numpy dtype for this precision."""
        return np.dtype(np.float64) if self is Precision.DOUBLE else np.dtype(np.float32)

    @classmethod
    def parse(cls, value) -> 'Precision':
        """Accept a Precision, 'f32'/'f64', 'single'/'double' or a numpy dtype."""
        if isinstance(value, Precision):
            return value
        aliases = {'f64': cls.DOUBLE, 'double': cls.DOUBLE, 'float64': cls.DOUBLE,
                   'f32': cls.SINGLE, 'single': cls.SINGLE, 'float32': cls.SINGLE}
        key = str(np.dtype(value)) if not isinstance(value, str) else value.lower()
        if key not in aliases:
            raise ValueError(f"Unknown precision: {value!r}")
        return aliases[key]


def as_tensor(data, precision=Precision.DOUBLE) -> Tensor:
    """
    Validate and convert data to a contiguous Tensor.

    Args:
        data: Array-like with 1..4 axes
        precision: Precision tag or alias

    Returns:
        Tensor: C-contiguous array of the requested dtype

    Raises:
        ShapeError: If the array has no axes, more than 4 axes, or an empty extent
    """
    dtype = Precision.parse(precision).dtype
    array = np.ascontiguousarray(data, dtype=dtype)
    if not 1 <= array.ndim <= MAX_AXES:
        raise ShapeError(f"Tensor must have 1..{MAX_AXES} axes, got shape {array.shape}", array.shape)
    if any(extent < 1 for extent in array.shape):
        raise ShapeError(f"Tensor extents must be >= 1, got shape {array.shape}", array.shape)
    return array


def to_nchw(t: Tensor) -> Tensor:
    """Promote an (H, W) or (C, H, W) tensor to (1, C, H, W); 4-D passes through."""
    if t.ndim == 2:
        return t.reshape(1, 1, *t.shape)
    if t.ndim == 3:
        return t.reshape(1, *t.shape)
    if t.ndim == 4:
        return t
    raise ShapeError(f"Expected an image tensor with 2..4 axes, got shape {t.shape}", t.shape)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Standard matrix product.

    The inner k-loop order is fixed by the BLAS kernel for a given shape and
    thread count, so repeated calls are bitwise reproducible.

    Raises:
        ShapeError: If a.cols != b.rows, naming both shapes
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got shapes {a.shape} and {b.shape}", a.shape, b.shape)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}", a.shape, b.shape)
    return a @ b


def map_elementwise(t: Tensor, fn: Callable) -> Tensor:
    """
    Apply fn independently to every element; the output keeps t's shape.

    numpy ufuncs and callables flagged with `vectorized = True` (the activation
    functions in layers) are applied to the whole array at once; any other
    scalar function goes through np.vectorize.
    """
    if isinstance(fn, np.ufunc) or getattr(fn, 'vectorized', False):
        out = np.asarray(fn(t), dtype=t.dtype)
    else:
        out = np.vectorize(fn, otypes=[t.dtype])(t)
    return out.reshape(t.shape)


def reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    """
    Change the shape without reordering elements (not a transpose).

    Raises:
        ShapeError: If the element counts differ
    """
    new_shape = tuple(int(extent) for extent in new_shape)
    if int(np.prod(new_shape)) != t.size:
        raise ShapeError(f"Cannot reshape {t.shape} to {new_shape}: size mismatch", t.shape, new_shape)
    return np.reshape(t, new_shape, order='C')


@dataclass(frozen=True, eq=False)
class IndexMap:
    """
    Many-to-one (or one-to-many) index mapping driving accumulation.

    Pair k sends values[source_index[k]] to bucket target_index[k].

    Attributes:
        source_index (np.ndarray): int64 source positions, length S
        target_index (np.ndarray): int64 bucket positions, length S
        target_len (int): Number of buckets
        source_len (int): Declared length of the source domain
        group_size (int): k > 0 when targets are laid out as contiguous runs of
            exactly k pairs in bucket order (target_index == repeat(arange(T), k));
            0 otherwise. Enables the reshape-and-reduce fast path.
    """
    source_index: np.ndarray
    target_index: np.ndarray
    target_len: int
    source_len: int
    group_size: int = 0

    def __post_init__(self):
        source = np.ascontiguousarray(self.source_index, dtype=np.int64).ravel()
        target = np.ascontiguousarray(self.target_index, dtype=np.int64).ravel()
        if source.shape != target.shape:
            raise ShapeError("IndexMap source and target lengths differ", source.shape, target.shape)
        if self.target_len < 1:
            raise IndexBoundsError(f"IndexMap target_len must be positive, got {self.target_len}")
        if source.size:
            if source.min() < 0 or source.max() >= self.source_len:
                raise IndexBoundsError(
                    f"IndexMap source index out of range [0, {self.source_len}): "
                    f"min={source.min()} max={source.max()}")
            if target.min() < 0 or target.max() >= self.target_len:
                raise IndexBoundsError(
                    f"IndexMap target index out of range [0, {self.target_len}): "
                    f"min={target.min()} max={target.max()}")
        source.setflags(write=False)
        target.setflags(write=False)
        object.__setattr__(self, 'source_index', source)
        object.__setattr__(self, 'target_index', target)
        if self.group_size:
            expected = np.repeat(np.arange(self.target_len, dtype=np.int64), self.group_size)
            if not np.array_equal(expected, target):
                raise ValueError("IndexMap group_size does not match the target layout")

    @property
    def size(self) -> int:
        """Number of (source, target) pairs."""
        return int(self.source_index.size)

    def has_unique_pairs(self) -> bool:
        """Check that no (source, target) pair repeats."""
        keys = self.source_index * self.target_len + self.target_index
        return np.unique(keys).size == keys.size

    def bucket_counts(self) -> np.ndarray:
        """Number of pairs per bucket."""
        return np.bincount(self.target_index, minlength=self.target_len)

    def transpose(self, group_size: int = 0) -> 'IndexMap':
        """Swap roles: targets become sources (used for scatter in backward passes)."""
        return IndexMap(self.target_index, self.source_index, self.source_len, self.target_len,
                        group_size=group_size)


REDUCERS = ('sum', 'max', 'mean')


def accumulate_by_index(values: Vector, index_map: IndexMap, reducer: str = 'sum') -> Vector:
    """
    Reduce values into buckets: out[t] = reducer{ values[s] : (s, t) in map }.

    Empty buckets yield 0 for every reducer. Summation follows pair order, so the
    result is deterministic.

    Args:
        values: 1-D array of length index_map.source_len
        index_map: Mapping to apply
        reducer: 'sum', 'max' or 'mean'

    Returns:
        Vector of length index_map.target_len, same dtype as values

    Raises:
        ShapeError: If values does not match the declared source domain
        ValueError: For an unknown reducer
    """
    if reducer not in REDUCERS:
        raise ValueError(f"Unknown reducer {reducer!r}; expected one of {REDUCERS}")
    values = np.asarray(values).ravel()
    if values.size != index_map.source_len:
        raise ShapeError(
            f"accumulate_by_index: values length {values.size} does not match source domain "
            f"{index_map.source_len}", values.shape, (index_map.source_len,))

    dtype = values.dtype if np.issubdtype(values.dtype, np.floating) else np.float64
    gathered = values[index_map.source_index]

    if index_map.group_size:
        grouped = gathered.reshape(index_map.target_len, index_map.group_size)
        if reducer == 'sum':
            return grouped.sum(axis=1, dtype=dtype)
        if reducer == 'mean':
            return grouped.mean(axis=1, dtype=dtype)
        return grouped.max(axis=1).astype(dtype, copy=False)

    if reducer in ('sum', 'mean'):
        out = np.bincount(index_map.target_index, weights=gathered,
                          minlength=index_map.target_len).astype(dtype, copy=False)
        if reducer == 'mean':
            counts = index_map.bucket_counts()
            out = np.divide(out, counts, out=np.zeros_like(out), where=counts > 0)
        return out

    out = np.full(index_map.target_len, -np.inf, dtype=dtype)
    np.maximum.at(out, index_map.target_index, gathered)
    out[np.isneginf(out)] = 0.0
    return out


def checksum(*arrays: np.ndarray) -> Tuple[int, ...]:
    """Hash of array contents, used to prove forward passes leave parameters untouched."""
    return tuple(hash(np.ascontiguousarray(a).tobytes()) for a in arrays)
