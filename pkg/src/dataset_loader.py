"""
Dataset Loader Module

Reads MNIST-format IDX files and binary PGM images, and synthesizes the data
sets used when no real data is available: separable digit-like patterns for
classification and piecewise-smooth images with their noisy copies for the
denoise task.

IDX (big-endian):
    u8 0, u8 0, u8 type (0x08 = unsigned byte), u8 ndim
    u32 * ndim dimensions
    raw data

    Supported magics: 0x00000801 (labels) and 0x00000803 (images).

PGM: binary P5 with maxval 1..255; '#' comments are allowed in the header.

Data Flow:
    train-images-idx3-ubyte + train-labels-idx1-ubyte → load_idx() → Dataset (pixels / 255)
    clean images + sigma + seed → synth_denoise_pairs() → Dataset (noisy → clean)

Invoked by: bench_runner, denoise, selftest, vcnn
Invokes: storage_manager (atomic writes), error_handler
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from src.error_handler import ParseError, ShapeError
from src.storage_manager import atomic_write

# Configure module logger
logger = logging.getLogger(__name__)

IDX_UBYTE = 0x08
IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
IDX_MAX_BYTES = 1 << 32

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}

PGM_WHITESPACE = b' \t\r\n\x0b\x0c'


@dataclass
class Dataset:
    """
    Images with class labels or target images.

    Attributes:
        images (np.ndarray): (N, C, H, W) pixels in [0, 1]
        labels (np.ndarray): (N,) class indices, or (N, C', H', W') target images
        split (str): Tag such as 'train', 'test' or 'denoise'
    """
    images: np.ndarray
    labels: np.ndarray
    split: str = 'train'

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels",
                             self.images.shape, self.labels.shape)
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("Dataset pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, count: int) -> 'Dataset':
        """First `count` samples."""
        return Dataset(self.images[:count], self.labels[:count], self.split)


# ============================================================================
# IDX
# ============================================================================

def parse_idx(data: bytes, path: Optional[str] = None) -> np.ndarray:
    """
    Decode IDX bytes into a uint8 array.

    Raises:
        ParseError: Bad magic, unsupported type, dimension overflow or a payload
            that does not match the declared dimensions
    """
    if len(data) < 4:
        raise ParseError(f"Truncated IDX header: expected 4 bytes, got {len(data)}", 0, path)
    zero1, zero2, dtype_code, ndim = data[0], data[1], data[2], data[3]
    magic = struct.unpack('>I', data[:4])[0]
    if zero1 or zero2:
        raise ParseError(f"Bad IDX magic {magic:#010x}", 0, path)
    if dtype_code != IDX_UBYTE:
        raise ParseError(f"Unsupported IDX element type {dtype_code:#04x} (only unsigned byte)", 2, path)
    if magic not in (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC):
        raise ParseError(f"Unsupported IDX magic {magic:#010x}; expected 0x00000801 or 0x00000803", 3, path)

    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise ParseError(f"Truncated IDX header: expected {header_len} bytes, got {len(data)}", 4, path)
    dims = struct.unpack(f'>{ndim}I', data[4:header_len])

    expected = 1
    for axis, extent in enumerate(dims):
        expected *= extent
        if expected > IDX_MAX_BYTES:
            raise ParseError(f"IDX dimension overflow: {dims} exceeds {IDX_MAX_BYTES} bytes", 4 + 4 * axis, path)

    actual = len(data) - header_len
    if actual != expected:
        kind = 'Truncated' if actual < expected else 'Oversized'
        raise ParseError(f"{kind} IDX payload: expected {expected} bytes, got {actual}", header_len, path)
    return np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims).copy()


def read_idx(path: Union[str, Path]) -> np.ndarray:
    """Read an IDX file into a uint8 array."""
    source = Path(path)
    return parse_idx(source.read_bytes(), str(source))


def write_idx(path: Union[str, Path], array: np.ndarray) -> Path:
    """Write a uint8 array with 1 or 3 axes as an IDX file."""
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise ShapeError(f"IDX writer takes uint8 arrays with 1 or 3 axes, got {array.dtype} {array.shape}",
                         array.shape)
    header = bytes([0, 0, IDX_UBYTE, array.ndim]) + struct.pack(f'>{array.ndim}I', *array.shape)
    return atomic_write(path, header + np.ascontiguousarray(array).tobytes())


def load_idx(images_path: Union[str, Path], labels_path: Optional[Union[str, Path]] = None,
             split: str = 'train') -> Dataset:
    """
    Load an IDX image file (and optionally its label file) as a Dataset.

    Pixels are scaled by 1/255. Without a label file every label is 0.

    Raises:
        ParseError: For malformed files or an image/label count mismatch
    """
    images = read_idx(images_path)
    if images.ndim != 3:
        raise ParseError(f"Expected an image file (3 dimensions), got {images.ndim}", 3, str(images_path))
    pixels = images.astype(np.float64)[:, None, :, :] / 255.0

    if labels_path is None:
        labels = np.zeros(images.shape[0], dtype=np.int64)
    else:
        raw = read_idx(labels_path)
        if raw.ndim != 1:
            raise ParseError(f"Expected a label file (1 dimension), got {raw.ndim}", 3, str(labels_path))
        if raw.shape[0] != images.shape[0]:
            raise ParseError(f"{raw.shape[0]} labels for {images.shape[0]} images", 4, str(labels_path))
        labels = raw.astype(np.int64)

    logger.info("Loaded IDX data", extra={'path': str(images_path), 'batch': int(images.shape[0])})
    return Dataset(pixels, labels, split)


def load_mnist(data_dir: Union[str, Path]) -> Tuple[Dataset, Dataset]:
    """
    Load the standard train and test files from a directory.

    Raises:
        FileNotFoundError: Naming the first missing file
    """
    directory = Path(data_dir)
    splits = []
    for split in ('train', 'test'):
        images_name, labels_name = MNIST_FILES[split]
        for name in (images_name, labels_name):
            if not (directory / name).is_file():
                raise FileNotFoundError(f"MNIST file not found: {directory / name}")
        splits.append(load_idx(directory / images_name, directory / labels_name, split))
    return splits[0], splits[1]


# ============================================================================
# PGM
# ============================================================================

def _pgm_token(data: bytes, offset: int, path: Optional[str]) -> Tuple[bytes, int]:
    """Next header token and the offset just past it."""
    while True:
        while offset < len(data) and data[offset] in PGM_WHITESPACE:
            offset += 1
        if offset < len(data) and data[offset] == ord('#'):
            while offset < len(data) and data[offset] not in b'\r\n':
                offset += 1
            continue
        break
    start = offset
    while offset < len(data) and data[offset] not in PGM_WHITESPACE and data[offset] != ord('#'):
        offset += 1
    if start == offset:
        raise ParseError("Truncated PGM header", start, path)
    return data[start:offset], offset


def parse_pgm(data: bytes, path: Optional[str] = None) -> np.ndarray:
    """
    Decode binary PGM bytes into an (H, W) float image in [0, 1].

    Raises:
        ParseError: Wrong magic, bad header fields or truncated raster
    """
    if data[:2] != b'P5':
        raise ParseError(f"Bad PGM magic {data[:2]!r}, expected b'P5'", 0, path)
    offset = 2
    fields = []
    for name in ('width', 'height', 'maxval'):
        token, end = _pgm_token(data, offset, path)
        if not token.isdigit():
            raise ParseError(f"PGM {name} is not a number: {token!r}", offset, path)
        fields.append(int(token))
        offset = end
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError(f"PGM size must be positive, got {width}x{height}", offset, path)
    if not 1 <= maxval <= 255:
        raise ParseError(f"PGM maxval must be 1..255, got {maxval}", offset, path)
    if offset >= len(data) or data[offset] not in PGM_WHITESPACE:
        raise ParseError("Missing whitespace after PGM header", offset, path)
    offset += 1

    expected = width * height
    actual = len(data) - offset
    if actual < expected:
        raise ParseError(f"Truncated PGM raster: expected {expected} bytes, got {actual}", offset, path)
    raster = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset).reshape(height, width)
    if raster.max(initial=0) > maxval:
        raise ParseError(f"PGM sample exceeds maxval {maxval}", offset, path)
    return raster.astype(np.float64) / maxval


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary PGM file as an (H, W) float image in [0, 1]."""
    source = Path(path)
    return parse_pgm(source.read_bytes(), str(source))


def write_pgm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Write an (H, W) image in [0, 1] (values clipped) as an 8-bit binary PGM."""
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0, 0]
    elif image.ndim == 3:
        image = image[0]
    if image.ndim != 2:
        raise ShapeError(f"PGM writer takes a single-channel image, got shape {image.shape}", image.shape)
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode('ascii')
    return atomic_write(path, header + pixels.tobytes())


# ============================================================================
# Synthetic data
# ============================================================================

def _digit_templates(size: int) -> np.ndarray:
    # Class k lights one cell of a 2 x 5 grid plus a class-specific stripe
    templates = np.zeros((10, size, size))
    cell_h, cell_w = size // 2, size // 5
    for k in range(10):
        row, col = divmod(k, 5)
        templates[k, row * cell_h:(row + 1) * cell_h, col * cell_w:(col + 1) * cell_w] = 0.8
        templates[k, (3 * k) % size, :] = 1.0
    return templates


def synth_digits(count: int, seed: int = 0, size: int = 28, noise: float = 0.1) -> Dataset:
    """
    Deterministic, linearly separable 10-class patterns of size x size pixels.

    Each sample is its class template shifted by up to one pixel, with
    Gaussian noise added and clipped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    templates = _digit_templates(size)
    labels = rng.permutation(np.arange(count) % 10).astype(np.int64)
    images = np.empty((count, 1, size, size))
    for n, label in enumerate(labels):
        shift = rng.integers(-1, 2, size=2)
        shifted = np.roll(templates[label], tuple(shift), axis=(0, 1))
        images[n, 0] = np.clip(shifted + rng.normal(0.0, noise, size=(size, size)), 0.0, 1.0)
    return Dataset(images, labels, 'synthetic')


def synth_clean_images(count: int, size: int = 32, seed: int = 0) -> np.ndarray:
    """
    Piecewise-smooth grayscale images: a random linear gradient plus a few
    constant-intensity rectangles, clipped to [0, 1].

    Returns:
        np.ndarray: (count, 1, size, size)
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    images = np.empty((count, 1, size, size))
    for n in range(count):
        gy, gx, base = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.3, 0.7)
        image = base + gy * (yy - 0.5) + gx * (xx - 0.5)
        for _ in range(rng.integers(2, 5)):
            y0, x0 = rng.integers(0, size - 4, size=2)
            h, w = rng.integers(4, max(5, size // 2), size=2)
            image[y0:y0 + h, x0:x0 + w] += rng.uniform(-0.4, 0.4)
        images[n, 0] = np.clip(image, 0.0, 1.0)
    return images


def synth_denoise_pairs(clean_images: np.ndarray, sigma: float, seed: int = 0) -> Dataset:
    """
    Noisy/clean training pairs: noisy = clip(clean + N(0, sigma²), 0, 1).

    Args:
        clean_images: (N, C, H, W) or (N, H, W) images in [0, 1]
        sigma: Noise standard deviation, >= 0
        seed: Noise seed

    Returns:
        Dataset with noisy inputs as images and clean images as labels

    Raises:
        ValueError: If sigma is negative
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    clean = np.asarray(clean_images, dtype=np.float64)
    if clean.ndim == 3:
        clean = clean[:, None, :, :]
    if sigma == 0:
        return Dataset(clean.copy(), clean, 'denoise')
    rng = np.random.default_rng(seed)
    noisy = np.clip(clean + rng.normal(0.0, sigma, size=clean.shape), 0.0, 1.0)
    return Dataset(noisy, clean, 'denoise')
