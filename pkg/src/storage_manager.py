"""
Storage Manager Module

This module handles persistent storage of trained models and bench reports.
Models are written in the binary ModelFile format; every write goes through a
temporary file in the target directory followed by a rename, so readers never
see a partially written file.

ModelFile layout (little-endian):
    magic        4 bytes  b'VCNN'
    version      u32      1
    spec_len     u32      length of the spec JSON
    spec         bytes    UTF-8 JSON: network spec dict plus "precision"
    n_blobs      u32
    blob * n:
        name_len u16, name (UTF-8, "layer{i}.{param}")
        dtype    u8       1 = float32, 2 = float64
        ndim     u8, dims u32 * ndim
        nbytes   u64, raw little-endian data
    crc32        u32      over every preceding byte

Data Flow:
    Network → encode_model() → bytes → atomic_write() → model file
    model file → decode_model() → build_network() + parameter blobs → Network

Invoked by: denoise, vcnn, selftest
Invokes: network, error_handler
"""

import json
import logging
import os
import re
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from src.error_handler import ParseError
from src.network import Network, build_network, spec_from_dict, spec_to_dict
from src.tensor_core import Precision

# Configure module logger
logger = logging.getLogger(__name__)

MAGIC = b'VCNN'
FORMAT_VERSION = 1

DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


def atomic_write(path: Union[str, Path], data: Union[bytes, str]) -> Path:
    """
    Write data to path atomically (temp file in the same directory, fsync, rename).

    Args:
        path: Destination file
        data: Bytes, or text encoded as UTF-8

    Returns:
        Path: The destination path
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode('utf-8') if isinstance(data, str) else data
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix='.tmp', dir=target.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise
    return target


def encode_model(net: Network) -> bytes:
    """
    Serialize a network to ModelFile bytes.

    Args:
        net: Network to serialize (momentum buffers are not stored)

    Returns:
        bytes: Complete file contents including the checksum trailer
    """
    document = spec_to_dict(net.spec)
    document['precision'] = Precision.parse(net.dtype).value
    spec_bytes = json.dumps(document, sort_keys=True).encode('utf-8')

    blobs = []
    for index, layer in enumerate(net.layers):
        for name, param in layer.params.items():
            blobs.append((f"layer{index}.{name}", param))

    parts = [struct.pack('<4sI', MAGIC, FORMAT_VERSION), struct.pack('<I', len(spec_bytes)), spec_bytes,
             struct.pack('<I', len(blobs))]
    for name, param in blobs:
        dtype = np.dtype(param.dtype)
        name_bytes = name.encode('utf-8')
        raw = np.ascontiguousarray(param, dtype=dtype.newbyteorder('<')).tobytes()
        parts.append(struct.pack('<H', len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack('<BB', DTYPE_CODES[dtype], param.ndim))
        parts.append(struct.pack(f'<{param.ndim}I', *param.shape))
        parts.append(struct.pack('<Q', len(raw)))
        parts.append(raw)
    body = b''.join(parts)
    return body + struct.pack('<I', zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes, path: str = None):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise ParseError(f"Truncated {what}: expected {count} bytes, got {len(self.data) - self.offset}",
                             self.offset, self.path)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_model(data: bytes, path: str = None) -> Network:
    """
    Rebuild a network from ModelFile bytes.

    Raises:
        ParseError: Bad magic, unsupported version, checksum mismatch, truncated
            or inconsistent blobs (with the byte offset of the failure)
    """
    if len(data) < 4 + 4:
        raise ParseError(f"File too short for a model header: {len(data)} bytes", 0, path)
    body, trailer = data[:-4], data[-4:]
    reader = _Reader(body, path)

    magic, version = reader.unpack('<4sI', 'header')
    if magic != MAGIC:
        raise ParseError(f"Bad magic {magic!r}, expected {MAGIC!r}", 0, path)
    if version != FORMAT_VERSION:
        raise ParseError(f"Unsupported model format version {version}", 4, path)
    expected_crc = struct.unpack('<I', trailer)[0]
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if expected_crc != actual_crc:
        raise ParseError(f"Checksum mismatch: stored {expected_crc:#010x}, computed {actual_crc:#010x}",
                         len(body), path)

    (spec_len,) = reader.unpack('<I', 'spec length')
    spec_offset = reader.offset
    try:
        document = json.loads(reader.take(spec_len, 'spec').decode('utf-8'))
        precision = document.pop('precision', 'f64')
        spec = spec_from_dict(document)
    except (UnicodeDecodeError, json.JSONDecodeError, AttributeError, ValueError) as error:
        if isinstance(error, ParseError):
            raise
        raise ParseError(f"Invalid network spec: {error}", spec_offset, path) from error

    net = build_network(spec, precision)
    expected: Dict[str, Tuple[int, str]] = {
        f"layer{i}.{name}": (i, name) for i, layer in enumerate(net.layers) for name in layer.params
    }

    (n_blobs,) = reader.unpack('<I', 'blob count')
    params: List[Dict[str, Any]] = [{} for _ in net.layers]
    for _ in range(n_blobs):
        blob_offset = reader.offset
        (name_len,) = reader.unpack('<H', 'blob name length')
        name = reader.take(name_len, 'blob name').decode('utf-8', errors='replace')
        code, ndim = reader.unpack('<BB', 'blob dtype')
        if code not in CODE_DTYPES:
            raise ParseError(f"Unknown dtype code {code} in blob {name!r}", reader.offset - 2, path)
        dims = reader.unpack(f'<{ndim}I', 'blob dims') if ndim else ()
        (nbytes,) = reader.unpack('<Q', 'blob size')
        dtype = CODE_DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dtype.itemsize:
            raise ParseError(f"Blob {name!r} declares {nbytes} bytes for shape {dims}", reader.offset - 8, path)
        raw = reader.take(nbytes, f"blob {name!r}")
        if name not in expected:
            raise ParseError(f"Unexpected blob {name!r}", blob_offset, path)
        index, param = expected.pop(name)
        current = net.layers[index].params[param]
        if tuple(dims) != current.shape:
            raise ParseError(f"Blob {name!r} has shape {tuple(dims)}, network expects {current.shape}",
                             blob_offset, path)
        params[index][param] = np.frombuffer(raw, dtype=dtype.newbyteorder('<')).astype(dtype).reshape(dims)

    if expected:
        raise ParseError(f"Missing blobs: {', '.join(sorted(expected))}", reader.offset, path)
    if reader.offset != len(body):
        raise ParseError(f"{len(body) - reader.offset} trailing bytes after the last blob", reader.offset, path)

    layers = [layer.with_params(**values) if values else layer for layer, values in zip(net.layers, params)]
    return net.with_layers(layers)


class StorageManager:
    """
    Manages storage of model files and bench reports.

    Directory Structure:
        <base_dir>/
        ├── models/
        │   └── <name>.vcnn
        └── reports/
            └── <name>.csv | <name>.json

    Attributes:
        base_dir (Path): Base directory for stored artifacts
    """

    def __init__(self, base_dir: str = "./artifacts"):
        """
        Initialize the storage manager.

        Args:
            base_dir (str): Base directory (default: ./artifacts); created on demand
        """
        self.base_dir = Path(base_dir)
        logger.debug("Storage manager initialized with base directory: %s", self.base_dir)

    def _sanitize_filename(self, name: str) -> str:
        """Replace anything outside [A-Za-z0-9._-] with underscores."""
        sanitized = re.sub(r'[^A-Za-z0-9._-]', '_', name)
        sanitized = re.sub(r'_+', '_', sanitized).strip('_')
        return sanitized or 'unnamed'

    def model_path(self, name: str) -> Path:
        """Path of a named model inside the store."""
        return self.base_dir / 'models' / f"{self._sanitize_filename(name)}.vcnn"

    def report_path(self, name: str, fmt: str) -> Path:
        """Path of a named report inside the store."""
        return self.base_dir / 'reports' / f"{self._sanitize_filename(name)}.{fmt}"

    def list_models(self) -> List[Path]:
        """Stored model files, sorted by name."""
        directory = self.base_dir / 'models'
        return sorted(directory.glob('*.vcnn')) if directory.is_dir() else []

    def get_storage_stats(self) -> Dict[str, Any]:
        """Counts and total size of stored artifacts."""
        files = [p for p in self.base_dir.rglob('*') if p.is_file()] if self.base_dir.is_dir() else []
        return {
            'models': len(self.list_models()),
            'reports': sum(1 for p in files if p.parent.name == 'reports'),
            'total_bytes': sum(p.stat().st_size for p in files),
        }


def save_model(net: Network, path: Union[str, Path]) -> Path:
    """
    Write a network to a ModelFile atomically.

    Returns:
        Path: The written file
    """
    data = encode_model(net)
    target = atomic_write(path, data)
    logger.info("Saved model", extra={'path': str(target), 'operation': 'save_model'})
    return target


def load_model(path: Union[str, Path]) -> Network:
    """
    Read a ModelFile.

    Raises:
        FileNotFoundError: If the file does not exist
        ParseError: If the file is not a valid ModelFile
    """
    source = Path(path)
    net = decode_model(source.read_bytes(), str(source))
    logger.info("Loaded model", extra={'path': str(source), 'operation': 'load_model'})
    return net
