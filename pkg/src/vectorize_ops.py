"""
Vectorization Operators Module

Patchification (im2col), its many-to-one adjoint (col2im), pooling index maps
and pooling forward/backward, all expressed through the tensor_core primitives.

Data Flow:
    Tensor (N, C, H, W) → im2col() → PatchMatrix (kh*kw*C) x (out_h*out_w*N) → matmul
    PatchMatrix-shaped gradient → col2im() → accumulate_by_index(sum) → Tensor
    Tensor → build_pool_map() → accumulate_by_index(max|mean) → pooled Tensor

Orders:
    Patch rows are row-major within a kh x kw patch, with each channel's patch as
    a contiguous block (row = c*kh*kw + i*kw + j). Columns enumerate output
    positions row-major, batch outermost (col = n*out_h*out_w + oy*out_w + ox).

    Multichannel inputs are unrolled in one pass with the channel offset folded
    into the gather index. This replaces the zero-padded redundant-column layout
    used by matrix-language implementations; the input/output contract is the
    same as unrolling each channel and stacking the blocks.

Only valid convolution is supported (no zero padding).

Invoked by: layers, variants, network
Invokes: tensor_core, error_handler
"""

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Tuple, Union

import numpy as np

from src.error_handler import GeometryError, ShapeError
from src.tensor_core import IndexMap, Matrix, Tensor, accumulate_by_index, to_nchw

POOL_MODES = ('max', 'avg')
BACKWARD_MODES = ('exact', 'nearest')
BACKWARD_MODE_ALIASES = {'paper-nn': 'nearest'}

# For max pooling: source linear index chosen per output cell
ArgIndex = np.ndarray


@dataclass(frozen=True)
class ConvGeometry:
    """
    Geometry of a valid convolution over an (N, C, H, W) input.

    Attributes:
        height, width (int): Input plane extents
        channels (int): Input channels C
        batch (int): Samples N
        kh, kw (int): Kernel extents
        stride (int): Stride s (same along both axes)
    """
    height: int
    width: int
    channels: int
    batch: int
    kh: int
    kw: int
    stride: int = 1

    def __post_init__(self):
        if min(self.height, self.width, self.channels, self.batch) < 1:
            raise GeometryError(f"Input extents must be positive: {self}")
        if self.kh < 1 or self.kw < 1:
            raise GeometryError(f"Kernel extents must be positive, got {self.kh}x{self.kw}")
        if self.stride < 1:
            raise GeometryError(f"Stride must be >= 1, got {self.stride}")
        if self.kh > self.height or self.kw > self.width:
            raise GeometryError(
                f"Kernel {self.kh}x{self.kw} larger than input {self.height}x{self.width}")

    @classmethod
    def for_input(cls, shape: Tuple[int, ...], kernel: Tuple[int, int], stride: int = 1) -> 'ConvGeometry':
        """Geometry for an input of shape (N, C, H, W), (C, H, W) or (H, W)."""
        shape = tuple(shape)
        if len(shape) == 2:
            shape = (1, 1) + shape
        elif len(shape) == 3:
            shape = (1,) + shape
        if len(shape) != 4:
            raise ShapeError(f"Expected an image shape with 2..4 axes, got {shape}", shape)
        batch, channels, height, width = shape
        return cls(height, width, channels, batch, int(kernel[0]), int(kernel[1]), int(stride))

    @property
    def out_h(self) -> int:
        """Output rows: floor((H - kh) / s) + 1."""
        return (self.height - self.kh) // self.stride + 1

    @property
    def out_w(self) -> int:
        """Output columns: floor((W - kw) / s) + 1."""
        return (self.width - self.kw) // self.stride + 1

    @property
    def patch_len(self) -> int:
        """Rows of the patch matrix: kh * kw * C."""
        return self.kh * self.kw * self.channels

    @property
    def n_cols(self) -> int:
        """Columns of the patch matrix: out_h * out_w * N."""
        return self.out_h * self.out_w * self.batch

    @property
    def input_shape(self) -> Tuple[int, int, int, int]:
        """Input tensor shape (N, C, H, W)."""
        return (self.batch, self.channels, self.height, self.width)

    @property
    def input_size(self) -> int:
        """Number of input elements."""
        return self.batch * self.channels * self.height * self.width

    def with_batch(self, batch: int) -> 'ConvGeometry':
        """Same geometry for a different batch size."""
        return replace(self, batch=batch)


@dataclass(frozen=True, eq=False)
class PatchMatrix:
    """
    Unrolled input: one flattened receptive field per column.

    Attributes:
        mat (Matrix): (kh*kw*C) x (out_h*out_w*N) array
        geometry (ConvGeometry): Geometry the matrix was built for
    """
    mat: Matrix
    geometry: ConvGeometry

    @property
    def shape(self) -> Tuple[int, int]:
        """Matrix shape."""
        return self.mat.shape


@lru_cache(maxsize=256)
def conv_gather_index(geometry: ConvGeometry) -> np.ndarray:
    """
    Linear input index for every patch-matrix entry, shape (patch_len, n_cols).

    Cached per geometry; the returned array is read-only.
    """
    g = geometry
    channel = np.arange(g.channels, dtype=np.int64)
    ki = np.arange(g.kh, dtype=np.int64)
    kj = np.arange(g.kw, dtype=np.int64)
    row_offset = ((channel[:, None, None] * g.height + ki[None, :, None]) * g.width
                  + kj[None, None, :]).ravel()

    sample = np.arange(g.batch, dtype=np.int64)
    oy = np.arange(g.out_h, dtype=np.int64) * g.stride
    ox = np.arange(g.out_w, dtype=np.int64) * g.stride
    plane = g.channels * g.height * g.width
    col_offset = (sample[:, None, None] * plane + oy[None, :, None] * g.width
                  + ox[None, None, :]).ravel()

    index = row_offset[:, None] + col_offset[None, :]
    index.setflags(write=False)
    return index


@lru_cache(maxsize=256)
def col2im_map(geometry: ConvGeometry) -> IndexMap:
    """Many-to-one map from patch-matrix entries back to input positions."""
    index = conv_gather_index(geometry).ravel()
    return IndexMap(np.arange(index.size, dtype=np.int64), index,
                    target_len=geometry.input_size, source_len=index.size)


def im2col(f: Tensor, kernel: Tuple[int, int], stride: int = 1) -> PatchMatrix:
    """
    Unroll an input into its patch matrix in a single pass over all channels.

    Args:
        f: Input of shape (N, C, H, W), (C, H, W) or (H, W)
        kernel: (kh, kw)
        stride: Stride s >= 1

    Returns:
        PatchMatrix whose column p is the flattened receptive field of output p

    Raises:
        GeometryError: If the kernel is larger than the input or s < 1
    """
    f = to_nchw(np.asarray(f))
    geometry = ConvGeometry.for_input(f.shape, kernel, stride)
    mat = np.ascontiguousarray(f).ravel()[conv_gather_index(geometry)]
    return PatchMatrix(mat, geometry)


def col2im(g: Union[PatchMatrix, Matrix], geometry: Optional[ConvGeometry] = None) -> Tensor:
    """
    Adjoint of im2col: every input position receives the sum of the gradient
    entries at all patch-matrix positions it was copied to.

    Args:
        g: PatchMatrix-shaped gradient (a PatchMatrix, or a matrix plus geometry)
        geometry: Required when g is a bare matrix

    Returns:
        Tensor of shape (N, C, H, W)

    Raises:
        GeometryError: If g's shape does not match the geometry
    """
    if isinstance(g, PatchMatrix):
        geometry = geometry or g.geometry
        g = g.mat
    if geometry is None:
        raise GeometryError("col2im needs a geometry for a bare matrix")
    expected = (geometry.patch_len, geometry.n_cols)
    if tuple(g.shape) != expected:
        raise GeometryError(f"col2im: gradient shape {tuple(g.shape)} does not match geometry {expected}")
    out = accumulate_by_index(np.ascontiguousarray(g).ravel(), col2im_map(geometry), 'sum')
    return out.reshape(geometry.input_shape)


@dataclass(frozen=True)
class PoolGeometry:
    """
    Geometry of a pooling layer.

    Attributes:
        height, width (int): Input plane extents
        ph, pw (int): Window extents
        stride (int): Stride s; overlapping when s < ph or s < pw
        mode (str): 'max' or 'avg'
        channels (int): Maps pooled independently
        batch (int): Samples pooled independently
    """
    height: int
    width: int
    ph: int
    pw: int
    stride: int
    mode: str = 'max'
    channels: int = 1
    batch: int = 1

    def __post_init__(self):
        if self.mode not in POOL_MODES:
            raise GeometryError(f"Unknown pooling mode {self.mode!r}; expected one of {POOL_MODES}")
        if min(self.height, self.width, self.channels, self.batch) < 1:
            raise GeometryError(f"Input extents must be positive: {self}")
        if self.ph < 1 or self.pw < 1 or self.stride < 1:
            raise GeometryError(f"Window and stride must be positive: {self.ph}x{self.pw}, s={self.stride}")
        if self.ph > self.height or self.pw > self.width:
            raise GeometryError(f"Window {self.ph}x{self.pw} exceeds input {self.height}x{self.width}")

    @property
    def out_h(self) -> int:
        """Output rows (windows fully inside the input)."""
        return (self.height - self.ph) // self.stride + 1

    @property
    def out_w(self) -> int:
        """Output columns (windows fully inside the input)."""
        return (self.width - self.pw) // self.stride + 1

    @property
    def window_size(self) -> int:
        """Elements per window."""
        return self.ph * self.pw

    @property
    def overlapping(self) -> bool:
        """True when neighbouring windows share elements."""
        return self.stride < self.ph or self.stride < self.pw

    @property
    def input_shape(self) -> Tuple[int, int, int, int]:
        """Input tensor shape (N, C, H, W)."""
        return (self.batch, self.channels, self.height, self.width)

    @property
    def output_shape(self) -> Tuple[int, int, int, int]:
        """Output tensor shape (N, C, out_h, out_w)."""
        return (self.batch, self.channels, self.out_h, self.out_w)

    @property
    def input_size(self) -> int:
        """Number of input elements."""
        return self.batch * self.channels * self.height * self.width

    @property
    def output_size(self) -> int:
        """Number of output elements."""
        return self.batch * self.channels * self.out_h * self.out_w

    def for_input(self, shape: Tuple[int, ...]) -> 'PoolGeometry':
        """
        Bind this geometry to a concrete (N, C, H, W) shape.

        Raises:
            GeometryError: If the plane extents differ from the geometry
        """
        batch, channels, height, width = to_nchw(np.empty(shape, dtype=np.uint8)).shape
        if (height, width) != (self.height, self.width):
            raise GeometryError(
                f"Pooling geometry expects {self.height}x{self.width} planes, got {height}x{width}")
        if (batch, channels) == (self.batch, self.channels):
            return self
        return replace(self, channels=channels, batch=batch)


@lru_cache(maxsize=256)
def build_pool_map(geometry: PoolGeometry) -> IndexMap:
    """
    Map every (input element, covering window) pair to that window's output index.

    Pairs are ordered by output cell, and row-major within each window, so the
    gathered vector is the feature map with overlapped elements inserted once per
    covering window. Non-overlapping pooling uses each source at most once.

    Returns:
        IndexMap with group_size = ph * pw and out_h * out_w * ph * pw pairs per plane
    """
    g = geometry
    planes = np.arange(g.batch * g.channels, dtype=np.int64)
    oy = np.arange(g.out_h, dtype=np.int64) * g.stride
    ox = np.arange(g.out_w, dtype=np.int64) * g.stride
    wi = np.arange(g.ph, dtype=np.int64)
    wj = np.arange(g.pw, dtype=np.int64)
    source = (planes[:, None, None, None, None] * (g.height * g.width)
              + (oy[None, :, None, None, None] + wi[None, None, None, :, None]) * g.width
              + (ox[None, None, :, None, None] + wj[None, None, None, None, :]))
    target = np.repeat(np.arange(g.output_size, dtype=np.int64), g.window_size)
    return IndexMap(source.ravel(), target, target_len=g.output_size, source_len=g.input_size,
                    group_size=g.window_size)


@lru_cache(maxsize=256)
def _pool_scatter_map(geometry: PoolGeometry) -> IndexMap:
    """Transpose of the pool map: output cells back onto the input positions they cover."""
    return build_pool_map(geometry).transpose()


def pool_forward(f: Tensor, geometry: PoolGeometry) -> Tuple[Tensor, Optional[ArgIndex]]:
    """
    Pool every map of every sample through the index map.

    Args:
        f: Input of shape (N, C, H, W) (2-D and 3-D inputs are promoted)
        geometry: Window, stride and mode; plane extents must match f

    Returns:
        (pooled tensor of shape (N, C, out_h, out_w), ArgIndex for max mode or None)
        ArgIndex holds, per output cell, the input linear index that won; on ties
        the lowest linear index wins.

    Raises:
        GeometryError: If f does not match the geometry
    """
    f = to_nchw(np.asarray(f))
    geometry = geometry.for_input(f.shape)
    index_map = build_pool_map(geometry)
    flat = np.ascontiguousarray(f).ravel()

    if geometry.mode == 'avg':
        out = accumulate_by_index(flat, index_map, 'mean')
        return out.reshape(geometry.output_shape), None

    out = accumulate_by_index(flat, index_map, 'max')
    windows = flat[index_map.source_index].reshape(geometry.output_size, geometry.window_size)
    winner = windows.argmax(axis=1)
    sources = index_map.source_index.reshape(geometry.output_size, geometry.window_size)
    arg = sources[np.arange(geometry.output_size), winner]
    return out.reshape(geometry.output_shape), arg


def canonical_backward_mode(mode_flag: str) -> str:
    """Backward mode with aliases resolved; ValueError for unknown names."""
    if isinstance(mode_flag, str):
        mode_flag = BACKWARD_MODE_ALIASES.get(mode_flag, mode_flag)
    if mode_flag not in BACKWARD_MODES:
        raise ValueError(f"Unknown backward mode {mode_flag!r}; expected one of "
                         f"{BACKWARD_MODES + tuple(BACKWARD_MODE_ALIASES)}")
    return mode_flag


def pool_backward(grad_out: Tensor, geometry: PoolGeometry, arg: Optional[ArgIndex] = None,
                  mode_flag: str = 'exact') -> Tensor:
    """
    Route pooled gradients back to the input.

    exact:    avg spreads each cell's gradient uniformly (grad / window size);
              max sends it to the recorded winner.
    nearest: nearest-neighbour upscaling; every input cell of a window receives
              the window's gradient unscaled (summed where windows overlap).
              This approximation is not the true gradient.

    Args:
        grad_out: Gradient of shape (N, C, out_h, out_w)
        geometry: Geometry used in the forward pass
        arg: ArgIndex from pool_forward (required for exact max)
        mode_flag: 'exact' or 'nearest' ('paper-nn' is accepted for nearest)

    Returns:
        Gradient with respect to the input, shape (N, C, H, W)

    Raises:
        GeometryError: If grad_out does not match the pooled extents
    """
    mode_flag = canonical_backward_mode(mode_flag)
    grad_out = to_nchw(np.asarray(grad_out))
    batch, channels, out_h, out_w = grad_out.shape
    geometry = replace(geometry, batch=batch, channels=channels) \
        if (batch, channels) != (geometry.batch, geometry.channels) else geometry
    if (out_h, out_w) != (geometry.out_h, geometry.out_w):
        raise GeometryError(
            f"Pooled gradient {out_h}x{out_w} does not match geometry output {geometry.out_h}x{geometry.out_w}")

    flat = np.ascontiguousarray(grad_out).ravel()
    if mode_flag == 'nearest':
        out = accumulate_by_index(flat, _pool_scatter_map(geometry), 'sum')
    elif geometry.mode == 'avg':
        out = accumulate_by_index(flat / geometry.window_size, _pool_scatter_map(geometry), 'sum')
    else:
        if arg is None or arg.size != geometry.output_size:
            raise GeometryError("Exact max-pool backward needs the ArgIndex recorded in the forward pass")
        route = IndexMap(np.arange(geometry.output_size, dtype=np.int64), arg,
                         target_len=geometry.input_size, source_len=geometry.output_size)
        out = accumulate_by_index(flat, route, 'sum')
    return out.astype(grad_out.dtype, copy=False).reshape(geometry.input_shape)
