"""
Layers Module

Convolution, pooling and fully connected layers, the activation functions and
the loss heads. Every layer is an immutable value; forward passes return a
cache that the matching backward pass consumes, and backward passes return
freshly allocated gradients owned by the caller.

Each layer's forward pass is split into a linear part (convolution, pooling or
affine product, plus bias) and the element-wise activation, so the executors in
variants can time the two separately.

Data Flow:
    f → conv_linear_forward() → Z = W · im2col(f) + b → activate() → σ(Z)
    dL/dσ → activate_backward() → G → conv_linear_backward() → (col2im(Wᵀ G), G Pᵀ, ΣG)

Invoked by: network, variants, grad_check
Invokes: tensor_core, vectorize_ops, error_handler
"""

from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np

from src.error_handler import IndexBoundsError, ShapeError, SpecError
from src.tensor_core import Matrix, Tensor, Vector, map_elementwise, matmul, to_nchw
from src.vectorize_ops import (ArgIndex, PatchMatrix, PoolGeometry, canonical_backward_mode, col2im, im2col,
                               pool_backward, pool_forward)

LOSS_KINDS = ('softmax-cross-entropy', 'mean-squared-error')


# ============================================================================
# Activations
# ============================================================================

def _vectorized(fn: Callable) -> Callable:
    fn.vectorized = True
    return fn


@_vectorized
def relu(z: Tensor) -> Tensor:
    return np.maximum(z, 0)


@_vectorized
def relu_grad(z: Tensor) -> Tensor:
    # relu'(0) = 0
    return (z > 0).astype(z.dtype)


@_vectorized
def sigmoid(z: Tensor) -> Tensor:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@_vectorized
def sigmoid_grad(z: Tensor) -> Tensor:
    s = sigmoid(z)
    return s * (1.0 - s)


@_vectorized
def tanh(z: Tensor) -> Tensor:
    return np.tanh(z)


@_vectorized
def tanh_grad(z: Tensor) -> Tensor:
    return 1.0 - np.tanh(z) ** 2


@_vectorized
def identity(z: Tensor) -> Tensor:
    return z


@_vectorized
def identity_grad(z: Tensor) -> Tensor:
    return np.ones_like(z)


@dataclass(frozen=True)
class Activation:
    """Activation function paired with its derivative (both of the pre-activation)."""
    name: str
    fn: Callable
    grad: Callable


ACTIVATIONS: Dict[str, Activation] = {
    'relu': Activation('relu', relu, relu_grad),
    'sigmoid': Activation('sigmoid', sigmoid, sigmoid_grad),
    'tanh': Activation('tanh', tanh, tanh_grad),
    'identity': Activation('identity', identity, identity_grad),
}


def get_activation(name: str) -> Activation:
    """
    Look up an activation by tag.

    Raises:
        SpecError: For an unknown tag
    """
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise SpecError(f"Unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}") from None


def activate(name: str, z: Tensor) -> Tensor:
    """Apply the activation element-wise."""
    if name == 'identity':
        return z
    return map_elementwise(z, get_activation(name).fn)


def activate_backward(name: str, z: Tensor, grad: Tensor) -> Tensor:
    """Chain the upstream gradient through the activation at pre-activation z."""
    if name == 'identity':
        return grad
    if grad.shape != z.shape:
        raise ShapeError(f"Activation gradient shape {grad.shape} does not match {z.shape}", grad.shape, z.shape)
    return grad * map_elementwise(z, get_activation(name).grad)


# ============================================================================
# Layer values
# ============================================================================

@dataclass(frozen=True, eq=False)
class ConvLayer:
    """
    Convolution layer: K kernels over C input maps.

    Attributes:
        weights (Matrix): K x (kh*kw*C), row i is the flattened kernel i
        bias (Vector): Length K
        kernel (Tuple[int, int]): (kh, kw)
        stride (int): Convolution stride
        activation (str): Activation tag
    """
    weights: Matrix
    bias: Vector
    kernel: Tuple[int, int]
    stride: int = 1
    activation: str = 'relu'

    kind = 'conv'

    def __post_init__(self):
        kh, kw = self.kernel
        if self.weights.ndim != 2 or self.weights.shape[1] % (kh * kw):
            raise ShapeError(
                f"Conv weights {self.weights.shape} are not K x (kh*kw*C) for kernel {kh}x{kw}",
                self.weights.shape)
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"Conv bias {self.bias.shape} does not match {self.weights.shape[0]} kernels",
                             self.bias.shape, self.weights.shape)
        get_activation(self.activation)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1] // (self.kernel[0] * self.kernel[1])

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {'weights': self.weights, 'bias': self.bias}

    def with_params(self, **params: np.ndarray) -> 'ConvLayer':
        return replace(self, **params)


@dataclass(frozen=True, eq=False)
class FullLayer:
    """
    Fully connected layer.

    Attributes:
        weights (Matrix): out x in
        bias (Vector): Length out
        activation (str): Activation tag
    """
    weights: Matrix
    bias: Vector
    activation: str = 'relu'

    kind = 'full'

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeError(f"Full weights must be a matrix, got {self.weights.shape}", self.weights.shape)
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"Full bias {self.bias.shape} does not match fan-out {self.weights.shape[0]}",
                             self.bias.shape, self.weights.shape)
        get_activation(self.activation)

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {'weights': self.weights, 'bias': self.bias}

    def with_params(self, **params: np.ndarray) -> 'FullLayer':
        return replace(self, **params)


@dataclass(frozen=True, eq=False)
class PoolLayer:
    """
    Pooling layer: σ(pool(f) + b), with b and σ off by default.

    Attributes:
        geometry (PoolGeometry): Window, stride, mode and input plane extents
        bias (Optional[Vector]): One entry per map, or None
        activation (str): Activation tag (default identity)
        backward_mode (str): 'exact' or 'nearest' ('paper-nn' resolves to nearest)
    """
    geometry: PoolGeometry
    bias: Optional[Vector] = None
    activation: str = 'identity'
    backward_mode: str = 'exact'

    kind = 'pool'

    def __post_init__(self):
        if self.bias is not None and self.bias.shape != (self.geometry.channels,):
            raise ShapeError(f"Pool bias {self.bias.shape} does not match {self.geometry.channels} maps",
                             self.bias.shape)
        get_activation(self.activation)
        try:
            object.__setattr__(self, 'backward_mode', canonical_backward_mode(self.backward_mode))
        except ValueError as exc:
            raise SpecError(str(exc)) from None

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {} if self.bias is None else {'bias': self.bias}

    def with_params(self, **params: np.ndarray) -> 'PoolLayer':
        return replace(self, **params)


Layer = Union[ConvLayer, FullLayer, PoolLayer]


@dataclass(frozen=True)
class LossHead:
    """Loss applied to the network output."""
    kind: str = 'softmax-cross-entropy'

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise SpecError(f"Unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")

    @property
    def is_classifier(self) -> bool:
        return self.kind == 'softmax-cross-entropy'


@dataclass(frozen=True, eq=False)
class LayerCache:
    """
    What a forward pass leaves for the backward pass.

    Attributes:
        linear (Any): Kernel-specific state (PatchMatrix, input columns, ArgIndex, raw input)
        pre (Tensor): Pre-activation output
        input_shape (Tuple): Shape of the layer input
    """
    linear: Any
    pre: Tensor
    input_shape: Tuple[int, ...]


# ============================================================================
# Initialization
# ============================================================================

def glorot_uniform(fan_in: int, fan_out: int, shape: Tuple[int, ...], rng: np.random.Generator,
                   dtype=np.float64) -> np.ndarray:
    """Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_conv(in_channels: int, out_channels: int, kernel: Tuple[int, int], rng: np.random.Generator,
              stride: int = 1, activation: str = 'relu', dtype=np.float64) -> ConvLayer:
    """New conv layer with Glorot-uniform weights and zero bias."""
    kh, kw = kernel
    weights = glorot_uniform(in_channels * kh * kw, out_channels * kh * kw,
                             (out_channels, kh * kw * in_channels), rng, dtype)
    return ConvLayer(weights, np.zeros(out_channels, dtype=dtype), (kh, kw), stride, activation)


def init_full(fan_in: int, fan_out: int, rng: np.random.Generator, activation: str = 'relu',
              dtype=np.float64) -> FullLayer:
    """New fully connected layer with Glorot-uniform weights and zero bias."""
    weights = glorot_uniform(fan_in, fan_out, (fan_out, fan_in), rng, dtype)
    return FullLayer(weights, np.zeros(fan_out, dtype=dtype), activation)


# ============================================================================
# Convolution
# ============================================================================

def conv_linear_forward(layer: ConvLayer, f: Tensor,
                        patchify: Callable[..., PatchMatrix] = im2col) -> Tuple[Tensor, PatchMatrix]:
    """
    Z = W · patchify(f) + b, reshaped to (N, K, out_h, out_w).

    Raises:
        ShapeError: If f's channel count does not match the kernels
    """
    f = to_nchw(f)
    if f.shape[1] != layer.in_channels:
        raise ShapeError(f"Conv layer expects {layer.in_channels} input maps, got {f.shape[1]}",
                         f.shape, layer.weights.shape)
    patches = patchify(f, layer.kernel, layer.stride)
    g = patches.geometry
    z = matmul(layer.weights, patches.mat) + layer.bias[:, None]
    z = z.reshape(layer.out_channels, g.batch, g.out_h, g.out_w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(z), patches


def conv_grad_matrix(grad_z: Tensor) -> Matrix:
    """(N, K, out_h, out_w) gradient to the K x (N*out_h*out_w) matrix form."""
    batch, kernels = grad_z.shape[:2]
    return np.ascontiguousarray(grad_z.transpose(1, 0, 2, 3)).reshape(kernels, -1)


def conv_linear_backward(layer: ConvLayer, grad_z: Tensor,
                         patches: PatchMatrix) -> Tuple[Tensor, Matrix, Vector]:
    """
    Gradients of Z = W · P + b.

    Returns:
        (col2im(Wᵀ G), G Pᵀ, row sums of G)
    """
    g = patches.geometry
    expected = (g.batch, layer.out_channels, g.out_h, g.out_w)
    if grad_z.shape != expected:
        raise ShapeError(f"Conv gradient shape {grad_z.shape} does not match output {expected}",
                         grad_z.shape, expected)
    grad_matrix = conv_grad_matrix(grad_z)
    grad_w = matmul(grad_matrix, patches.mat.T)
    grad_b = grad_matrix.sum(axis=1)
    grad_input = col2im(matmul(layer.weights.T, grad_matrix), g)
    return grad_input, grad_w, grad_b


def conv_forward(layer: ConvLayer, f: Tensor) -> Tuple[Tensor, LayerCache]:
    """
    σ(W · im2col(f) + b) for all kernels and samples in one product.

    Returns:
        (output of shape (N, K, out_h, out_w), cache holding the PatchMatrix)
    """
    f = to_nchw(f)
    z, patches = conv_linear_forward(layer, f)
    return activate(layer.activation, z), LayerCache(patches, z, f.shape)


def conv_backward(layer: ConvLayer, grad_out: Tensor, cache: LayerCache) -> Tuple[Tensor, Matrix, Vector]:
    """
    Backward pass of conv_forward.

    Returns:
        (grad_input, grad_weights, grad_bias)
    """
    grad_z = activate_backward(layer.activation, cache.pre, to_nchw(grad_out))
    return conv_linear_backward(layer, grad_z, cache.linear)


# ============================================================================
# Fully connected
# ============================================================================

def _as_columns(f: Tensor, fan_in: int) -> Matrix:
    # (N, ...) → in x N; a 1-D input is one sample
    rows = f.reshape(1, -1) if f.ndim == 1 else f.reshape(f.shape[0], -1)
    if rows.shape[1] != fan_in:
        raise ShapeError(f"Full layer expects {fan_in} inputs per sample, got {rows.shape[1]}",
                         f.shape, (fan_in,))
    return rows.T


def full_linear_forward(layer: FullLayer, f: Tensor) -> Tuple[Tensor, Matrix]:
    """Z = W · X + b with one sample per column of X; returns Z as (N, out)."""
    columns = _as_columns(f, layer.fan_in)
    z = matmul(layer.weights, columns) + layer.bias[:, None]
    return np.ascontiguousarray(z.T), columns


def full_linear_backward(layer: FullLayer, grad_z: Tensor, columns: Matrix,
                         input_shape: Tuple[int, ...]) -> Tuple[Tensor, Matrix, Vector]:
    grad_matrix = grad_z.reshape(-1, layer.fan_out).T
    if grad_matrix.shape[1] != columns.shape[1]:
        raise ShapeError(f"Full gradient batch {grad_matrix.shape[1]} does not match input batch {columns.shape[1]}",
                         grad_z.shape, columns.shape)
    grad_w = matmul(grad_matrix, columns.T)
    grad_b = grad_matrix.sum(axis=1)
    grad_input = matmul(layer.weights.T, grad_matrix).T.reshape(input_shape)
    return np.ascontiguousarray(grad_input), grad_w, grad_b


def full_forward(layer: FullLayer, f: Tensor) -> Tuple[Tensor, LayerCache]:
    """
    σ(W · x + b) for every sample at once.

    A 1-D input is treated as one sample and yields a 1-D output.
    """
    z, columns = full_linear_forward(layer, f)
    if f.ndim == 1:
        z = z.reshape(-1)
    return activate(layer.activation, z), LayerCache(columns, z, f.shape)


def full_backward(layer: FullLayer, grad_out: Tensor, cache: LayerCache) -> Tuple[Tensor, Matrix, Vector]:
    grad_z = activate_backward(layer.activation, cache.pre, grad_out.reshape(cache.pre.shape))
    return full_linear_backward(layer, grad_z, cache.linear, cache.input_shape)


# ============================================================================
# Pooling
# ============================================================================

def pool_linear_forward(layer: PoolLayer, f: Tensor,
                        pool_fn: Callable = pool_forward) -> Tuple[Tensor, Optional[ArgIndex]]:
    out, arg = pool_fn(to_nchw(f), layer.geometry)
    if layer.bias is not None:
        out = out + layer.bias[None, :, None, None]
    return out, arg


def pool_linear_backward(layer: PoolLayer, grad_z: Tensor, arg: Optional[ArgIndex],
                         unpool_fn: Callable = pool_backward) -> Tuple[Tensor, Optional[Vector]]:
    grad_b = grad_z.sum(axis=(0, 2, 3)) if layer.bias is not None else None
    grad_input = unpool_fn(grad_z, layer.geometry, arg, layer.backward_mode)
    return grad_input, grad_b


def pool_layer_forward(layer: PoolLayer, f: Tensor) -> Tuple[Tensor, LayerCache]:
    """σ(pool(f) + b); with no bias and identity σ this is pool_forward."""
    f = to_nchw(f)
    z, arg = pool_linear_forward(layer, f)
    return activate(layer.activation, z), LayerCache(arg, z, f.shape)


def pool_layer_backward(layer: PoolLayer, grad_out: Tensor,
                        cache: LayerCache) -> Tuple[Tensor, Optional[Vector]]:
    """
    Returns:
        (grad_input, grad_bias or None when the layer has no bias)
    """
    grad_z = activate_backward(layer.activation, cache.pre, to_nchw(grad_out))
    return pool_linear_backward(layer, grad_z, cache.linear)


# ============================================================================
# Dispatch
# ============================================================================

def layer_forward(layer: Layer, f: Tensor) -> Tuple[Tensor, LayerCache]:
    """Vectorized forward pass for any layer kind."""
    if isinstance(layer, ConvLayer):
        return conv_forward(layer, f)
    if isinstance(layer, PoolLayer):
        return pool_layer_forward(layer, f)
    return full_forward(layer, f)


def layer_backward(layer: Layer, grad_out: Tensor, cache: LayerCache) -> Tuple[Tensor, Dict[str, np.ndarray]]:
    """
    Vectorized backward pass for any layer kind.

    Returns:
        (grad_input, {param name: gradient}) with keys matching layer.params
    """
    if isinstance(layer, ConvLayer):
        grad_input, grad_w, grad_b = conv_backward(layer, grad_out, cache)
        return grad_input, {'weights': grad_w, 'bias': grad_b}
    if isinstance(layer, PoolLayer):
        grad_input, grad_b = pool_layer_backward(layer, grad_out, cache)
        return grad_input, ({} if grad_b is None else {'bias': grad_b})
    grad_input, grad_w, grad_b = full_backward(layer, grad_out, cache)
    return grad_input, {'weights': grad_w, 'bias': grad_b}


# ============================================================================
# Loss heads
# ============================================================================

def _class_targets(pred: Matrix, target: np.ndarray) -> np.ndarray:
    """Class indices from either index or one-hot targets."""
    target = np.asarray(target)
    n_classes = pred.shape[1]
    if target.ndim == 2 or (target.ndim == 1 and pred.shape[0] == 1 and target.size == n_classes > 1):
        one_hot = target.reshape(pred.shape[0], -1)
        if one_hot.shape != pred.shape:
            raise ShapeError(f"One-hot targets {target.shape} do not match predictions {pred.shape}",
                             target.shape, pred.shape)
        return one_hot.argmax(axis=1)
    classes = target.reshape(-1).astype(np.int64)
    if classes.size != pred.shape[0]:
        raise ShapeError(f"{classes.size} class targets for {pred.shape[0]} predictions", target.shape, pred.shape)
    if classes.size and (classes.min() < 0 or classes.max() >= n_classes):
        raise IndexBoundsError(f"Class index out of range [0, {n_classes}): {classes.min()}..{classes.max()}")
    return classes


def _log_softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _as_rows(pred: Tensor) -> Matrix:
    return pred.reshape(1, -1) if pred.ndim == 1 else pred.reshape(pred.shape[0], -1)


def loss_forward(head: LossHead, pred: Tensor, target: np.ndarray) -> float:
    """
    Batch-mean loss.

    softmax-cross-entropy: -log softmax(pred)[class], averaged over samples;
        targets are class indices or one-hot rows.
    mean-squared-error: mean of (pred - target)² over all elements.

    Raises:
        ShapeError: If prediction and target shapes disagree
        IndexBoundsError: If a class index is out of range
    """
    if head.is_classifier:
        logits = _as_rows(pred)
        classes = _class_targets(logits, target)
        log_probs = _log_softmax(logits.astype(np.float64, copy=False))
        return float(-log_probs[np.arange(classes.size), classes].mean())
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ShapeError(f"MSE target {target.shape} does not match prediction {pred.shape}",
                         target.shape, pred.shape)
    return float(np.mean((pred.astype(np.float64, copy=False) - target) ** 2))


def loss_backward(head: LossHead, pred: Tensor, target: np.ndarray) -> Tensor:
    """Exact gradient of loss_forward with respect to pred (same shape and dtype as pred)."""
    if head.is_classifier:
        logits = _as_rows(pred)
        classes = _class_targets(logits, target)
        grad = np.exp(_log_softmax(logits))
        grad[np.arange(classes.size), classes] -= 1.0
        return (grad / classes.size).reshape(pred.shape).astype(pred.dtype, copy=False)
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise ShapeError(f"MSE target {target.shape} does not match prediction {pred.shape}",
                         target.shape, pred.shape)
    return (2.0 * (pred - target) / pred.size).astype(pred.dtype, copy=False)
