"""
Network Module

Sequential composition of layers, mini-batch assembly, the forward/backward
passes over a whole batch, plain SGD with classical momentum, and the training
loop.

A Network is an immutable value: sgd_step() and train() return new networks
with new parameter arrays, so snapshots can be handed to other threads or
persisted while training continues.

Data Flow:
    NetworkSpec → build_network() → Network
    samples → assemble_batch() → (N, C, H, W) → forward() → ForwardPass
    ForwardPass + targets → backward() → Gradients → sgd_step() → Network
    Dataset + TrainConfig → train() → (Network, [EpochStats])

Invoked by: variants, bench_runner, denoise, storage_manager, grad_check, vcnn
Invokes: layers, vectorize_ops, tensor_core, error_handler, logging_config
"""

import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.error_handler import ConfigError, Deadline, GeometryError, ShapeError, SpecError, TrainingError
from src.layers import (ACTIVATIONS, ConvLayer, FullLayer, Layer, LayerCache, LossHead, PoolLayer, init_conv,
                        init_full, layer_backward, layer_forward, loss_backward, loss_forward)
from src.logging_config import get_logger
from src.tensor_core import Precision, Tensor, as_tensor
from src.vectorize_ops import ConvGeometry, PoolGeometry, canonical_backward_mode

logger = get_logger(__name__)

LAYER_KINDS = ('conv', 'pool', 'full')


# ============================================================================
# Specs
# ============================================================================

@dataclass(frozen=True)
class LayerSpec:
    """
    Declarative description of one layer.

    conv: maps, kernel, stride, activation
    pool: size, stride, mode, bias, activation, backward_mode
    full: units, activation
    """
    kind: str
    maps: Optional[int] = None
    kernel: Optional[Tuple[int, int]] = None
    stride: int = 1
    units: Optional[int] = None
    size: Optional[Tuple[int, int]] = None
    mode: str = 'max'
    bias: bool = False
    activation: Optional[str] = None
    backward_mode: str = 'exact'

    @property
    def act(self) -> str:
        """Activation tag with the per-kind default applied."""
        if self.activation is not None:
            return self.activation
        return 'identity' if self.kind == 'pool' else 'relu'


@dataclass(frozen=True)
class NetworkSpec:
    """
    Attributes:
        layers (Tuple[LayerSpec, ...]): Ordered layer specs
        input_shape (Tuple[int, int, int]): (C, H, W) of one sample
        loss (str): Loss head kind
        seed (int): Parameter initialization seed
    """
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]
    loss: str = 'softmax-cross-entropy'
    seed: int = 0


def _pair(value: Any, key: str, index: int) -> Tuple[int, int]:
    if isinstance(value, int) and not isinstance(value, bool):
        return (value, value)
    if isinstance(value, (list, tuple)) and len(value) == 2 and all(isinstance(v, int) for v in value):
        return (int(value[0]), int(value[1]))
    raise SpecError(f"layers[{index}].{key} must be an int or a pair of ints, got {value!r}")


def _layer_from_dict(entry: Dict[str, Any], index: int) -> LayerSpec:
    if not isinstance(entry, dict):
        raise SpecError(f"layers[{index}] must be an object, got {type(entry).__name__}")
    kind = entry.get('kind')
    allowed = {
        'conv': {'kind', 'maps', 'kernel', 'stride', 'activation'},
        'pool': {'kind', 'size', 'stride', 'mode', 'bias', 'activation', 'backward_mode'},
        'full': {'kind', 'units', 'activation'},
    }
    if kind not in allowed:
        raise SpecError(f"layers[{index}].kind must be one of {LAYER_KINDS}, got {kind!r}")
    unknown = sorted(set(entry) - allowed[kind])
    if unknown:
        raise SpecError(f"layers[{index}]: unknown key(s) for {kind} layer: {', '.join(unknown)}")

    activation = entry.get('activation')
    if activation is not None and activation not in ACTIVATIONS:
        raise SpecError(f"layers[{index}].activation must be one of {sorted(ACTIVATIONS)}, got {activation!r}")

    if kind == 'conv':
        maps = entry.get('maps')
        if not isinstance(maps, int) or maps < 1:
            raise SpecError(f"layers[{index}].maps must be a positive int, got {maps!r}")
        return LayerSpec('conv', maps=maps, kernel=_pair(entry.get('kernel'), 'kernel', index),
                         stride=int(entry.get('stride', 1)), activation=activation)
    if kind == 'pool':
        size = _pair(entry.get('size'), 'size', index)
        mode = entry.get('mode', 'max')
        if mode not in ('max', 'avg'):
            raise SpecError(f"layers[{index}].mode must be 'max' or 'avg', got {mode!r}")
        try:
            backward_mode = canonical_backward_mode(entry.get('backward_mode', 'exact'))
        except ValueError as exc:
            raise SpecError(f"layers[{index}].backward_mode must be 'exact', 'nearest' or 'paper-nn', "
                            f"got {entry.get('backward_mode')!r}") from exc
        return LayerSpec('pool', size=size, stride=int(entry.get('stride', size[0])), mode=mode,
                         bias=bool(entry.get('bias', False)), activation=activation,
                         backward_mode=backward_mode)
    units = entry.get('units')
    if not isinstance(units, int) or units < 1:
        raise SpecError(f"layers[{index}].units must be a positive int, got {units!r}")
    return LayerSpec('full', units=units, activation=activation)


def spec_from_dict(document: Dict[str, Any]) -> NetworkSpec:
    """
    Build and validate a NetworkSpec from its dict form.

    Raises:
        SpecError: Naming the offending key, or the layer whose shapes do not chain
    """
    layers = document.get('layers')
    if not isinstance(layers, list) or not layers:
        raise SpecError("'layers' must be a non-empty list")
    input_shape = document.get('input_shape')
    if (not isinstance(input_shape, (list, tuple)) or len(input_shape) != 3
            or not all(isinstance(v, int) and v > 0 for v in input_shape)):
        raise SpecError(f"'input_shape' must be [C, H, W] with positive ints, got {input_shape!r}")
    loss = document.get('loss', 'softmax-cross-entropy')
    LossHead(loss)
    seed = document.get('seed', 0)
    if not isinstance(seed, int):
        raise SpecError(f"'seed' must be an int, got {seed!r}")
    spec = NetworkSpec(tuple(_layer_from_dict(entry, i) for i, entry in enumerate(layers)),
                       tuple(input_shape), loss, seed)
    infer_shapes(spec)
    return spec


def spec_to_dict(spec: NetworkSpec) -> Dict[str, Any]:
    """Plain-dict form of a spec (inverse of spec_from_dict)."""
    layers = []
    for layer in spec.layers:
        if layer.kind == 'conv':
            entry = {'kind': 'conv', 'maps': layer.maps, 'kernel': list(layer.kernel), 'stride': layer.stride}
        elif layer.kind == 'pool':
            entry = {'kind': 'pool', 'size': list(layer.size), 'stride': layer.stride, 'mode': layer.mode,
                     'bias': layer.bias, 'backward_mode': layer.backward_mode}
        else:
            entry = {'kind': 'full', 'units': layer.units}
        if layer.activation is not None:
            entry['activation'] = layer.activation
        layers.append(entry)
    return {'layers': layers, 'input_shape': list(spec.input_shape), 'loss': spec.loss, 'seed': spec.seed}


def infer_shapes(spec: NetworkSpec) -> List[Tuple[int, ...]]:
    """
    Per-sample output shape of every layer.

    Raises:
        SpecError: When a layer does not fit its input (naming the layer)
    """
    shape: Tuple[int, ...] = tuple(spec.input_shape)
    shapes = []
    for index, layer in enumerate(spec.layers):
        try:
            if layer.kind in ('conv', 'pool') and len(shape) != 3:
                raise SpecError(f"layers[{index}]: {layer.kind} layer cannot follow a full layer")
            if layer.kind == 'conv':
                g = ConvGeometry(shape[1], shape[2], shape[0], 1, layer.kernel[0], layer.kernel[1], layer.stride)
                shape = (layer.maps, g.out_h, g.out_w)
            elif layer.kind == 'pool':
                g = PoolGeometry(shape[1], shape[2], layer.size[0], layer.size[1], layer.stride, layer.mode,
                                 channels=shape[0])
                shape = (shape[0], g.out_h, g.out_w)
            else:
                shape = (layer.units,)
        except GeometryError as error:
            raise SpecError(f"layers[{index}] ({layer.kind}) does not fit input {shape}: {error}") from error
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class TrainConfig:
    """
    Attributes:
        learning_rate (float): Positive step size
        momentum (float): Classical momentum in [0, 1)
        batch_size (int): Samples per step, >= 1
        epochs (int): Passes over the data, >= 1
        precision (str): 'f32' or 'f64'
        seed (int): Shuffle seed
    """
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 32
    epochs: int = 1
    precision: str = 'f64'
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        try:
            Precision.parse(self.precision)
        except ValueError as error:
            raise ConfigError(str(error)) from error

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'TrainConfig':
        try:
            return cls(**values)
        except TypeError as error:
            raise ConfigError(f"Invalid training settings: {error}") from error


# ============================================================================
# Network value
# ============================================================================

@dataclass(frozen=True, eq=False)
class Network:
    """
    Attributes:
        spec (NetworkSpec): Spec the network was built from
        layers (Tuple[Layer, ...]): Layer values
        head (LossHead): Loss head
        velocity (Optional[Tuple[Dict]]): Momentum buffers, one dict per layer
    """
    spec: NetworkSpec
    layers: Tuple[Layer, ...]
    head: LossHead
    velocity: Optional[Tuple[Dict[str, np.ndarray], ...]] = None

    @property
    def dtype(self) -> np.dtype:
        for layer in self.layers:
            for param in layer.params.values():
                return param.dtype
        return np.dtype(np.float64)

    @property
    def param_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def with_layers(self, layers: Sequence[Layer], velocity=None) -> 'Network':
        return replace(self, layers=tuple(layers), velocity=velocity)


def build_network(spec: NetworkSpec, precision=Precision.DOUBLE) -> Network:
    """
    Initialize parameters from the spec seed.

    Raises:
        SpecError: If the layer shapes do not chain
    """
    dtype = Precision.parse(precision).dtype
    rng = np.random.default_rng(spec.seed)
    shapes = infer_shapes(spec)
    layers: List[Layer] = []
    shape = tuple(spec.input_shape)
    for layer_spec, out_shape in zip(spec.layers, shapes):
        if layer_spec.kind == 'conv':
            layers.append(init_conv(shape[0], layer_spec.maps, layer_spec.kernel, rng, layer_spec.stride,
                                    layer_spec.act, dtype))
        elif layer_spec.kind == 'pool':
            geometry = PoolGeometry(shape[1], shape[2], layer_spec.size[0], layer_spec.size[1],
                                    layer_spec.stride, layer_spec.mode, channels=shape[0])
            bias = np.zeros(shape[0], dtype=dtype) if layer_spec.bias else None
            layers.append(PoolLayer(geometry, bias, layer_spec.act, layer_spec.backward_mode))
        else:
            layers.append(init_full(int(np.prod(shape)), layer_spec.units, rng, layer_spec.act, dtype))
        shape = out_shape
    network = Network(spec, tuple(layers), LossHead(spec.loss))
    logger.debug("Built network with %d parameters", network.param_count)
    return network


def lenet_spec(outputs: int = 10, activation: str = 'relu', seed: int = 0) -> NetworkSpec:
    """LeNet-style classifier for 1x28x28 inputs."""
    return spec_from_dict({
        'input_shape': [1, 28, 28],
        'layers': [
            {'kind': 'conv', 'maps': 20, 'kernel': 5, 'activation': activation},
            {'kind': 'pool', 'size': 2, 'stride': 2},
            {'kind': 'conv', 'maps': 50, 'kernel': 5, 'activation': activation},
            {'kind': 'pool', 'size': 2, 'stride': 2},
            {'kind': 'full', 'units': 500, 'activation': activation},
            {'kind': 'full', 'units': 500, 'activation': activation},
            {'kind': 'full', 'units': outputs, 'activation': 'identity'},
        ],
        'loss': 'softmax-cross-entropy',
        'seed': seed,
    })


# ============================================================================
# Batch assembly and passes
# ============================================================================

def assemble_batch(samples: Sequence[Tensor]) -> Tensor:
    """
    Stack samples so that one im2col call covers the whole batch.

    The patch matrix of the result is the horizontal concatenation of the
    per-sample patch matrices, in sample order.

    Args:
        samples: (C, H, W) or (H, W) arrays, all of one shape

    Raises:
        ShapeError: If samples differ in shape or the list is empty
    """
    if not samples:
        raise ShapeError("Cannot assemble an empty batch")
    first = np.shape(samples[0])
    for index, sample in enumerate(samples):
        if np.shape(sample) != first:
            raise ShapeError(f"Sample {index} has shape {np.shape(sample)}, expected {first}",
                             np.shape(sample), first)
    batch = np.stack([np.asarray(s) for s in samples])
    if batch.ndim == 3:
        batch = batch[:, None, :, :]
    return batch


class LayerRunner:
    """
    Runs layers with the vectorized kernels.

    Executors for the less vectorized implementations override the three hooks;
    forward() and backward() only talk to a runner.
    """

    def forward_layer(self, layer: Layer, f: Tensor) -> Tuple[Tensor, LayerCache]:
        return layer_forward(layer, f)

    def backward_layer(self, layer: Layer, grad: Tensor, cache: LayerCache) -> Tuple[Tensor, Dict[str, np.ndarray]]:
        return layer_backward(layer, grad, cache)

    def loss(self, head: LossHead, pred: Tensor, targets: np.ndarray) -> Tuple[float, Tensor]:
        return loss_forward(head, pred, targets), loss_backward(head, pred, targets)


VECTORIZED = LayerRunner()


@dataclass
class ForwardPass:
    """
    Attributes:
        outputs (List[Tensor]): Input batch followed by every layer's output
        caches (List[LayerCache]): One per layer
    """
    outputs: List[Tensor] = field(default_factory=list)
    caches: List[LayerCache] = field(default_factory=list)

    @property
    def result(self) -> Tensor:
        return self.outputs[-1]


@dataclass
class Gradients:
    """
    Attributes:
        params (List[Dict[str, np.ndarray]]): Per-layer parameter gradients
        input (Tensor): Gradient with respect to the network input
        loss (float): Batch-mean loss
    """
    params: List[Dict[str, np.ndarray]]
    input: Tensor
    loss: float


def forward(net: Network, batch: Tensor, runner: LayerRunner = VECTORIZED,
            deadline: Optional[Deadline] = None) -> ForwardPass:
    """Run every layer on the whole batch, keeping caches for backward."""
    activations = ForwardPass(outputs=[batch])
    f = batch
    for layer in net.layers:
        if deadline is not None:
            deadline.check()
        f, cache = runner.forward_layer(layer, f)
        activations.outputs.append(f)
        activations.caches.append(cache)
    return activations


def backward(net: Network, activations: ForwardPass, targets: np.ndarray,
             runner: LayerRunner = VECTORIZED, deadline: Optional[Deadline] = None) -> Gradients:
    """
    Loss and gradients for the batch-mean loss.

    Raises:
        TrainingError: If the loss is not finite, naming the first layer whose
            output holds NaN or inf
    """
    loss, grad = runner.loss(net.head, activations.result, targets)
    if not np.isfinite(loss):
        index = first_nonfinite_layer(activations)
        kind = net.layers[index].kind if index is not None else 'loss'
        raise TrainingError(f"Loss is not finite ({loss})", index, kind)
    params, grad_input = propagate(net, activations, grad, runner, deadline)
    return Gradients(params, grad_input, loss)


def propagate(net: Network, activations: ForwardPass, grad: Tensor, runner: LayerRunner = VECTORIZED,
              deadline: Optional[Deadline] = None) -> Tuple[List[Dict[str, np.ndarray]], Tensor]:
    """Backpropagate an output gradient through every layer, last to first."""
    params: List[Dict[str, np.ndarray]] = [{} for _ in net.layers]
    for index in range(len(net.layers) - 1, -1, -1):
        if deadline is not None:
            deadline.check()
        grad, params[index] = runner.backward_layer(net.layers[index], grad, activations.caches[index])
    return params, grad


def first_nonfinite_layer(activations: ForwardPass) -> Optional[int]:
    """Index of the first layer whose output is not all finite, or None."""
    for index, output in enumerate(activations.outputs[1:]):
        if not np.all(np.isfinite(output)):
            return index
    return None


def sgd_step(net: Network, gradients: Gradients, config: TrainConfig) -> Network:
    """
    One SGD update with classical momentum: v ← μ v + g, w ← w − lr v.

    Returns a new Network; the input network and its arrays are not modified.
    """
    velocity = net.velocity or tuple({} for _ in net.layers)
    layers, new_velocity = [], []
    for layer, grads, buffers in zip(net.layers, gradients.params, velocity):
        updated, buffers_out = {}, {}
        for name, param in layer.params.items():
            step = grads[name]
            if config.momentum:
                previous = buffers.get(name)
                step = step if previous is None else config.momentum * previous + step
                buffers_out[name] = step
            updated[name] = (param - config.learning_rate * step).astype(param.dtype, copy=False)
        layers.append(layer.with_params(**updated) if updated else layer)
        new_velocity.append(buffers_out)
    return net.with_layers(layers, tuple(new_velocity) if config.momentum else None)


def predict(net: Network, batch: Tensor, runner: LayerRunner = VECTORIZED) -> np.ndarray:
    """
    Class indices (argmax, ties to the lowest index) for classifiers; the raw
    output tensor otherwise.
    """
    out = forward(net, batch, runner).result
    if net.head.is_classifier:
        return out.reshape(out.shape[0], -1).argmax(axis=1)
    return out


# ============================================================================
# Training loop
# ============================================================================

@dataclass
class EpochStats:
    epoch: int
    loss: float
    seconds: float
    images_per_sec: float


def train(net: Network, dataset, config: TrainConfig, runner: LayerRunner = VECTORIZED,
          step_fn=None) -> Tuple[Network, List[EpochStats]]:
    """
    Mini-batch SGD over a dataset with a seeded shuffle per epoch.

    Args:
        net: Starting network
        dataset: Object with `images` (N, C, H, W) and `labels`
        config: Training settings
        runner: Layer runner for forward/backward
        step_fn: Optional replacement for one (forward, backward) step, called
            as step_fn(net, batch, targets) -> Gradients (used by variant executors)

    Returns:
        (trained network, per-epoch statistics)

    Raises:
        TrainingError: When the loss diverges
    """
    dtype = Precision.parse(config.precision).dtype
    images = as_tensor(dataset.images, dtype)
    labels = np.asarray(dataset.labels)
    if labels.dtype.kind == 'f':
        labels = labels.astype(dtype)
    count = images.shape[0]
    if count != labels.shape[0]:
        raise ShapeError(f"{count} images but {labels.shape[0]} labels", images.shape, labels.shape)
    rng = np.random.default_rng(config.seed)
    history: List[EpochStats] = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(count)
        started = time.perf_counter()
        total, seen = 0.0, 0
        for start in range(0, count, config.batch_size):
            chosen = order[start:start + config.batch_size]
            batch, targets = images[chosen], labels[chosen]
            if step_fn is None:
                grads = backward(net, forward(net, batch, runner), targets, runner)
            else:
                grads = step_fn(net, batch, targets)
            net = sgd_step(net, grads, config)
            total += grads.loss * chosen.size
            seen += chosen.size
        seconds = time.perf_counter() - started
        stats = EpochStats(epoch, total / max(seen, 1), seconds, seen / seconds if seconds > 0 else 0.0)
        history.append(stats)
        logger.info("Epoch finished", extra={'epoch': epoch, 'loss': stats.loss,
                                             'images_per_sec': stats.images_per_sec,
                                             'duration_ms': seconds * 1000.0})
    return net, history


def evaluate(net: Network, dataset, batch_size: int = 100) -> float:
    """Accuracy for classifiers, mean squared error otherwise."""
    labels = np.asarray(dataset.labels)
    if len(labels) == 0:
        return 0.0
    images = as_tensor(dataset.images, net.dtype)
    if net.head.is_classifier:
        correct = 0
        for start in range(0, images.shape[0], batch_size):
            predicted = predict(net, images[start:start + batch_size])
            correct += int(np.sum(predicted == labels[start:start + batch_size]))
        return correct / images.shape[0]
    squared = 0.0
    for start in range(0, images.shape[0], batch_size):
        out = predict(net, images[start:start + batch_size])
        squared += float(np.sum((out - labels[start:start + batch_size]) ** 2))
    return squared / labels.size
