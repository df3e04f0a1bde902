"""
Variants Module

The six implementations of the vectorization ladder behind one layer-execution
interface. Every executor produces the same outputs and gradients; they differ
only in which elements are vectorized:

    Variant | fc  batch  conv  pool  featmap
    --------+------------------------------
    imp1    |  x
    imp2    |  x    x*
    imp3    |  x          x
    imp4    |  x          x     x
    imp5    |  x          x     x     x
    imp6    |  x    x     x     x     x

    * imp2 "batch" is a concurrent map over samples, not batch assembly.

conv without featmap patchifies each input map separately and stacks the
blocks; featmap patchifies all maps in one pass. Variants without conv run
nested loops with per-window arithmetic, as do variants without pool for
pooling.

Data Flow:
    make_executor('imp4') → Executor → run_batch(executor, net, batch, targets)
        batch_vec:  forward/backward over the assembled batch
        otherwise:  per-sample forward → batch loss → per-sample backward → summed grads

Invoked by: bench_runner, vcnn, selftest
Invokes: network, layers, vectorize_ops, tensor_core, error_handler
"""

import contextlib
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from src.error_handler import Deadline, GeometryError, TrainingError, UsageError
from src.layers import (ConvLayer, Layer, LayerCache, LossHead, PoolLayer, activate, activate_backward,
                        conv_linear_backward, conv_linear_forward, full_linear_backward, full_linear_forward,
                        loss_backward, loss_forward, pool_linear_backward, pool_linear_forward)
from src.logging_config import get_logger
from src.network import (ForwardPass, Gradients, LayerRunner, Network, backward, first_nonfinite_layer, forward,
                         propagate)
from src.tensor_core import Tensor, to_nchw
from src.vectorize_ops import (ArgIndex, ConvGeometry, PatchMatrix, PoolGeometry, canonical_backward_mode, im2col,
                               pool_forward)

logger = get_logger(__name__)

FC_VEC = 'fc_vec'
BATCH_VEC = 'batch_vec'
CONV_VEC = 'conv_vec'
POOL_VEC = 'pool_vec'
FEATMAP_VEC = 'featmap_vec'

COMPONENTS = ('conv', 'pool', 'full', 'other')
PHASES = ('f', 'b')


class VariantId(Enum):
    """Implementation on the vectorization ladder."""
    IMP1 = 'imp1'
    IMP2 = 'imp2'
    IMP3 = 'imp3'
    IMP4 = 'imp4'
    IMP5 = 'imp5'
    IMP6 = 'imp6'

    @property
    def flags(self) -> FrozenSet[str]:
        return VARIANT_FLAGS[self]

    @property
    def concurrent(self) -> bool:
        """Samples are mapped concurrently instead of assembled into one batch."""
        return self is VariantId.IMP2

    @classmethod
    def parse(cls, name: str) -> 'VariantId':
        """
        Accept 'imp1'..'imp6' in any case.

        Raises:
            UsageError: For an unknown name
        """
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise UsageError(f"Unknown variant {name!r}; expected one of "
                             f"{', '.join(v.value for v in cls)}") from None


VARIANT_FLAGS: Dict[VariantId, FrozenSet[str]] = {
    VariantId.IMP1: frozenset({FC_VEC}),
    VariantId.IMP2: frozenset({FC_VEC, BATCH_VEC}),
    VariantId.IMP3: frozenset({FC_VEC, CONV_VEC}),
    VariantId.IMP4: frozenset({FC_VEC, CONV_VEC, POOL_VEC}),
    VariantId.IMP5: frozenset({FC_VEC, CONV_VEC, POOL_VEC, FEATMAP_VEC}),
    VariantId.IMP6: frozenset({FC_VEC, CONV_VEC, POOL_VEC, FEATMAP_VEC, BATCH_VEC}),
}


class ComponentTimer:
    """
    Accumulates wall time per (component, phase).

    Thread-safe; concurrent sample workers add their own elapsed time, so the
    totals of a concurrent run can exceed its wall time.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._totals: Dict[Tuple[str, str], float] = {}
        self.reset()

    def reset(self):
        with self._lock:
            self._totals = {(c, p): 0.0 for c in COMPONENTS for p in PHASES}

    @contextlib.contextmanager
    def measure(self, component: str, phase: str):
        started = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - started
            with self._lock:
                self._totals[(component, phase)] += elapsed

    def totals(self) -> Dict[str, float]:
        """Seconds keyed 'conv_f', 'conv_b', ..., 'other_b'."""
        with self._lock:
            return {f"{c}_{p}": self._totals[(c, p)] for c in COMPONENTS for p in PHASES}

    def fractions(self) -> Dict[str, float]:
        """Share of the total per component; all zeros when nothing was timed."""
        totals = self.totals()
        overall = sum(totals.values())
        if overall <= 0:
            return {key: 0.0 for key in totals}
        return {key: value / overall for key, value in totals.items()}


# ============================================================================
# Loop kernels
# ============================================================================

def conv_linear_forward_loop(layer: ConvLayer, f: Tensor) -> Tuple[Tensor, Tensor]:
    """Z = W * f + b by nested loops over samples, kernels and output positions."""
    f = to_nchw(f)
    g = ConvGeometry.for_input(f.shape, layer.kernel, layer.stride)
    kernels = layer.weights.reshape(layer.out_channels, g.channels, g.kh, g.kw)
    s = g.stride
    z = np.empty((g.batch, layer.out_channels, g.out_h, g.out_w), dtype=np.result_type(f, layer.weights))
    for n in range(g.batch):
        for k in range(layer.out_channels):
            for oy in range(g.out_h):
                for ox in range(g.out_w):
                    window = f[n, :, oy * s:oy * s + g.kh, ox * s:ox * s + g.kw]
                    z[n, k, oy, ox] = np.sum(window * kernels[k]) + layer.bias[k]
    return z, f


def conv_linear_backward_loop(layer: ConvLayer, grad_z: Tensor, f: Tensor) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Loop counterpart of conv_linear_backward."""
    g = ConvGeometry.for_input(f.shape, layer.kernel, layer.stride)
    kernels = layer.weights.reshape(layer.out_channels, g.channels, g.kh, g.kw)
    s = g.stride
    grad_input = np.zeros_like(f)
    grad_w = np.zeros_like(kernels)
    grad_b = np.zeros_like(layer.bias)
    for n in range(g.batch):
        for k in range(layer.out_channels):
            for oy in range(g.out_h):
                for ox in range(g.out_w):
                    value = grad_z[n, k, oy, ox]
                    rows, cols = slice(oy * s, oy * s + g.kh), slice(ox * s, ox * s + g.kw)
                    grad_w[k] += value * f[n, :, rows, cols]
                    grad_input[n, :, rows, cols] += value * kernels[k]
                    grad_b[k] += value
    return grad_input, grad_w.reshape(layer.weights.shape), grad_b


def conv_forward_loop(layer: ConvLayer, f: Tensor) -> Tuple[Tensor, LayerCache]:
    """Loop counterpart of conv_forward."""
    z, f = conv_linear_forward_loop(layer, f)
    return activate(layer.activation, z), LayerCache(f, z, f.shape)


def conv_backward_loop(layer: ConvLayer, grad_out: Tensor, cache: LayerCache):
    """Loop counterpart of conv_backward: (grad_input, grad_weights, grad_bias)."""
    grad_z = activate_backward(layer.activation, cache.pre, to_nchw(grad_out))
    return conv_linear_backward_loop(layer, grad_z, cache.linear)


def pool_forward_loop(f: Tensor, geometry: PoolGeometry) -> Tuple[Tensor, Optional[ArgIndex]]:
    """Loop counterpart of pool_forward, one numpy reduction per window."""
    f = to_nchw(f)
    g = geometry.for_input(f.shape)
    out = np.empty(g.output_shape, dtype=f.dtype)
    arg = np.empty(g.output_size, dtype=np.int64) if g.mode == 'max' else None
    s = g.stride
    cell = 0
    for n in range(g.batch):
        for c in range(g.channels):
            for oy in range(g.out_h):
                for ox in range(g.out_w):
                    window = f[n, c, oy * s:oy * s + g.ph, ox * s:ox * s + g.pw]
                    if arg is None:
                        out[n, c, oy, ox] = window.mean()
                    else:
                        pos = int(np.argmax(window))
                        out[n, c, oy, ox] = window.flat[pos]
                        arg[cell] = ((n * g.channels + c) * g.height + oy * s + pos // g.pw) * g.width \
                            + ox * s + pos % g.pw
                    cell += 1
    return out, arg


def pool_backward_loop(grad_out: Tensor, geometry: PoolGeometry, arg: Optional[ArgIndex] = None,
                       mode_flag: str = 'exact') -> Tensor:
    """Loop counterpart of pool_backward."""
    grad_out = to_nchw(grad_out)
    mode_flag = canonical_backward_mode(mode_flag)
    if mode_flag == 'exact' and geometry.mode == 'max' and arg is None:
        raise GeometryError("Exact max-pool backward needs the ArgIndex recorded in the forward pass")
    batch, channels = grad_out.shape[:2]
    g = PoolGeometry(geometry.height, geometry.width, geometry.ph, geometry.pw, geometry.stride,
                     geometry.mode, channels, batch)
    grad_input = np.zeros(g.input_shape, dtype=grad_out.dtype)
    flat = grad_input.reshape(-1)
    s = g.stride
    cell = 0
    for n in range(g.batch):
        for c in range(g.channels):
            for oy in range(g.out_h):
                for ox in range(g.out_w):
                    value = grad_out[n, c, oy, ox]
                    window = grad_input[n, c, oy * s:oy * s + g.ph, ox * s:ox * s + g.pw]
                    if mode_flag == 'nearest':
                        window += value
                    elif g.mode == 'avg':
                        window += value / g.window_size
                    else:
                        flat[arg[cell]] += value
                    cell += 1
    return grad_input


def featmap_patchify_per_channel(f: Tensor, kernel: Tuple[int, int], stride: int = 1) -> PatchMatrix:
    """
    Patch matrix built one input map at a time, then stacked.

    Same result as im2col on the whole input.
    """
    f = to_nchw(np.asarray(f))
    geometry = ConvGeometry.for_input(f.shape, kernel, stride)
    blocks = [im2col(f[:, c:c + 1], kernel, stride).mat for c in range(f.shape[1])]
    return PatchMatrix(np.vstack(blocks), geometry)


# ============================================================================
# Executors
# ============================================================================

class Executor(LayerRunner):
    """
    Layer runner for one variant of the ladder.

    Attributes:
        variant (VariantId): Which elements are vectorized
        timer (Optional[ComponentTimer]): Component timing, when instrumented
        deadline (Optional[Deadline]): Budget checked between layers and samples
        workers (int): Concurrent sample workers for imp2
    """

    def __init__(self, variant: VariantId, timer: Optional[ComponentTimer] = None,
                 deadline: Optional[Deadline] = None, workers: Optional[int] = None):
        self.variant = variant
        self.timer = timer
        self.deadline = deadline
        self.workers = workers or int(os.environ.get('VCNN_THREADS') or os.cpu_count() or 1)

    def has(self, flag: str) -> bool:
        return flag in self.variant.flags

    def _measure(self, component: str, phase: str):
        if self.timer is None:
            return contextlib.nullcontext()
        return self.timer.measure(component, phase)

    def check_deadline(self):
        if self.deadline is not None:
            self.deadline.check()

    def forward_layer(self, layer: Layer, f: Tensor) -> Tuple[Tensor, LayerCache]:
        self.check_deadline()
        with self._measure(layer.kind, 'f'):
            if isinstance(layer, ConvLayer):
                if not self.has(CONV_VEC):
                    z, linear = conv_linear_forward_loop(layer, f)
                else:
                    patchify = im2col if self.has(FEATMAP_VEC) else featmap_patchify_per_channel
                    z, linear = conv_linear_forward(layer, f, patchify)
            elif isinstance(layer, PoolLayer):
                z, linear = pool_linear_forward(layer, f, pool_forward if self.has(POOL_VEC) else pool_forward_loop)
            else:
                z, linear = full_linear_forward(layer, f)
        with self._measure('other', 'f'):
            out = activate(layer.activation, z)
        return out, LayerCache(linear, z, f.shape)

    def backward_layer(self, layer: Layer, grad: Tensor, cache: LayerCache) -> Tuple[Tensor, Dict[str, np.ndarray]]:
        self.check_deadline()
        with self._measure('other', 'b'):
            grad_z = activate_backward(layer.activation, cache.pre, grad.reshape(cache.pre.shape))
        with self._measure(layer.kind, 'b'):
            if isinstance(layer, ConvLayer):
                if isinstance(cache.linear, PatchMatrix):
                    grad_input, grad_w, grad_b = conv_linear_backward(layer, grad_z, cache.linear)
                else:
                    grad_input, grad_w, grad_b = conv_linear_backward_loop(layer, grad_z, cache.linear)
                return grad_input, {'weights': grad_w, 'bias': grad_b}
            if isinstance(layer, PoolLayer):
                if self.has(POOL_VEC):
                    grad_input, grad_b = pool_linear_backward(layer, grad_z, cache.linear)
                else:
                    grad_input, grad_b = pool_linear_backward(layer, grad_z, cache.linear, pool_backward_loop)
                return grad_input, ({} if grad_b is None else {'bias': grad_b})
            grad_input, grad_w, grad_b = full_linear_backward(layer, grad_z, cache.linear, cache.input_shape)
            return grad_input, {'weights': grad_w, 'bias': grad_b}

    def loss(self, head: LossHead, pred: Tensor, targets: np.ndarray) -> Tuple[float, Tensor]:
        with self._measure('other', 'f'):
            value = loss_forward(head, pred, targets)
        with self._measure('other', 'b'):
            grad = loss_backward(head, pred, targets)
        return value, grad


def make_executor(name, timer: Optional[ComponentTimer] = None, deadline: Optional[Deadline] = None,
                  workers: Optional[int] = None) -> Executor:
    """
    Executor for a variant name ('imp1'..'imp6', any case) or VariantId.

    Raises:
        UsageError: For an unknown name
    """
    variant = name if isinstance(name, VariantId) else VariantId.parse(name)
    return Executor(variant, timer, deadline, workers)


@dataclass
class BatchResult:
    """
    Attributes:
        outputs (Tensor): Network outputs for the batch, in sample order
        gradients (Optional[Gradients]): Present when targets were given
    """
    outputs: Tensor
    gradients: Optional[Gradients] = None


def _sum_in_order(per_sample: List[List[Dict[str, np.ndarray]]]) -> List[Dict[str, np.ndarray]]:
    total = [{name: grad.copy() for name, grad in layer.items()} for layer in per_sample[0]]
    for sample in per_sample[1:]:
        for layer_total, layer in zip(total, sample):
            for name, grad in layer.items():
                layer_total[name] += grad
    return total


def run_batch(executor: Executor, net: Network, batch: Tensor,
              targets: Optional[np.ndarray] = None) -> BatchResult:
    """
    Run one batch through a network under a variant.

    Batch-vectorized variants assemble the whole batch into each layer's patch
    matrix. The others run every sample separately: imp2 maps samples over a
    thread pool, the rest iterate serially. The loss is always the batch mean,
    and per-sample parameter gradients are summed in sample order.

    Args:
        executor: Variant executor
        net: Network
        batch: (N, C, H, W) input
        targets: Class indices / one-hot rows / target images; None for inference

    Returns:
        BatchResult with outputs, and gradients when targets were given

    Raises:
        TrainingError: If the loss is not finite
        DeadlineExceededError: If the executor's deadline expires
    """
    if executor.has(BATCH_VEC) and not executor.variant.concurrent:
        activations = forward(net, batch, executor, executor.deadline)
        if targets is None:
            return BatchResult(activations.result)
        return BatchResult(activations.result, backward(net, activations, targets, executor, executor.deadline))

    samples = [batch[n:n + 1] for n in range(batch.shape[0])]

    def sample_forward(sample: Tensor) -> ForwardPass:
        executor.check_deadline()
        return forward(net, sample, executor, executor.deadline)

    if executor.variant.concurrent:
        with ThreadPoolExecutor(max_workers=executor.workers) as pool:
            passes = list(pool.map(sample_forward, samples))
    else:
        passes = [sample_forward(sample) for sample in samples]

    outputs = np.concatenate([p.result for p in passes], axis=0)
    if targets is None:
        return BatchResult(outputs)

    loss, grad = executor.loss(net.head, outputs, targets)
    if not np.isfinite(loss):
        failing = [i for i in (first_nonfinite_layer(p) for p in passes) if i is not None]
        index = min(failing) if failing else None
        raise TrainingError(f"Loss is not finite ({loss})", index,
                            net.layers[index].kind if index is not None else 'loss')

    def sample_backward(n: int):
        return propagate(net, passes[n], grad[n:n + 1], executor, executor.deadline)

    if executor.variant.concurrent:
        with ThreadPoolExecutor(max_workers=executor.workers) as pool:
            results = list(pool.map(sample_backward, range(len(samples))))
    else:
        results = [sample_backward(n) for n in range(len(samples))]

    params = _sum_in_order([r[0] for r in results])
    grad_input = np.concatenate([r[1] for r in results], axis=0)
    return BatchResult(outputs, Gradients(params, grad_input, loss))


def train_step(executor: Executor):
    """Step function for network.train() that routes every batch through run_batch."""
    def step(net: Network, batch: Tensor, targets: np.ndarray) -> Gradients:
        return run_batch(executor, net, batch, targets).gradients
    return step
