"""
Gradient Check Module

Central finite-difference checks of the analytic gradients of layers and whole
networks. A layer is checked against the scalar loss sum(output * R) for a
fixed random R, so the upstream gradient is R; a network is checked against
its own loss head.

Invoked by: selftest, tests
Invokes: layers, network
"""

from typing import Callable, Dict, Optional

import numpy as np

from src.layers import Layer, layer_backward, layer_forward, loss_forward
from src.network import VECTORIZED, LayerRunner, Network, backward, forward

DEFAULT_STEP = 1e-5


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """
    Central differences of f() with respect to every entry of x.

    f must read x (which is perturbed in place); every entry is restored after
    its probe.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=['multi_index'], op_flags=['readwrite'])
    while not it.finished:
        index = it.multi_index
        original = x[index]
        x[index] = original + h
        plus = f()
        x[index] = original - h
        minus = f()
        x[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
        it.iternext()
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a| + |n|, floor) over all entries; 0 for empty arrays."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _copy_layer(layer: Layer) -> Layer:
    params = {name: value.copy() for name, value in layer.params.items()}
    return layer.with_params(**params) if params else layer


def check_layer(layer: Layer, x: np.ndarray, seed: int = 0, h: float = DEFAULT_STEP,
                runner: Optional[LayerRunner] = None) -> Dict[str, float]:
    """
    Max relative error of the input and parameter gradients of one layer.

    Returns:
        {'input': err, '<param>': err, ...}
    """
    layer = _copy_layer(layer)
    x = np.array(x, dtype=np.float64, copy=True)
    forward_fn = runner.forward_layer if runner is not None else layer_forward
    backward_fn = runner.backward_layer if runner is not None else layer_backward

    out, cache = forward_fn(layer, x)
    projection = np.random.default_rng(seed).standard_normal(out.shape)
    grad_input, grads = backward_fn(layer, projection, cache)

    def loss() -> float:
        return float(np.sum(forward_fn(layer, x)[0] * projection))

    errors = {'input': relative_error(grad_input.reshape(x.shape), numerical_gradient(loss, x, h))}
    for name, param in layer.params.items():
        errors[name] = relative_error(grads[name], numerical_gradient(loss, param, h))
    return errors


def check_network(net: Network, batch: np.ndarray, targets: np.ndarray, h: float = DEFAULT_STEP,
                  runner: LayerRunner = VECTORIZED) -> Dict[str, float]:
    """
    Max relative error of every gradient of the batch-mean loss.

    Returns:
        {'input': err, 'layer0.weights': err, 'layer0.bias': err, ...}
    """
    net = net.with_layers([_copy_layer(layer) for layer in net.layers])
    batch = np.array(batch, dtype=np.float64, copy=True)
    grads = backward(net, forward(net, batch, runner), targets, runner)

    def loss() -> float:
        return loss_forward(net.head, forward(net, batch, runner).result, targets)

    errors = {'input': relative_error(grads.input, numerical_gradient(loss, batch, h))}
    for index, layer in enumerate(net.layers):
        for name, param in layer.params.items():
            errors[f"layer{index}.{name}"] = relative_error(grads.params[index][name],
                                                            numerical_gradient(loss, param, h))
    return errors
