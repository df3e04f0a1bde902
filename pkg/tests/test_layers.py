"""
Unit tests for layers.py

Covers:
- Activations and their derivatives
- Convolution forward against a loop oracle, backward by finite differences
- Fully connected and pooling layers
- Loss heads (softmax cross-entropy, mean squared error)
"""

import unittest
from pathlib import Path
import sys

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.error_handler import IndexBoundsError, ShapeError, SpecError
from src.grad_check import check_layer, numerical_gradient, relative_error
from src.layers import (ConvLayer, FullLayer, LossHead, PoolLayer, activate, activate_backward, conv_backward,
                        conv_forward, full_forward, get_activation, glorot_uniform, init_conv, init_full,
                        layer_backward, layer_forward, loss_backward, loss_forward, pool_layer_forward, relu_grad,
                        sigmoid)
from src.tensor_core import checksum
from src.vectorize_ops import PoolGeometry, pool_forward

GRID_3x3 = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)


def loop_convolution(layer: ConvLayer, f: np.ndarray) -> np.ndarray:
    """Direct nested-loop valid convolution used as an oracle."""
    kh, kw = layer.kernel
    s = layer.stride
    batch, channels, height, width = f.shape
    out_h, out_w = (height - kh) // s + 1, (width - kw) // s + 1
    kernels = layer.weights.reshape(layer.out_channels, channels, kh, kw)
    out = np.zeros((batch, layer.out_channels, out_h, out_w))
    for n in range(batch):
        for k in range(layer.out_channels):
            for y in range(out_h):
                for x in range(out_w):
                    window = f[n, :, y * s:y * s + kh, x * s:x * s + kw]
                    out[n, k, y, x] = np.sum(window * kernels[k]) + layer.bias[k]
    return out


class TestActivations(unittest.TestCase):
    """Test cases for activation functions."""

    def test_relu_derivative_convention(self):
        """Test relu'(x) = 1 for x > 0, 0 for x < 0 and 0 at x = 0."""
        assert_array_equal(relu_grad(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 1.0])

    def test_sigmoid_values(self):
        """Test sigmoid(0) = 0.5 and saturation without overflow."""
        self.assertEqual(sigmoid(np.array([0.0]))[0], 0.5)
        with np.errstate(over='raise'):
            out = sigmoid(np.array([-1000.0, 1000.0]))
        assert_allclose(out, [0.0, 1.0])

    def test_derivatives_match_finite_differences(self):
        """Test each activation derivative against central differences."""
        z = np.linspace(-2.0, 2.0, 9) + 0.05
        for name in ('relu', 'sigmoid', 'tanh', 'identity'):
            grad = activate_backward(name, z, np.ones_like(z))
            numeric = (activate(name, z + 1e-6) - activate(name, z - 1e-6)) / 2e-6
            assert_allclose(grad, numeric, atol=1e-6, err_msg=name)

    def test_unknown_activation(self):
        """Test that an unknown tag raises SpecError."""
        with self.assertRaises(SpecError):
            get_activation('softplus')

    def test_activation_gradient_shape_check(self):
        """Test that mismatched gradient shapes raise ShapeError."""
        with self.assertRaises(ShapeError):
            activate_backward('tanh', np.zeros(3), np.zeros(4))


class TestInitialization(unittest.TestCase):
    """Test cases for parameter initialization."""

    def test_glorot_bounds(self):
        """Test that weights lie in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
        weights = glorot_uniform(20, 30, (30, 20), np.random.default_rng(0))
        self.assertLessEqual(np.abs(weights).max(), np.sqrt(6.0 / 50.0))

    def test_seeded(self):
        """Test that the same seed gives the same weights."""
        a = init_full(8, 4, np.random.default_rng(3))
        b = init_full(8, 4, np.random.default_rng(3))
        assert_array_equal(a.weights, b.weights)
        assert_array_equal(a.bias, np.zeros(4))

    def test_conv_shapes_and_dtype(self):
        """Test conv layer shapes and single precision."""
        layer = init_conv(3, 5, (2, 4), np.random.default_rng(0), dtype=np.float32)
        self.assertEqual(layer.weights.shape, (5, 2 * 4 * 3))
        self.assertEqual((layer.in_channels, layer.out_channels), (3, 5))
        self.assertEqual(layer.weights.dtype, np.float32)


class TestConvLayer(unittest.TestCase):
    """Test cases for convolution layers."""

    def test_top_left_picker(self):
        """Test a kernel that picks the patch's top-left element."""
        layer = ConvLayer(np.array([[1.0, 0.0, 0.0, 0.0]]), np.zeros(1), (2, 2), activation='identity')
        out, _ = conv_forward(layer, GRID_3x3)
        assert_array_equal(out[0, 0], [[1.0, 2.0], [4.0, 5.0]])

    def test_averaging_kernel(self):
        """Test the averaging kernel on [[1,2],[3,4]]."""
        layer = ConvLayer(np.full((1, 4), 0.25), np.zeros(1), (2, 2), activation='identity')
        out, _ = conv_forward(layer, np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert_array_equal(out.ravel(), [2.5])

    def test_matches_loop_convolution(self):
        """Test against the loop oracle on random 6x6x3 inputs with 3 kernels."""
        rng = np.random.default_rng(1)
        for stride in (1, 2):
            layer = init_conv(3, 3, (3, 3), rng, stride=stride, activation='identity')
            layer = layer.with_params(bias=rng.standard_normal(3))
            f = rng.standard_normal((2, 3, 6, 6))
            out, _ = conv_forward(layer, f)
            assert_allclose(out, loop_convolution(layer, f), atol=1e-10)

    def test_channel_mismatch(self):
        """Test that a wrong number of input maps raises ShapeError."""
        layer = init_conv(2, 1, (2, 2), np.random.default_rng(0))
        with self.assertRaises(ShapeError):
            conv_forward(layer, np.zeros((1, 3, 4, 4)))

    def test_bad_weight_shape(self):
        """Test that weights not divisible by the kernel area raise ShapeError."""
        with self.assertRaises(ShapeError):
            ConvLayer(np.zeros((2, 5)), np.zeros(2), (2, 2))

    def test_zero_gradient(self):
        """Test that a zero upstream gradient gives all-zero gradients."""
        rng = np.random.default_rng(2)
        layer = init_conv(2, 2, (2, 2), rng, activation='tanh')
        out, cache = conv_forward(layer, rng.standard_normal((1, 2, 4, 4)))
        grad_input, grad_w, grad_b = conv_backward(layer, np.zeros_like(out), cache)
        self.assertFalse(grad_input.any() or grad_w.any() or grad_b.any())

    def test_one_by_one_weight_gradient(self):
        """Test that a 1x1 identity kernel's weight gradient is sum(grad * input)."""
        layer = ConvLayer(np.array([[2.0]]), np.zeros(1), (1, 1), activation='identity')
        f = np.array([[1.0, 2.0], [3.0, 4.0]])
        grad = np.array([[[[0.5, -1.0], [2.0, 1.0]]]])
        _, cache = conv_forward(layer, f)
        grad_input, grad_w, grad_b = conv_backward(layer, grad, cache)
        self.assertAlmostEqual(grad_w[0, 0], np.sum(grad[0, 0] * f))
        self.assertAlmostEqual(grad_b[0], np.sum(grad))
        assert_allclose(grad_input[0, 0], 2.0 * grad[0, 0])

    def test_finite_difference(self):
        """Test a 4x4 input with 2 kernels of 2x2 against central differences."""
        rng = np.random.default_rng(3)
        layer = init_conv(1, 2, (2, 2), rng, activation='tanh')
        errors = check_layer(layer, rng.standard_normal((1, 1, 4, 4)))
        self.assertLess(max(errors.values()), 1e-4, errors)

    def test_forward_does_not_mutate_parameters(self):
        """Test that parameters are unchanged by a forward pass."""
        rng = np.random.default_rng(4)
        layer = init_conv(2, 3, (3, 3), rng)
        before = checksum(layer.weights, layer.bias)
        conv_forward(layer, rng.standard_normal((2, 2, 5, 5)))
        self.assertEqual(before, checksum(layer.weights, layer.bias))


class TestFullLayer(unittest.TestCase):
    """Test cases for fully connected layers."""

    def test_identity_weights(self):
        """Test W = I2, b = [1, 1], x = [3, 4] -> [4, 5]."""
        layer = FullLayer(np.eye(2), np.ones(2), activation='identity')
        out, _ = full_forward(layer, np.array([3.0, 4.0]))
        assert_array_equal(out, [4.0, 5.0])

    def test_flattens_image_batches(self):
        """Test that an (N, C, H, W) batch is flattened per sample."""
        rng = np.random.default_rng(0)
        layer = init_full(12, 5, rng, activation='identity')
        f = rng.standard_normal((3, 3, 2, 2))
        out, _ = full_forward(layer, f)
        assert_allclose(out, f.reshape(3, 12) @ layer.weights.T + layer.bias)

    def test_fan_in_mismatch(self):
        """Test that a wrong input size raises ShapeError."""
        layer = init_full(4, 2, np.random.default_rng(0))
        with self.assertRaises(ShapeError):
            full_forward(layer, np.zeros((2, 5)))

    def test_finite_difference(self):
        """Test full layer gradients against central differences for every activation."""
        rng = np.random.default_rng(1)
        for activation in ('sigmoid', 'tanh', 'identity'):
            layer = init_full(6, 3, rng, activation=activation)
            errors = check_layer(layer, rng.standard_normal((4, 6)))
            self.assertLess(max(errors.values()), 1e-4, (activation, errors))

    def test_gradient_input_shape(self):
        """Test that the input gradient keeps the input's image shape."""
        rng = np.random.default_rng(2)
        layer = init_full(8, 2, rng)
        f = rng.standard_normal((2, 2, 2, 2))
        out, cache = layer_forward(layer, f)
        grad_input, grads = layer_backward(layer, np.ones_like(out), cache)
        self.assertEqual(grad_input.shape, f.shape)
        self.assertEqual(set(grads), {'weights', 'bias'})


class TestPoolLayer(unittest.TestCase):
    """Test cases for pooling layers."""

    def test_reduces_to_pool_forward(self):
        """Test that no bias and identity activation equals pool_forward."""
        f = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        geometry = PoolGeometry(4, 4, 2, 2, 2, 'max', channels=3)
        out, _ = pool_layer_forward(PoolLayer(geometry), f)
        assert_array_equal(out, pool_forward(f, geometry)[0])

    def test_no_params_without_bias(self):
        """Test that a bias-free pooling layer has no parameters and no parameter gradients."""
        layer = PoolLayer(PoolGeometry(4, 4, 2, 2, 2, 'avg'))
        out, cache = layer_forward(layer, np.ones((1, 1, 4, 4)))
        _, grads = layer_backward(layer, np.ones_like(out), cache)
        self.assertEqual(layer.params, {})
        self.assertEqual(grads, {})

    def test_bias_length_checked(self):
        """Test that a bias not matching the channel count raises ShapeError."""
        with self.assertRaises(ShapeError):
            PoolLayer(PoolGeometry(4, 4, 2, 2, 2, channels=2), bias=np.zeros(3))

    def test_finite_difference_with_bias_and_activation(self):
        """Test pooling with bias and tanh against central differences (max and avg, overlapping)."""
        rng = np.random.default_rng(1)
        for mode in ('max', 'avg'):
            for stride in (1, 2):
                layer = PoolLayer(PoolGeometry(5, 5, 2, 2, stride, mode, channels=2), rng.standard_normal(2), 'tanh')
                errors = check_layer(layer, rng.standard_normal((2, 2, 5, 5)))
                self.assertLess(max(errors.values()), 1e-4, (mode, stride, errors))

    def test_nearest_differs_from_exact(self):
        """Test that nearest-neighbour backward is not the exact average gradient."""
        geometry = PoolGeometry(4, 4, 2, 2, 2, 'avg')
        f = np.random.default_rng(2).standard_normal((1, 1, 4, 4))
        exact, approx = PoolLayer(geometry), PoolLayer(geometry, backward_mode='nearest')
        out, cache = layer_forward(exact, f)
        grad_exact, _ = layer_backward(exact, np.ones_like(out), cache)
        grad_approx, _ = layer_backward(approx, np.ones_like(out), cache)
        assert_allclose(grad_approx, 4.0 * grad_exact)


class TestLossHeads(unittest.TestCase):
    """Test cases for loss_forward and loss_backward."""

    def test_uniform_softmax(self):
        """Test that 10 zero logits give ln 10 for any class."""
        head = LossHead('softmax-cross-entropy')
        self.assertAlmostEqual(loss_forward(head, np.zeros((1, 10)), np.array([7])), np.log(10.0), places=12)

    def test_one_hot_matches_indices(self):
        """Test that one-hot targets give the same loss as class indices."""
        head = LossHead()
        logits = np.random.default_rng(0).standard_normal((4, 5))
        classes = np.array([0, 3, 4, 1])
        self.assertAlmostEqual(loss_forward(head, logits, classes), loss_forward(head, logits, np.eye(5)[classes]))

    def test_shift_invariance(self):
        """Test that adding a constant to every logit leaves the loss unchanged."""
        head = LossHead()
        logits = np.random.default_rng(1).standard_normal((3, 4))
        targets = np.array([1, 0, 3])
        self.assertAlmostEqual(loss_forward(head, logits, targets), loss_forward(head, logits + 100.0, targets),
                               delta=1e-10)

    def test_large_logits_stable(self):
        """Test that large logits do not overflow."""
        loss = loss_forward(LossHead(), np.array([[1000.0, 0.0]]), np.array([0]))
        self.assertTrue(np.isfinite(loss))
        self.assertAlmostEqual(loss, 0.0)

    def test_class_out_of_range(self):
        """Test that a class index outside [0, K) raises IndexBoundsError."""
        with self.assertRaises(IndexBoundsError):
            loss_forward(LossHead(), np.zeros((2, 3)), np.array([0, 3]))

    def test_ce_gradient(self):
        """Test the cross-entropy gradient against central differences within 1e-6."""
        head = LossHead()
        logits = np.random.default_rng(2).standard_normal((3, 4))
        targets = np.array([2, 0, 1])
        numeric = numerical_gradient(lambda: loss_forward(head, logits, targets), logits)
        self.assertLess(relative_error(loss_backward(head, logits, targets), numeric), 1e-6)

    def test_mse(self):
        """Test MSE is 0 for equal tensors and its gradient is exact."""
        head = LossHead('mean-squared-error')
        rng = np.random.default_rng(3)
        pred, target = rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 1, 3, 3))
        self.assertEqual(loss_forward(head, pred, pred.copy()), 0.0)
        numeric = numerical_gradient(lambda: loss_forward(head, pred, target), pred)
        self.assertLess(relative_error(loss_backward(head, pred, target), numeric), 1e-6)
        self.assertFalse(head.is_classifier)

    def test_mse_shape_mismatch(self):
        """Test that MSE with mismatched shapes raises ShapeError."""
        with self.assertRaises(ShapeError):
            loss_forward(LossHead('mean-squared-error'), np.zeros((2, 3)), np.zeros((3, 2)))

    def test_unknown_loss(self):
        """Test that an unknown loss kind raises SpecError."""
        with self.assertRaises(SpecError):
            LossHead('hinge')


if __name__ == '__main__':
    unittest.main()
