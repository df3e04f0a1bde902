"""
Unit tests for grad_check.py
"""

import unittest
from pathlib import Path
import sys

import numpy as np
from numpy.testing import assert_allclose

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.grad_check import check_layer, check_network, numerical_gradient, relative_error
from src.layers import init_full
from src.selftest import tiny_network
from src.variants import make_executor


class TestNumericalGradient(unittest.TestCase):
    """Test cases for numerical_gradient and relative_error."""

    def test_quadratic(self):
        """Test the gradient of sum(x^2) is 2x and x is restored."""
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        original = x.copy()
        grad = numerical_gradient(lambda: float(np.sum(x ** 2)), x)
        assert_allclose(grad, 2.0 * original, atol=1e-8)
        assert_allclose(x, original)

    def test_relative_error(self):
        """Test the floor for tiny values and the empty case."""
        self.assertAlmostEqual(relative_error(np.array([1.0]), np.array([3.0])), 0.5)
        self.assertAlmostEqual(relative_error(np.array([1e-9]), np.array([0.0])), 1e-5)
        self.assertEqual(relative_error(np.zeros(0), np.zeros(0)), 0.0)


class TestChecks(unittest.TestCase):
    """Test cases for check_layer and check_network."""

    def test_check_layer_keys(self):
        """Test that every parameter and the input are reported."""
        layer = init_full(5, 3, np.random.default_rng(0), activation='tanh')
        errors = check_layer(layer, np.random.default_rng(1).standard_normal((2, 5)))
        self.assertEqual(set(errors), {'input', 'weights', 'bias'})
        self.assertLess(max(errors.values()), 1e-6)

    def test_check_layer_leaves_layer_untouched(self):
        """Test that probing does not modify the caller's parameters."""
        layer = init_full(4, 2, np.random.default_rng(0))
        before = layer.weights.copy()
        check_layer(layer, np.ones((1, 4)))
        assert_allclose(layer.weights, before)

    def test_check_network(self):
        """Test the whole-network gradient under the vectorized and a loop runner."""
        rng = np.random.default_rng(2)
        batch, targets = rng.standard_normal((3, 1, 4, 4)), rng.integers(0, 3, size=3)
        for runner in (None, make_executor('imp1')):
            kwargs = {} if runner is None else {'runner': runner}
            errors = check_network(tiny_network(seed=1), batch, targets, **kwargs)
            self.assertIn('layer0.weights', errors)
            self.assertLess(max(errors.values()), 1e-4)


if __name__ == '__main__':
    unittest.main()
