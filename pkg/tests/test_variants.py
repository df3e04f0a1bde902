"""
Unit tests for variants.py

Covers:
- Variant parsing and ladder flags
- Loop kernels against the vectorized kernels
- Cross-variant agreement of outputs and gradients
- Component timing and deadlines
"""

import time
import unittest
from pathlib import Path
import sys

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.error_handler import Deadline, DeadlineExceededError, TrainingError, UsageError
from src.layers import conv_backward, conv_forward, init_conv
from src.network import TrainConfig, backward, build_network, forward, spec_from_dict, train
from src.variants import (BATCH_VEC, CONV_VEC, FC_VEC, FEATMAP_VEC, POOL_VEC, ComponentTimer, VariantId,
                          conv_backward_loop, conv_forward_loop, featmap_patchify_per_channel, make_executor,
                          pool_backward_loop, pool_forward_loop, run_batch, train_step)
from src.dataset_loader import synth_digits
from src.vectorize_ops import PoolGeometry, im2col, pool_backward, pool_forward


def mixed_network(seed: int = 0, mode: str = 'max'):
    """Two conv layers with biased pooling between them and a classifier head."""
    return build_network(spec_from_dict({
        'input_shape': [2, 9, 9],
        'layers': [{'kind': 'conv', 'maps': 3, 'kernel': 2, 'activation': 'tanh'},
                   {'kind': 'pool', 'size': 2, 'stride': 2, 'mode': mode, 'bias': True, 'activation': 'sigmoid'},
                   {'kind': 'conv', 'maps': 2, 'kernel': 2, 'activation': 'relu'},
                   {'kind': 'full', 'units': 4, 'activation': 'identity'}],
        'seed': seed,
    }))


class TestVariantId(unittest.TestCase):
    """Test cases for VariantId."""

    def test_parse_any_case(self):
        """Test that names parse case-insensitively."""
        self.assertIs(VariantId.parse('IMP3'), VariantId.IMP3)
        self.assertIs(VariantId.parse(' imp6 '), VariantId.IMP6)

    def test_parse_unknown(self):
        """Test that an unknown name raises UsageError listing the variants."""
        with self.assertRaises(UsageError) as ctx:
            VariantId.parse('imp7')
        self.assertIn('imp1', str(ctx.exception))

    def test_ladder_flags(self):
        """Test the flags enabled at each rung."""
        self.assertEqual(VariantId.IMP1.flags, {FC_VEC})
        self.assertEqual(VariantId.IMP2.flags, {FC_VEC, BATCH_VEC})
        self.assertEqual(VariantId.IMP4.flags, {FC_VEC, CONV_VEC, POOL_VEC})
        self.assertEqual(VariantId.IMP6.flags, {FC_VEC, CONV_VEC, POOL_VEC, FEATMAP_VEC, BATCH_VEC})
        self.assertTrue(VariantId.IMP2.concurrent)
        self.assertFalse(VariantId.IMP6.concurrent)

    def test_each_rung_adds_flags(self):
        """Test that flags only grow from imp3 to imp6."""
        rungs = [VariantId.IMP3, VariantId.IMP4, VariantId.IMP5, VariantId.IMP6]
        for lower, upper in zip(rungs, rungs[1:]):
            self.assertLess(lower.flags, upper.flags)


class TestLoopKernels(unittest.TestCase):
    """Test cases for the loop kernels used by the less vectorized variants."""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_conv_loop_matches_vectorized(self):
        """Test loop convolution forward and backward against im2col convolution."""
        for stride in (1, 2):
            layer = init_conv(3, 2, (3, 2), self.rng, stride=stride, activation='tanh')
            f = self.rng.standard_normal((2, 3, 7, 6))
            out, cache = conv_forward(layer, f)
            out_loop, cache_loop = conv_forward_loop(layer, f)
            assert_allclose(out_loop, out, atol=1e-12)
            grad = self.rng.standard_normal(out.shape)
            for a, b in zip(conv_backward_loop(layer, grad, cache_loop), conv_backward(layer, grad, cache)):
                assert_allclose(a, b, atol=1e-12)

    def test_pool_loop_matches_vectorized(self):
        """Test loop pooling forward and backward in every mode, overlapping windows included."""
        f = self.rng.standard_normal((2, 2, 5, 5))
        for mode in ('max', 'avg'):
            for stride in (1, 2):
                geometry = PoolGeometry(5, 5, 2, 2, stride, mode, channels=2, batch=2)
                out, arg = pool_forward(f, geometry)
                out_loop, arg_loop = pool_forward_loop(f, geometry)
                assert_array_equal(out_loop, out)
                if mode == 'max':
                    assert_array_equal(arg_loop, arg)
                grad = self.rng.standard_normal(out.shape)
                for flag in ('exact', 'nearest'):
                    assert_allclose(pool_backward_loop(grad, geometry, arg_loop, flag),
                                    pool_backward(grad, geometry, arg, flag), atol=1e-12)

    def test_per_channel_patchify(self):
        """Test that stacking per-map patch matrices equals the one-pass patch matrix."""
        f = self.rng.standard_normal((3, 4, 6, 6))
        assert_array_equal(featmap_patchify_per_channel(f, (3, 3), 1).mat, im2col(f, (3, 3), 1).mat)


class TestCrossVariant(unittest.TestCase):
    """Test cases for agreement across the ladder."""

    def setUp(self):
        rng = np.random.default_rng(1)
        self.batch = rng.uniform(size=(4, 2, 9, 9))
        self.targets = rng.integers(0, 4, size=4)

    def test_all_variants_agree(self):
        """Test outputs within 1e-10 and gradients within 1e-8 of imp1, for max and avg pooling."""
        for mode in ('max', 'avg'):
            net = mixed_network(seed=3, mode=mode)
            reference = run_batch(make_executor('imp1'), net, self.batch, self.targets)
            for variant in VariantId:
                result = run_batch(make_executor(variant, workers=2), net, self.batch, self.targets)
                assert_allclose(result.outputs, reference.outputs, atol=1e-10, err_msg=variant.value)
                self.assertAlmostEqual(result.gradients.loss, reference.gradients.loss, delta=1e-10)
                assert_allclose(result.gradients.input, reference.gradients.input, atol=1e-8)
                for got, expected in zip(result.gradients.params, reference.gradients.params):
                    self.assertEqual(set(got), set(expected))
                    for name in got:
                        assert_allclose(got[name], expected[name], atol=1e-8, err_msg=f"{variant.value} {name}")

    def test_imp6_equals_network_passes(self):
        """Test that the batch-vectorized variant equals a plain forward/backward."""
        net = mixed_network()
        grads = backward(net, forward(net, self.batch), self.targets)
        result = run_batch(make_executor('imp6'), net, self.batch, self.targets)
        assert_allclose(result.gradients.params[0]['weights'], grads.params[0]['weights'], atol=1e-12)

    def test_inference_only(self):
        """Test that omitting targets returns outputs without gradients."""
        result = run_batch(make_executor('imp2', workers=3), mixed_network(), self.batch)
        self.assertIsNone(result.gradients)
        self.assertEqual(result.outputs.shape, (4, 4))

    def test_nonfinite_loss(self):
        """Test that per-sample variants report the first non-finite layer."""
        net = mixed_network()
        conv = net.layers[2]
        broken = net.with_layers(list(net.layers[:2]) + [conv.with_params(bias=np.full_like(conv.bias, np.inf))]
                                 + list(net.layers[3:]))
        with self.assertRaises(TrainingError) as ctx:
            run_batch(make_executor('imp3'), broken, self.batch, self.targets)
        self.assertEqual(ctx.exception.layer_index, 2)

    def test_train_step_matches_default_training(self):
        """Test that training through every variant's step function matches vectorized training."""
        data = synth_digits(20, seed=0, size=10)
        spec = spec_from_dict({'input_shape': [1, 10, 10],
                               'layers': [{'kind': 'conv', 'maps': 2, 'kernel': 3, 'activation': 'tanh'},
                                          {'kind': 'pool', 'size': 2},
                                          {'kind': 'full', 'units': 10, 'activation': 'identity'}]})
        config = TrainConfig(learning_rate=0.1, batch_size=5)
        plain, _ = train(build_network(spec), data, config)
        for variant in VariantId:
            with self.subTest(variant=variant.value):
                stepped, _ = train(build_network(spec), data, config, step_fn=train_step(make_executor(variant)))
                for mine, reference in zip(stepped.layers, plain.layers):
                    for key, value in reference.params.items():
                        assert_allclose(mine.params[key], value, atol=1e-6)


class TestComponentTimer(unittest.TestCase):
    """Test cases for ComponentTimer and instrumented executors."""

    def test_fractions_sum_to_one(self):
        """Test that an instrumented run splits time across components."""
        timer = ComponentTimer()
        rng = np.random.default_rng(2)
        run_batch(make_executor('imp5', timer=timer), mixed_network(), rng.uniform(size=(3, 2, 9, 9)),
                  rng.integers(0, 4, size=3))
        fractions = timer.fractions()
        self.assertEqual(len(fractions), 8)
        self.assertAlmostEqual(sum(fractions.values()), 1.0)
        self.assertGreater(timer.totals()['conv_f'], 0.0)

    def test_empty_timer(self):
        """Test that an unused timer reports all-zero fractions."""
        self.assertEqual(set(ComponentTimer().fractions().values()), {0.0})

    def test_reset(self):
        """Test that reset clears the totals."""
        timer = ComponentTimer()
        with timer.measure('pool', 'b'):
            time.sleep(0.001)
        self.assertGreater(timer.totals()['pool_b'], 0.0)
        timer.reset()
        self.assertEqual(timer.totals()['pool_b'], 0.0)


class TestDeadline(unittest.TestCase):
    """Test cases for executor deadlines."""

    def test_expired_deadline_stops_the_batch(self):
        """Test that an expired deadline raises DeadlineExceededError."""
        deadline = Deadline(0.0)
        time.sleep(0.001)
        with self.assertRaises(DeadlineExceededError):
            run_batch(make_executor('imp1', deadline=deadline), mixed_network(), np.zeros((2, 2, 9, 9)))

    def test_unlimited_deadline(self):
        """Test that a None budget never expires."""
        self.assertFalse(Deadline(None).expired())


if __name__ == '__main__':
    unittest.main()
