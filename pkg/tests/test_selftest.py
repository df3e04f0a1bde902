"""
Unit tests for selftest.py
"""

import unittest
from pathlib import Path
import sys
from unittest.mock import patch

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src import selftest
from src.network import infer_shapes

SUITES = ['adjoint', 'layer-gradients', 'network-gradient', 'cross-variant', 'batch-equivalence',
          'model-roundtrip', 'parser-fuzz']


class TestHelpers(unittest.TestCase):
    """Test cases for the random instance helpers."""

    def test_random_specs_chain(self):
        """Test that random specs are valid and seeded."""
        rng_a, rng_b = np.random.default_rng(4), np.random.default_rng(4)
        for _ in range(10):
            spec = selftest.random_small_spec(rng_a)
            self.assertEqual(spec, selftest.random_small_spec(rng_b))
            self.assertEqual(infer_shapes(spec)[-1], (3,))

    def test_tiny_network(self):
        """Test the fixed tiny network layout."""
        net = selftest.tiny_network()
        self.assertEqual([layer.kind for layer in net.layers], ['conv', 'pool', 'full'])


class TestRunSelftest(unittest.TestCase):
    """Test cases for run_selftest."""

    def test_quick_run_passes(self):
        """Test that every quick suite passes, in order."""
        results = selftest.run_selftest(quick=True)
        self.assertEqual([r.name for r in results], SUITES)
        failed = [f"{r.name}: {r.detail}" for r in results if not r.passed]
        self.assertEqual(failed, [])

    def test_raising_suite_reported_as_failure(self):
        """Test that a suite raising an exception is reported, not propagated."""
        with patch.object(selftest, '_adjoint', side_effect=RuntimeError('boom')):
            results = selftest.run_selftest(quick=True)
        self.assertFalse(results[0].passed)
        self.assertIn('boom', results[0].detail)

    def test_parser_fuzz_suite(self):
        """Test that mutated IDX and PGM files only ever raise ParseError."""
        passed, detail = selftest._parser_fuzz(np.random.default_rng(9), 500)
        self.assertTrue(passed, detail)

    @pytest.mark.slow
    def test_full_run_passes(self):
        """Test the full case counts."""
        self.assertTrue(all(r.passed for r in selftest.run_selftest(quick=False)))


if __name__ == '__main__':
    unittest.main()
