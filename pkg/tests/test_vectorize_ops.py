"""
Unit tests for vectorize_ops.py

Covers:
- Convolution geometry and im2col / col2im, including the adjoint identity
- Pooling index maps (non-overlapping and overlapping)
- pool_forward against brute-force loops, pool_backward in exact and nearest modes
"""

import unittest
from pathlib import Path
import sys

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.error_handler import GeometryError
from src.vectorize_ops import (ConvGeometry, PatchMatrix, PoolGeometry, build_pool_map, col2im, conv_gather_index,
                               im2col, pool_backward, pool_forward)

GRID_3x3 = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]])
GRID_4x4 = np.arange(1.0, 17.0).reshape(4, 4)


class TestConvGeometry(unittest.TestCase):
    """Test cases for ConvGeometry."""

    def test_output_extents(self):
        """Test out_h/out_w = floor((H - k) / s) + 1."""
        g = ConvGeometry(7, 6, 2, 3, 3, 2, stride=2)
        self.assertEqual((g.out_h, g.out_w), (3, 3))
        self.assertEqual(g.patch_len, 3 * 2 * 2)
        self.assertEqual(g.n_cols, 3 * 3 * 3)

    def test_kernel_too_large(self):
        """Test that a kernel larger than the image raises GeometryError."""
        with self.assertRaises(GeometryError):
            ConvGeometry(3, 3, 1, 1, 4, 2)

    def test_bad_stride(self):
        """Test that stride 0 raises GeometryError."""
        with self.assertRaises(GeometryError):
            ConvGeometry(3, 3, 1, 1, 2, 2, stride=0)

    def test_for_input_promotes_shapes(self):
        """Test geometry construction from 2-D and 4-D shapes."""
        self.assertEqual(ConvGeometry.for_input((5, 6), (2, 2)).input_shape, (1, 1, 5, 6))
        self.assertEqual(ConvGeometry.for_input((4, 3, 5, 6), (2, 2)).input_shape, (4, 3, 5, 6))

    def test_gather_index_cached_and_read_only(self):
        """Test that the gather index is cached per geometry and immutable."""
        g = ConvGeometry(5, 5, 2, 1, 3, 3)
        self.assertIs(conv_gather_index(g), conv_gather_index(g))
        self.assertFalse(conv_gather_index(g).flags.writeable)


class TestIm2col(unittest.TestCase):
    """Test cases for im2col."""

    def test_hand_example(self):
        """Test the 3x3 image with a 2x2 kernel."""
        patches = im2col(GRID_3x3, (2, 2))
        self.assertIsInstance(patches, PatchMatrix)
        expected = np.array([[1, 2, 4, 5], [2, 3, 5, 6], [4, 5, 7, 8], [5, 6, 8, 9]], dtype=float).T
        assert_array_equal(patches.mat, expected)

    def test_one_by_one_kernel(self):
        """Test that a 1x1 kernel gives a single row equal to the data in linear order."""
        f = np.random.default_rng(0).standard_normal((4, 5))
        patches = im2col(f, (1, 1))
        self.assertEqual(patches.shape, (1, 20))
        assert_array_equal(patches.mat[0], f.ravel())

    def test_kernel_equals_image(self):
        """Test that a full-size kernel gives one column equal to the flattened image."""
        patches = im2col(GRID_3x3, (3, 3))
        self.assertEqual(patches.shape, (9, 1))
        assert_array_equal(patches.mat[:, 0], GRID_3x3.ravel())

    def test_multichannel_rows_are_channel_blocks(self):
        """Test that rows are ordered c*kh*kw + i*kw + j."""
        f = np.stack([GRID_3x3, 10 * GRID_3x3])[None]
        patches = im2col(f, (2, 2))
        self.assertEqual(patches.shape, (8, 4))
        assert_array_equal(patches.mat[:4], im2col(GRID_3x3, (2, 2)).mat)
        assert_array_equal(patches.mat[4:], 10 * im2col(GRID_3x3, (2, 2)).mat)

    def test_batch_is_outermost_across_columns(self):
        """Test that each sample's columns are contiguous and in batch order."""
        rng = np.random.default_rng(1)
        f = rng.standard_normal((3, 2, 5, 5))
        patches = im2col(f, (3, 3))
        per_sample = patches.geometry.out_h * patches.geometry.out_w
        for n in range(3):
            assert_array_equal(patches.mat[:, n * per_sample:(n + 1) * per_sample], im2col(f[n], (3, 3)).mat)

    def test_stride(self):
        """Test a stride-2 unroll of a 4x4 image."""
        patches = im2col(GRID_4x4, (2, 2), stride=2)
        assert_array_equal(patches.mat[:, 0], [1, 2, 5, 6])
        assert_array_equal(patches.mat[:, 3], [11, 12, 15, 16])

    def test_kernel_too_large(self):
        """Test that a kernel larger than the image raises GeometryError."""
        with self.assertRaises(GeometryError):
            im2col(GRID_3x3, (4, 1))


class TestCol2im(unittest.TestCase):
    """Test cases for col2im."""

    def test_membership_counts(self):
        """Test that an all-ones gradient gives patch-membership counts."""
        geometry = im2col(GRID_3x3, (2, 2)).geometry
        out = col2im(np.ones((4, 4)), geometry)
        assert_array_equal(out[0, 0], [[1, 2, 1], [2, 4, 2], [1, 2, 1]])

    def test_one_by_one_round_trip(self):
        """Test col2im(im2col(f)) == f for a 1x1 kernel."""
        f = np.random.default_rng(2).standard_normal((2, 3, 4, 4))
        assert_array_equal(col2im(im2col(f, (1, 1))), f)

    def test_zero_gradient(self):
        """Test that a zero gradient gives a zero tensor."""
        geometry = ConvGeometry(5, 5, 2, 2, 3, 3)
        assert_array_equal(col2im(np.zeros((geometry.patch_len, geometry.n_cols)), geometry),
                           np.zeros(geometry.input_shape))

    def test_geometry_mismatch(self):
        """Test that a gradient of the wrong shape raises GeometryError."""
        with self.assertRaises(GeometryError):
            col2im(np.zeros((3, 3)), ConvGeometry(3, 3, 1, 1, 2, 2))

    def test_bare_matrix_needs_geometry(self):
        """Test that a bare matrix without geometry raises GeometryError."""
        with self.assertRaises(GeometryError):
            col2im(np.zeros((4, 4)))

    def test_adjoint_identity(self):
        """Test <im2col(f), G> == <f, col2im(G)> over 100 random geometries."""
        rng = np.random.default_rng(3)
        for _ in range(100):
            height, width = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            channels, batch = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            kh, kw = int(rng.integers(1, height + 1)), int(rng.integers(1, width + 1))
            stride = int(rng.integers(1, 3))
            g = ConvGeometry(height, width, channels, batch, kh, kw, stride)
            f = rng.standard_normal(g.input_shape)
            grad = rng.standard_normal((g.patch_len, g.n_cols))
            lhs = np.sum(im2col(f, (kh, kw), stride).mat * grad)
            rhs = np.sum(f * col2im(grad, g))
            self.assertAlmostEqual(lhs, rhs, delta=1e-10 * max(1.0, abs(lhs)))

    def test_one_hot_reconstruction(self):
        """Test that each element appearing in a patch is recovered by col2im of its entries."""
        f = np.random.default_rng(4).standard_normal((1, 1, 4, 4))
        patches = im2col(f, (2, 2))
        counts = col2im(np.ones(patches.shape), patches.geometry)
        assert_allclose(col2im(patches) / counts, f)


class TestPoolMap(unittest.TestCase):
    """Test cases for build_pool_map."""

    def test_non_overlapping(self):
        """Test 4x4 input, 2x2 window, s=2: 16 pairs, 4 targets of 4 sources each."""
        index_map = build_pool_map(PoolGeometry(4, 4, 2, 2, 2))
        self.assertEqual(index_map.size, 16)
        self.assertEqual(index_map.target_len, 4)
        assert_array_equal(index_map.bucket_counts(), [4, 4, 4, 4])
        self.assertEqual(len(set(index_map.source_index.tolist())), 16)

    def test_identity_window(self):
        """Test that a 1x1 window with stride 1 is the identity map."""
        index_map = build_pool_map(PoolGeometry(3, 3, 1, 1, 1))
        assert_array_equal(index_map.source_index, np.arange(9))
        assert_array_equal(index_map.target_index, np.arange(9))

    def test_overlapping_center_in_every_window(self):
        """Test 3x3 input, 2x2 window, s=1: the center element appears in all 4 windows."""
        geometry = PoolGeometry(3, 3, 2, 2, 1)
        index_map = build_pool_map(geometry)
        self.assertTrue(geometry.overlapping)
        self.assertEqual(index_map.target_len, 4)
        self.assertEqual(int(np.sum(index_map.source_index == 4)), 4)
        self.assertEqual(index_map.size, geometry.out_h * geometry.out_w * 2 * 2)

    def test_window_exceeds_input(self):
        """Test that a window larger than the input raises GeometryError."""
        with self.assertRaises(GeometryError):
            PoolGeometry(2, 2, 3, 3, 1)

    def test_unknown_mode(self):
        """Test that an unknown pooling mode raises GeometryError."""
        with self.assertRaises(GeometryError):
            PoolGeometry(4, 4, 2, 2, 2, mode='min')


class TestPoolForward(unittest.TestCase):
    """Test cases for pool_forward."""

    def test_max(self):
        """Test 2x2 max pooling with stride 2 on the 4x4 grid."""
        out, arg = pool_forward(GRID_4x4, PoolGeometry(4, 4, 2, 2, 2, 'max'))
        assert_array_equal(out[0, 0], [[6, 8], [14, 16]])
        assert_array_equal(arg, [5, 7, 13, 15])

    def test_avg(self):
        """Test 2x2 average pooling with stride 2 on the 4x4 grid."""
        out, arg = pool_forward(GRID_4x4, PoolGeometry(4, 4, 2, 2, 2, 'avg'))
        assert_array_equal(out[0, 0], [[3.5, 5.5], [11.5, 13.5]])
        self.assertIsNone(arg)

    def test_identity_window(self):
        """Test that a 1x1 window returns the input."""
        f = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        out, _ = pool_forward(f, PoolGeometry(4, 4, 1, 1, 1))
        assert_array_equal(out, f)

    def test_tie_breaks_to_lowest_index(self):
        """Test that equal values pick the lowest linear index."""
        _, arg = pool_forward(np.ones((2, 2)), PoolGeometry(2, 2, 2, 2, 2))
        assert_array_equal(arg, [0])

    def test_matches_brute_force(self):
        """Test max and avg pooling against direct window loops, overlapping included."""
        rng = np.random.default_rng(1)
        for _ in range(30):
            size = int(rng.integers(3, 8))
            window = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            f = rng.standard_normal((2, 2, size, size))
            for mode, reduce in (('max', np.max), ('avg', np.mean)):
                geometry = PoolGeometry(size, size, window, window, stride, mode)
                out, _ = pool_forward(f, geometry)
                for y in range(geometry.out_h):
                    for x in range(geometry.out_w):
                        block = f[:, :, y * stride:y * stride + window, x * stride:x * stride + window]
                        assert_allclose(out[:, :, y, x], reduce(block, axis=(2, 3)), atol=1e-12)

    def test_plane_mismatch(self):
        """Test that an input with other plane extents raises GeometryError."""
        with self.assertRaises(GeometryError):
            pool_forward(np.zeros((5, 5)), PoolGeometry(4, 4, 2, 2, 2))


class TestPoolBackward(unittest.TestCase):
    """Test cases for pool_backward."""

    def test_exact_avg(self):
        """Test that gradient 4 over a 2x2 window spreads as 1 per cell."""
        out = pool_backward(np.array([[4.0]]), PoolGeometry(2, 2, 2, 2, 2, 'avg'))
        assert_array_equal(out[0, 0], [[1.0, 1.0], [1.0, 1.0]])

    def test_exact_max_routes_to_argmax(self):
        """Test that the gradient goes to the recorded winner."""
        geometry = PoolGeometry(2, 2, 2, 2, 2, 'max')
        _, arg = pool_forward(np.array([[0.0, 1.0], [2.0, 3.0]]), geometry)
        out = pool_backward(np.array([[1.0]]), geometry, arg)
        assert_array_equal(out[0, 0], [[0.0, 0.0], [0.0, 1.0]])

    def test_nearest_upscales(self):
        """Test that nearest-neighbour mode copies the gradient unscaled."""
        out = pool_backward(np.array([[2.5]]), PoolGeometry(2, 2, 2, 2, 2, 'max'), mode_flag='nearest')
        assert_array_equal(out[0, 0], np.full((2, 2), 2.5))

    def test_nearest_alias(self):
        """Test that 'paper-nn' selects the same gradient as 'nearest' and unknown modes are rejected."""
        geometry = PoolGeometry(4, 4, 2, 2, 2, 'avg')
        grad = np.arange(4.0).reshape(2, 2)
        assert_array_equal(pool_backward(grad, geometry, mode_flag='paper-nn'),
                           pool_backward(grad, geometry, mode_flag='nearest'))
        with self.assertRaises(ValueError):
            pool_backward(grad, geometry, mode_flag='linear')

    def test_exact_max_requires_arg(self):
        """Test that exact max backward without an ArgIndex raises GeometryError."""
        with self.assertRaises(GeometryError):
            pool_backward(np.ones((1, 1)), PoolGeometry(2, 2, 2, 2, 2, 'max'))

    def test_extent_mismatch(self):
        """Test that a gradient with the wrong pooled extents raises GeometryError."""
        with self.assertRaises(GeometryError):
            pool_backward(np.ones((3, 3)), PoolGeometry(4, 4, 2, 2, 2, 'avg'))

    def test_unknown_mode_flag(self):
        """Test that an unknown backward mode raises ValueError."""
        with self.assertRaises(ValueError):
            pool_backward(np.ones((1, 1)), PoolGeometry(2, 2, 2, 2, 2, 'avg'), mode_flag='bilinear')

    def test_overlapping_adjoint(self):
        """Test <pool(f), G> == <f, pool_backward(G)> for overlapping average pooling."""
        rng = np.random.default_rng(2)
        geometry = PoolGeometry(6, 6, 3, 3, 1, 'avg', channels=2, batch=2)
        f = rng.standard_normal(geometry.input_shape)
        grad = rng.standard_normal(geometry.output_shape)
        out, _ = pool_forward(f, geometry)
        self.assertAlmostEqual(np.sum(out * grad), np.sum(f * pool_backward(grad, geometry)), places=10)

    def test_dtype_preserved(self):
        """Test that single-precision gradients stay single precision."""
        out = pool_backward(np.ones((1, 1, 2, 2), dtype=np.float32), PoolGeometry(4, 4, 2, 2, 2, 'avg'))
        self.assertEqual(out.dtype, np.float32)


if __name__ == '__main__':
    unittest.main()
