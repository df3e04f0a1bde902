"""
VCNN - Vectorized Convolutional Neural Network Framework

A small CNN framework whose convolution, pooling and fully connected layers are
expressed as matrix products over patch matrices, with a ladder of six
progressively more vectorized implementations and a benchmark harness that
measures throughput, batch-size effects and per-component time.
"""

__version__ = "1.0.0"
