"""
Self-Test Module

Oracle suites run by `vcnn.py selftest`: each suite exercises one correctness
property of the framework on randomized instances and reports pass/fail with
a short detail line.

Suites:
    adjoint            ⟨im2col(f), G⟩ == ⟨f, col2im(G)⟩ over random geometries
    layer-gradients    finite-difference checks of conv, pool and full layers
    network-gradient   finite-difference check of a tiny conv/pool/full network
    cross-variant      all six variants agree on outputs and gradients
    batch-equivalence  batched forward == concatenated per-sample forwards
    model-roundtrip    ModelFile encode/decode is bit-exact
    parser-fuzz        mutated IDX/PGM headers only ever raise ParseError

Invoked by: vcnn
Invokes: vectorize_ops, layers, network, variants, grad_check, storage_manager, dataset_loader
"""

import struct
import time
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from src.dataset_loader import parse_idx, parse_pgm
from src.error_handler import ParseError, SpecError
from src.grad_check import check_layer, check_network, relative_error
from src.layers import PoolLayer, init_conv, init_full
from src.logging_config import get_logger
from src.network import Network, NetworkSpec, build_network, forward, spec_from_dict
from src.storage_manager import decode_model, encode_model
from src.variants import VariantId, make_executor, run_batch
from src.vectorize_ops import ConvGeometry, PoolGeometry, col2im, im2col

logger = get_logger(__name__)

GRADIENT_TOLERANCE = 1e-4
OUTPUT_TOLERANCE = 1e-10
VARIANT_GRADIENT_TOLERANCE = 1e-8


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def random_small_spec(rng: np.random.Generator, seed: int = 0, outputs: int = 3) -> NetworkSpec:
    """Random small conv/pool/full classifier that chains correctly."""
    while True:
        channels = int(rng.integers(1, 4))
        size = int(rng.integers(6, 10))
        activation = str(rng.choice(['relu', 'tanh', 'sigmoid']))
        layers = [{'kind': 'conv', 'maps': int(rng.integers(1, 4)), 'kernel': int(rng.integers(2, 4)),
                   'activation': activation},
                  {'kind': 'pool', 'size': 2, 'stride': int(rng.integers(1, 3)),
                   'mode': str(rng.choice(['max', 'avg']))}]
        if rng.random() < 0.5:
            layers.append({'kind': 'conv', 'maps': int(rng.integers(1, 4)), 'kernel': 2, 'activation': activation})
        layers.append({'kind': 'full', 'units': int(rng.integers(2, 6)), 'activation': activation})
        layers.append({'kind': 'full', 'units': outputs, 'activation': 'identity'})
        try:
            return spec_from_dict({'input_shape': [channels, size, size], 'layers': layers, 'seed': seed})
        except SpecError:
            continue


def _adjoint(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(cases):
        batch, channels = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        height, width = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        kh, kw = int(rng.integers(1, height + 1)), int(rng.integers(1, width + 1))
        stride = int(rng.integers(1, 4))
        g = ConvGeometry(height, width, channels, batch, kh, kw, stride)
        f = rng.standard_normal(g.input_shape)
        grad = rng.standard_normal((g.patch_len, g.n_cols))
        lhs = float(np.sum(im2col(f, (kh, kw), stride).mat * grad))
        rhs = float(np.sum(f * col2im(grad, g)))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return worst <= OUTPUT_TOLERANCE, f"{cases} geometries, worst mismatch {worst:.2e}"


def _layer_gradients(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    worst = 0.0
    for case in range(cases):
        channels, size = int(rng.integers(1, 4)), int(rng.integers(4, 7))
        x = rng.standard_normal((2, channels, size, size))
        activation = str(rng.choice(['tanh', 'sigmoid', 'identity']))
        layers = [
            init_conv(channels, int(rng.integers(1, 4)), (2, 2), rng, activation=activation),
            init_full(channels * size * size, int(rng.integers(1, 5)), rng, activation=activation),
            PoolLayer(PoolGeometry(size, size, 2, 2, int(rng.integers(1, 3)), str(rng.choice(['max', 'avg'])),
                                   channels), rng.standard_normal(channels), activation),
        ]
        for layer in layers:
            errors = check_layer(layer, x, seed=case)
            worst = max(worst, max(errors.values()))
    return worst < GRADIENT_TOLERANCE, f"{cases * 3} layers, worst relative error {worst:.2e}"


def tiny_network(seed: int = 0, activation: str = 'tanh') -> Network:
    """4x4 input, one conv, one pool, one full layer, cross-entropy loss."""
    return build_network(spec_from_dict({
        'input_shape': [1, 4, 4],
        'layers': [{'kind': 'conv', 'maps': 2, 'kernel': 2, 'activation': activation},
                   {'kind': 'pool', 'size': 2, 'stride': 1},
                   {'kind': 'full', 'units': 3, 'activation': 'identity'}],
        'seed': seed,
    }))


def _network_gradient(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    worst = 0.0
    for case in range(cases):
        net = tiny_network(seed=case)
        batch = rng.standard_normal((3, 1, 4, 4))
        targets = rng.integers(0, 3, size=3)
        worst = max(worst, max(check_network(net, batch, targets).values()))
    return worst < GRADIENT_TOLERANCE, f"{cases} networks, worst relative error {worst:.2e}"


def _cross_variant(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    worst_out, worst_grad = 0.0, 0.0
    for case in range(cases):
        spec = random_small_spec(rng, seed=case)
        net = build_network(spec)
        batch = rng.standard_normal((int(rng.integers(1, 4)), *spec.input_shape))
        targets = rng.integers(0, 3, size=batch.shape[0])
        reference = run_batch(make_executor(VariantId.IMP1), net, batch, targets)
        for variant in VariantId:
            result = run_batch(make_executor(variant, workers=2), net, batch, targets)
            worst_out = max(worst_out, float(np.max(np.abs(result.outputs - reference.outputs))))
            for ref_layer, layer in zip(reference.gradients.params, result.gradients.params):
                for name, grad in layer.items():
                    worst_grad = max(worst_grad, relative_error(grad, ref_layer[name], floor=1e-12))
    passed = worst_out <= OUTPUT_TOLERANCE and worst_grad <= VARIANT_GRADIENT_TOLERANCE
    return passed, f"{cases} networks x 6 variants, output diff {worst_out:.2e}, gradient diff {worst_grad:.2e}"


def _batch_equivalence(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    worst = 0.0
    for case in range(cases):
        spec = random_small_spec(rng, seed=case)
        net = build_network(spec)
        batch = rng.standard_normal((int(rng.integers(2, 6)), *spec.input_shape))
        whole = forward(net, batch).result
        pieces = np.concatenate([forward(net, batch[n:n + 1]).result for n in range(batch.shape[0])])
        worst = max(worst, float(np.max(np.abs(whole - pieces))))
    return worst <= OUTPUT_TOLERANCE, f"{cases} batches, worst difference {worst:.2e}"


def _model_roundtrip(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    for case in range(cases):
        spec = random_small_spec(rng, seed=case)
        precision = 'f32' if case % 2 else 'f64'
        net = build_network(spec, precision)
        restored = decode_model(encode_model(net))
        for original, loaded in zip(net.layers, restored.layers):
            for name, param in original.params.items():
                other = loaded.params[name]
                if other.dtype != param.dtype or other.shape != param.shape or other.tobytes() != param.tobytes():
                    return False, f"case {case}: {name} differs after round-trip"
    return True, f"{cases} models round-tripped bit-exactly"


def _fuzz(parser: Callable[[bytes], object], seed_bytes: bytes, header_len: int, rng: np.random.Generator,
          cases: int) -> Tuple[int, str]:
    rejected = 0
    for _ in range(cases):
        data = bytearray(seed_bytes)
        if rng.random() < 0.3:
            data = data[:int(rng.integers(0, len(data)))]
        else:
            for _ in range(int(rng.integers(1, 4))):
                position = int(rng.integers(0, min(header_len, len(data))))
                data[position] = int(rng.integers(0, 256))
        try:
            parser(bytes(data))
        except ParseError:
            rejected += 1
        except Exception as error:  # pylint: disable=broad-except
            return -1, f"{type(error).__name__}: {error}"
    return rejected, ''


def _parser_fuzz(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    images = rng.integers(0, 256, size=(2, 4, 4), dtype=np.uint8)
    idx = bytes([0, 0, 8, 3]) + struct.pack('>3I', *images.shape) + images.tobytes()
    pgm = b"P5\n# fuzz\n4 4\n255\n" + images[0].tobytes()
    total = 0
    for parser, data, header in ((parse_idx, idx, 16), (parse_pgm, pgm, 18)):
        rejected, failure = _fuzz(parser, data, header, rng, cases)
        if rejected < 0:
            return False, f"{parser.__name__} raised {failure}"
        total += rejected
    return True, f"{2 * cases} mutated files, {total} rejected with ParseError, no other errors"


def run_selftest(quick: bool = True, seed: int = 0) -> List[SuiteResult]:
    """
    Run every oracle suite.

    Args:
        quick: Fewer random cases per suite
        seed: Seed for all random instances

    Returns:
        One SuiteResult per suite; a suite that raises is reported as failed
    """
    scale = 1 if quick else 4
    suites = [
        ('adjoint', _adjoint, 25 * scale),
        ('layer-gradients', _layer_gradients, 7 * scale),
        ('network-gradient', _network_gradient, 2 * scale),
        ('cross-variant', _cross_variant, 5 if quick else 50),
        ('batch-equivalence', _batch_equivalence, 25 * scale),
        ('model-roundtrip', _model_roundtrip, 5 * scale),
        ('parser-fuzz', _parser_fuzz, 250 * scale),
    ]
    results = []
    for name, suite, cases in suites:
        started = time.perf_counter()
        try:
            passed, detail = suite(np.random.default_rng(seed), cases)
        except Exception as error:  # pylint: disable=broad-except
            logger.error("Suite %s raised %s", name, error, exc_info=True, extra={'operation': name})
            passed, detail = False, f"{type(error).__name__}: {error}"
        seconds = time.perf_counter() - started
        results.append(SuiteResult(name, passed, detail, seconds))
        logger.info("Suite %s %s", name, 'passed' if passed else 'FAILED',
                    extra={'operation': name, 'duration_ms': seconds * 1000.0})
    return results
