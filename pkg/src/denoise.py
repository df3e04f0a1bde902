"""
Denoise Module

Image denoising with a convolution-only network (no pooling, no fully connected
layers) trained on synthesized noisy/clean pairs under a mean-squared-error head.

Valid convolution shrinks the image: a stack of stride-1 convolutions with
kernels k_1..k_L loses sum(k_i - 1) rows and columns. Targets are the clean
images cropped by that margin, split as evenly as possible between the two
sides (top/left gets the smaller half).

Default preset: 3 conv layers, 5x5 kernels, 16/16/1 maps, ReLU/ReLU/identity.

Data Flow:
    clean images (synthetic or PGM tiles) → synth_denoise_pairs() → crop targets
        → train() → Network → save_model()
    Network + noisy image → denoise_apply() → image (smaller by the margin)

Invoked by: vcnn, selftest
Invokes: network, dataset_loader, storage_manager, error_handler
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from src.dataset_loader import Dataset, read_pgm, synth_clean_images, synth_denoise_pairs
from src.error_handler import ShapeError, SpecError
from src.logging_config import get_logger
from src.network import (EpochStats, Network, NetworkSpec, TrainConfig, build_network, forward, spec_from_dict,
                         train)
from src.storage_manager import save_model
from src.tensor_core import Precision, to_nchw

logger = get_logger(__name__)


def denoise_spec(image_size: int = 32, seed: int = 0) -> NetworkSpec:
    """Default conv-only denoiser for single-channel images."""
    return spec_from_dict({
        'input_shape': [1, image_size, image_size],
        'layers': [
            {'kind': 'conv', 'maps': 16, 'kernel': 5, 'activation': 'relu'},
            {'kind': 'conv', 'maps': 16, 'kernel': 5, 'activation': 'relu'},
            {'kind': 'conv', 'maps': 1, 'kernel': 5, 'activation': 'identity'},
        ],
        'loss': 'mean-squared-error',
        'seed': seed,
    })


def validate_denoise_spec(spec: NetworkSpec):
    """
    Raises:
        SpecError: If the spec has pooling or fully connected layers, strided
            convolutions, a non-MSE loss, or an output with more than one map
    """
    for index, layer in enumerate(spec.layers):
        if layer.kind != 'conv':
            raise SpecError(f"Denoise networks are convolution-only; layers[{index}] is {layer.kind}")
        if layer.stride != 1:
            raise SpecError(f"Denoise networks need stride 1; layers[{index}] has stride {layer.stride}")
    if spec.loss != 'mean-squared-error':
        raise SpecError(f"Denoise networks use the mean-squared-error loss, got {spec.loss}")
    if spec.layers[-1].maps != spec.input_shape[0]:
        raise SpecError(f"Output maps ({spec.layers[-1].maps}) must equal input channels ({spec.input_shape[0]})")


def network_margin(spec: NetworkSpec) -> Tuple[int, int]:
    """Rows and columns lost to valid convolution: sum(k - 1) per axis."""
    rows = sum(layer.kernel[0] - 1 for layer in spec.layers if layer.kind == 'conv')
    cols = sum(layer.kernel[1] - 1 for layer in spec.layers if layer.kind == 'conv')
    return rows, cols


def crop_margin(image: np.ndarray, margin: Union[int, Tuple[int, int]]) -> np.ndarray:
    """
    Crop the last two axes by a total margin, smaller half on the top/left.

    Raises:
        ShapeError: If the margin is not smaller than the image
    """
    rows, cols = (margin, margin) if isinstance(margin, int) else margin
    height, width = image.shape[-2:]
    if rows >= height or cols >= width:
        raise ShapeError(f"Margin {rows}x{cols} leaves nothing of a {height}x{width} image", image.shape)
    top, left = rows // 2, cols // 2
    return image[..., top:height - (rows - top), left:width - (cols - left)]


def psnr(estimate: np.ndarray, reference: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; infinite for identical images."""
    if estimate.shape != reference.shape:
        raise ShapeError(f"PSNR shapes differ: {estimate.shape} vs {reference.shape}",
                         estimate.shape, reference.shape)
    mse = float(np.mean((np.asarray(estimate, dtype=np.float64) - reference) ** 2))
    if mse == 0.0:
        return float('inf')
    return 10.0 * np.log10(peak * peak / mse)


def denoise_apply(net: Network, image: np.ndarray) -> np.ndarray:
    """
    Run the denoiser on one image or a batch.

    The output is smaller than the input by network_margin() and has the
    input's number of axes.

    Raises:
        ShapeError: If the network margin does not fit inside the image
    """
    image = np.asarray(image)
    ndim = image.ndim
    batch = to_nchw(image).astype(net.dtype, copy=False)
    rows, cols = network_margin(net.spec)
    if rows >= batch.shape[2] or cols >= batch.shape[3]:
        raise ShapeError(f"Network margin {rows}x{cols} exceeds image {batch.shape[2]}x{batch.shape[3]}",
                         image.shape)
    out = forward(net, batch).result
    if ndim == 2:
        return out[0, 0]
    if ndim == 3:
        return out[0]
    return out


@dataclass
class DenoiseConfig:
    """
    Attributes:
        spec (NetworkSpec): Conv-only network
        train (TrainConfig): SGD settings
        sigma (float): Noise standard deviation for synthesized pairs
        train_samples (int): Training images
        test_samples (int): Held-out images
        clean_dir (Optional[str]): Directory of PGM images to tile instead of synthetic images
    """
    spec: NetworkSpec = field(default_factory=denoise_spec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.02, momentum=0.9,
                                                                   batch_size=8, epochs=15))
    sigma: float = 0.1
    train_samples: int = 200
    test_samples: int = 20
    clean_dir: Optional[str] = None


@dataclass
class DenoiseResult:
    net: Network
    history: List[EpochStats]
    psnr_noisy: float
    psnr_denoised: float
    model_path: Optional[Path] = None

    @property
    def gain_db(self) -> float:
        return self.psnr_denoised - self.psnr_noisy


def tile_images(directory: Union[str, Path], size: int, limit: int, skip: int = 0) -> np.ndarray:
    """Non-overlapping size x size tiles from every PGM in a directory, up to `limit`, after the first `skip`."""
    tiles = []
    seen = 0
    for path in sorted(Path(directory).glob('*.pgm')):
        image = read_pgm(path)
        for y in range(0, image.shape[0] - size + 1, size):
            for x in range(0, image.shape[1] - size + 1, size):
                seen += 1
                if seen <= skip:
                    continue
                tiles.append(image[y:y + size, x:x + size])
                if len(tiles) == limit:
                    return np.stack(tiles)[:, None]
    if not tiles:
        raise FileNotFoundError(f"No PGM tiles of {size}x{size} found in {directory} after the first {skip}")
    return np.stack(tiles)[:, None]


def _pairs(config: DenoiseConfig, count: int, seed: int, skip: int = 0) -> Tuple[Dataset, np.ndarray]:
    size = config.spec.input_shape[1]
    if config.clean_dir:
        clean = tile_images(config.clean_dir, size, count, skip)
    else:
        clean = synth_clean_images(count, size, seed)
    pairs = synth_denoise_pairs(clean, config.sigma, seed)
    margin = network_margin(config.spec)
    targets = np.ascontiguousarray(crop_margin(pairs.labels, margin))
    # second value: the noisy inputs cropped to the output region, for the PSNR baseline
    return Dataset(pairs.images, targets, 'denoise'), crop_margin(pairs.images, margin)


def train_denoiser(config: DenoiseConfig, model_path: Optional[Union[str, Path]] = None) -> DenoiseResult:
    """
    Train a conv-only denoiser on synthesized pairs and report held-out PSNR.

    Args:
        config: Network, training and data settings
        model_path: Where to save the trained model (not saved when None)

    Raises:
        SpecError: If the spec is not a valid denoise network
    """
    validate_denoise_spec(config.spec)
    seed = config.train.seed
    train_set, _ = _pairs(config, config.train_samples, seed)
    test_set, noisy_cropped = _pairs(config, config.test_samples, seed + 1, skip=len(train_set))

    net = build_network(config.spec, Precision.parse(config.train.precision))
    net, history = train(net, train_set, config.train)

    denoised = denoise_apply(net, test_set.images)
    result = DenoiseResult(net, history, psnr(noisy_cropped, test_set.labels), psnr(denoised, test_set.labels))
    logger.info("Denoiser trained: PSNR %.2f dB -> %.2f dB", result.psnr_noisy, result.psnr_denoised,
                extra={'loss': history[-1].loss if history else None})
    if model_path is not None:
        result.model_path = save_model(net, model_path)
    return result
