"""x2 convolutional refinement of low-resolution renders, and pasting crops back."""
import logging
from typing import Optional

import numpy as np

from src.camera import CameraError
from src.imaging import warp
from src.nn import Conv2d, Module
from src.tensor import ShapeError, Tensor, concat, no_grad, resize_bilinear2x, upsample_nearest2x

logger = logging.getLogger(__name__)

WIDTH = 32
NUM_BLOCKS = 3


class ResidualBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        self.conv1 = Conv2d(channels, channels, rng)
        self.conv2 = Conv2d(channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.conv1(x).relu())


class UpsamplerModel(Module):
    """
    Residual CNN over RGB plus the renderer's extra channels.

    The last convolution starts at zero, so an untrained model returns the
    bilinear x2 upsampling of the RGB input.
    """

    def __init__(self, seed: int = 0, extra_dim: int = 8, width: int = WIDTH, blocks: int = NUM_BLOCKS) -> None:
        rng = np.random.default_rng(seed + 2)
        self.in_channels = 3 + extra_dim
        self.head = Conv2d(self.in_channels, width, rng)
        self.blocks = [ResidualBlock(width, rng) for _ in range(blocks)]
        self.refine = Conv2d(width, width, rng)
        self.tail = Conv2d(width, 3, rng, zero=True)

    def forward(self, x: Tensor) -> Tensor:
        """(3 + d, H, W) -> (3, 2H, 2W), clamped to [0, 1]."""
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ShapeError(f"Upsampler expects ({self.in_channels}, H, W) input, got {x.shape}")
        h = self.head(x).relu()
        for block in self.blocks:
            h = block(h)
        h = self.refine(upsample_nearest2x(h)).relu()
        skip = resize_bilinear2x(x[:3])
        return (skip + self.tail(h)).clamp(0.0, 1.0)


def frame_input(rgb: Tensor, extra: Tensor, height: int, width: int) -> Tensor:
    """Stack (H*W, 3) colors and (H*W, d) features into a (3 + d, H, W) image tensor."""
    return concat([rgb, extra], axis=1).reshape(height, width, rgb.shape[1] + extra.shape[1]).transpose(2, 0, 1)


def upsample(model: UpsamplerModel, frame) -> np.ndarray:
    """(2H, 2W, 3) refinement of a rendered frame."""
    with no_grad():
        x = Tensor(np.concatenate([frame.rgb, frame.features], axis=2).transpose(2, 0, 1))
        return model(x).numpy().transpose(1, 2, 0).copy()


def restore_full(
    image: np.ndarray,
    transform: np.ndarray,
    out_shape: tuple,
    crop_size: Optional[tuple] = None,
    background=0.0,
) -> np.ndarray:
    """
    Paste a crop back into the original frame via the inverse of the crop transform.

    `transform` maps original pixels to crop pixels of size `crop_size`
    (width, height); an image rendered at another resolution is rescaled to it.

    Raises:
        CameraError: If the transform is singular.
    """
    transform = np.asarray(transform, dtype=np.float64)
    if abs(np.linalg.det(transform)) < 1e-12:
        raise CameraError("Crop transform is singular")
    if crop_size is not None:
        height, width = image.shape[:2]
        scale = np.diag([width / crop_size[0], height / crop_size[1], 1.0])
        transform = scale @ transform
    return warp(image, transform, out_shape, background)
