"""
Image I/O and resampling.

Pixel convention: continuous coordinates (u, v) with u to the right and v
down; the pixel in row i, column j covers [j, j+1) x [i, i+1) and its center
is (j + 0.5, i + 0.5).
"""
import logging
from pathlib import Path

import numpy as np
from PIL import Image, ImageOps

logger = logging.getLogger(__name__)

NORMALIZATION_MODES = ("identity", "equalize_hsv")


def write_png(image: np.ndarray, path: Path) -> None:
    """Write an (H,W,3) float image in [0,1] or an (H,W) mask as 8-bit PNG."""
    array = np.asarray(image)
    if array.dtype == bool:
        array = array.astype(np.uint8) * 255
    else:
        array = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(array).save(tmp, format="PNG")
    tmp.replace(path)


def read_png(path: Path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path: Path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("L")) > 127


def sample_bilinear(image: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Bilinear lookup at continuous pixel coordinates.

    Returns (values, inside); values at coordinates outside the frame are
    edge-clamped and flagged by `inside` = False.
    """
    image = np.asarray(image)
    height, width = image.shape[:2]
    u = uv[..., 0]
    v = uv[..., 1]
    inside = (u >= 0) & (u <= width) & (v >= 0) & (v <= height) & np.isfinite(u) & np.isfinite(v)

    x = np.clip(np.nan_to_num(u) - 0.5, 0.0, width - 1.0)
    y = np.clip(np.nan_to_num(v) - 0.5, 0.0, height - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy, inside


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(H*W, 2) continuous (u, v) centers in row-major order."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([cols.reshape(-1) + 0.5, rows.reshape(-1) + 0.5], axis=-1).astype(np.float64)


def warp(image: np.ndarray, out_to_src: np.ndarray, out_shape: tuple, background=0.0) -> np.ndarray:
    """Resample `image` into `out_shape` where `out_to_src` maps output pixels to source pixels."""
    height, width = out_shape
    centers = pixel_centers(height, width)
    homogeneous = np.concatenate([centers, np.ones((len(centers), 1))], axis=1) @ np.asarray(out_to_src).T
    src = homogeneous[:, :2] / homogeneous[:, 2:3]
    values, inside = sample_bilinear(image, src)
    values = np.where(inside[:, None] if values.ndim == 2 else inside, values, background)
    return values.reshape((height, width) + np.asarray(image).shape[2:]).astype(np.float32)


def warp_image(image: np.ndarray, transform: np.ndarray, out_shape: tuple, background=0.0) -> np.ndarray:
    """Apply a forward affine pixel transform T (source -> output)."""
    return warp(image, np.linalg.inv(transform), out_shape, background)


def downscale(image: np.ndarray, k: int) -> np.ndarray:
    """Box-filter downscale by an integer factor; H and W must be divisible by k."""
    if k == 1:
        return np.asarray(image, dtype=np.float32)
    height, width = image.shape[:2]
    if height % k or width % k:
        raise ValueError(f"Image of size {height}x{width} is not divisible by {k}")
    blocks = np.asarray(image, dtype=np.float32).reshape((height // k, k, width // k, k) + image.shape[2:])
    return blocks.mean(axis=(1, 3))


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    padded = np.pad(mask, radius, constant_values=False)
    size = 2 * radius + 1
    return np.lib.stride_tricks.sliding_window_view(padded, (size, size)).any(axis=(2, 3))


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    padded = np.pad(mask, radius, constant_values=False)
    size = 2 * radius + 1
    return np.lib.stride_tricks.sliding_window_view(padded, (size, size)).all(axis=(2, 3))


def normalize_image(image: np.ndarray, mode: str = "identity") -> np.ndarray:
    """
    Preprocessing hook applied before color-consistency carving.

    - "identity": returns the image unchanged (synthetic renders are already consistent)
    - "equalize_hsv": histogram-equalize each channel, then convert to HSV
    """
    if mode == "identity":
        return image
    if mode != "equalize_hsv":
        raise ValueError(f"Unknown normalization mode '{mode}', expected one of {NORMALIZATION_MODES}")
    rgb = Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8))
    equalized = ImageOps.equalize(rgb)
    return np.asarray(equalized.convert("HSV"), dtype=np.float32) / 255.0
