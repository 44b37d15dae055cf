"""Image quality metrics: PSNR and windowed SSIM for images in [0, 1]."""
import math

import numpy as np

PSNR_CAP = 99.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 8
K1 = 0.01
K2 = 0.03
LUMINANCE = np.array([0.299, 0.587, 0.114])


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"Image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE), reported as 99.0 when MSE < 1e-10."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image @ LUMINANCE if image.ndim == 3 else image


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW, k1: float = K1, k2: float = K2, L: float = 1.0) -> float:
    """
    Mean SSIM over all window x window patches (stride 1, uniform weights) of the luminance images.

    Raises:
        ValueError: If the shapes differ or the image is smaller than the window.
    """
    _check_shapes(np.asarray(a), np.asarray(b))
    x = to_gray(a)
    y = to_gray(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ValueError(f"Image of size {x.shape} is smaller than the {window}x{window} SSIM window")
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2

    def local_mean(image: np.ndarray) -> np.ndarray:
        return np.lib.stride_tricks.sliding_window_view(image, (window, window)).mean(axis=(2, 3))

    mu_x = local_mean(x)
    mu_y = local_mean(y)
    var_x = local_mean(x * x) - mu_x * mu_x
    var_y = local_mean(y * y) - mu_y * mu_y
    cov = local_mean(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))
