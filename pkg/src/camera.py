"""Pinhole cameras, affine crops and the intrinsics bookkeeping that goes with them."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-6


class CameraError(ValueError):
    """Raised for invalid intrinsics/extrinsics or a degenerate crop."""
    pass


@dataclass
class Camera:
    """World-to-camera extrinsics (R, t) and intrinsics K in pixels; camera looks down +z, y down."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if abs(self.K[1, 0]) + abs(self.K[2, 0]) + abs(self.K[2, 1]) > 0 or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise CameraError(f"K must be upper-triangular with positive focal lengths, got {self.K.tolist()}")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=ORTHONORMAL_TOLERANCE):
            raise CameraError(f"R is not orthonormal: {self.R.tolist()}")

    @classmethod
    def look_at(cls, eye, target, up, K: np.ndarray, width: int, height: int) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(-np.asarray(up, dtype=np.float64), forward)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(K, R, -R @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> np.ndarray:
        return self.R[2].copy()

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (uv, z): continuous pixel coordinates and camera-space depth."""
        cam = self.to_camera(points)
        z = cam[..., 2]
        pix = cam @ self.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = pix[..., :2] / pix[..., 2:3]
        return uv, z

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        try:
            return cls(data["K"], data["R"], data["t"], data["width"], data["height"])
        except KeyError as exc:
            raise CameraError(f"Camera entry is missing key {exc}") from None


def square_bbox(uv: np.ndarray, margin: float = 0.25, pad: float = 0.0) -> tuple:
    """Square (x0, y0, x1, y1) around 2D points, grown by a fraction `margin` plus `pad` pixels."""
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    center = (lo + hi) / 2
    side = float((hi - lo).max()) * (1.0 + margin) + 2.0 * pad
    half = side / 2
    return (center[0] - half, center[1] - half, center[0] + half, center[1] + half)


def crop_transform(
    bbox2d: tuple,
    target: tuple,
    jitter: tuple = (0.0, 0.0),
    seed: Optional[int] = None,
) -> np.ndarray:
    """
    Affine T mapping the (optionally jittered) bbox onto a target rectangle.

    `target` is (width, height); `jitter` is (sigma_scale, sigma_shift_px).
    """
    x0, y0, x1, y1 = (float(v) for v in bbox2d)
    if x1 <= x0 or y1 <= y0:
        raise CameraError(f"Degenerate crop rectangle {bbox2d}")
    sigma_scale, sigma_shift = jitter
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    bw, bh = x1 - x0, y1 - y0
    if sigma_scale > 0 or sigma_shift > 0:
        rng = np.random.default_rng(seed)
        scale = max(1.0 + sigma_scale * rng.standard_normal(), 0.5)
        shift = sigma_shift * rng.standard_normal(2)
        cx, cy = cx + shift[0], cy + shift[1]
        bw, bh = bw * scale, bh * scale
    target_w, target_h = target
    sx = target_w / bw
    sy = target_h / bh
    left = cx - bw / 2
    top = cy - bh / 2
    return np.array([[sx, 0.0, -sx * left], [0.0, sy, -sy * top], [0.0, 0.0, 1.0]])


def update_intrinsics(K: np.ndarray, T: np.ndarray, k: float = 1.0) -> np.ndarray:
    """K' = T K, with focal lengths and principal point then divided by k."""
    if k < 1:
        raise CameraError(f"Downscale factor must be >= 1, got {k}")
    K_prime = np.asarray(T, dtype=np.float64) @ np.asarray(K, dtype=np.float64)
    K_prime[:2] /= k
    return K_prime


def crop_camera(cam: Camera, T: np.ndarray, k: int, target: tuple) -> Camera:
    target_w, target_h = target
    return Camera(update_intrinsics(cam.K, T, k), cam.R, cam.t, target_w // k, target_h // k)
