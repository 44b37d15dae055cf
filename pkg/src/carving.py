"""
Color-consistency carving of hand point clouds from calibrated views.

Candidates are drawn uniformly in a box around the hand, projected into
every view and kept when their colors agree across views and their
projections fall inside the hand masks.
"""
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from src.camera import Camera
from src.dataset import DatasetError, SceneBundle
from src.imaging import normalize_image, sample_bilinear
from src.utils import Box

logger = logging.getLogger(__name__)

MAGIC = b"OCPC"
SIGMA_MAX = 0.08
RHO = 1.0
OCCLUSION_TOLERANCE = 0.01
FREE_SPACE_TOLERANCE = 0.001
MIN_VALID_VIEWS = 2
CHUNK_SIZE = 20000


@dataclass
class View:
    camera: Camera
    image: np.ndarray
    mask: np.ndarray
    depth: Optional[np.ndarray] = None


@dataclass
class CandidateCloud:
    """Per-point colors and projections over N views; `keep` is set by consistency_filter."""

    points: np.ndarray
    colors: np.ndarray
    valid: np.ndarray
    std: np.ndarray
    uv: np.ndarray
    ray_depth: np.ndarray
    in_frame: np.ndarray
    keep: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    @property
    def kept(self) -> np.ndarray:
        return self.points[self.keep]

    @property
    def rejected(self) -> np.ndarray:
        return self.points[~self.keep]


def sample_bbox(box: Box, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return box.lo_array + rng.random((count, 3)) * (box.hi_array - box.lo_array)


def _lookup(buffer: np.ndarray, uv: np.ndarray, in_frame: np.ndarray) -> np.ndarray:
    """Nearest-pixel lookup; entries outside the frame read pixel (0, 0) and must be masked by the caller."""
    height, width = buffer.shape[:2]
    cols = np.clip(np.floor(np.nan_to_num(uv[:, 0])).astype(np.int64), 0, width - 1)
    rows = np.clip(np.floor(np.nan_to_num(uv[:, 1])).astype(np.int64), 0, height - 1)
    cols = np.where(in_frame, cols, 0)
    rows = np.where(in_frame, rows, 0)
    return buffer[rows, cols]


def project_and_sample(
    points: np.ndarray,
    views: Sequence[View],
    occlusion_tolerance: float = OCCLUSION_TOLERANCE,
) -> CandidateCloud:
    """
    Bilinear color lookup of every point in every view.

    A view is valid for a point when the projection is in front of the camera
    and inside the frame and, when a depth buffer exists, the point is not
    hidden more than `occlusion_tolerance` behind the buffered surface. The
    standard deviation over valid views is taken per channel and averaged;
    points with fewer than two valid views get 0.
    """
    points = np.asarray(points, dtype=np.float64)
    count, n_views = len(points), len(views)
    colors = np.zeros((count, n_views, 3))
    valid = np.zeros((count, n_views), dtype=bool)
    in_frame = np.zeros((count, n_views), dtype=bool)
    uv_all = np.zeros((count, n_views, 2))
    ray_depth = np.zeros((count, n_views))

    for v, view in enumerate(views):
        uv, z = view.camera.project(points)
        values, inside = sample_bilinear(view.image, uv)
        inside &= z > 0
        distance = np.linalg.norm(points - view.camera.center, axis=1)
        ok = inside.copy()
        if view.depth is not None:
            ok &= distance <= _lookup(view.depth, uv, inside) + occlusion_tolerance
        colors[:, v] = values
        valid[:, v] = ok
        in_frame[:, v] = inside
        uv_all[:, v] = np.nan_to_num(uv)
        ray_depth[:, v] = distance

    n_valid = valid.sum(axis=1)
    weights = valid[..., None].astype(np.float64)
    mean = (colors * weights).sum(axis=1) / np.maximum(n_valid, 1)[:, None]
    var = (((colors - mean[:, None, :]) ** 2) * weights).sum(axis=1) / np.maximum(n_valid, 1)[:, None]
    std = np.where(n_valid >= MIN_VALID_VIEWS, np.sqrt(var).mean(axis=1), 0.0)
    return CandidateCloud(points, colors, valid, std, uv_all, ray_depth, in_frame, np.zeros(count, dtype=bool))


def consistency_filter(
    cloud: CandidateCloud,
    sigma_max: float,
    masks: Sequence[np.ndarray],
    rho: float,
    depths: Optional[Sequence[Optional[np.ndarray]]] = None,
    free_space_tolerance: float = FREE_SPACE_TOLERANCE,
) -> CandidateCloud:
    """
    Keep points with low color spread that project inside enough masks.

    Rules:
    - Color stage first: keep only std <= sigma_max
    - Mask stage second: the fraction of all views whose mask contains the
      projection must be >= rho
    - With a depth buffer, a projection lying in front of the buffered surface
      by more than `free_space_tolerance` does not count as inside that mask

    Raises:
        ValueError: If rho is outside (0, 1].
    """
    if not 0 < rho <= 1:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    n_views = cloud.colors.shape[1]
    if len(masks) != n_views:
        raise ValueError(f"Got {len(masks)} masks for {n_views} views")

    color_ok = cloud.std <= sigma_max
    inside = np.zeros(cloud.in_frame.shape, dtype=bool)
    for v, mask in enumerate(masks):
        frame = cloud.in_frame[:, v]
        hit = frame & _lookup(np.asarray(mask, dtype=bool), cloud.uv[:, v], frame)
        depth = depths[v] if depths is not None else None
        if depth is not None:
            surface = _lookup(depth, cloud.uv[:, v], frame)
            hit &= cloud.ray_depth[:, v] >= surface - free_space_tolerance
        inside[:, v] = hit
    fraction = inside.sum(axis=1) / n_views
    return replace(cloud, keep=color_ok & (fraction >= rho - 1e-12))


def carve(
    points: np.ndarray,
    views: Sequence[View],
    sigma_max: float = SIGMA_MAX,
    rho: float = RHO,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> CandidateCloud:
    """Project, sample and filter in fixed chunks; chunk results are merged in order."""
    points = np.asarray(points, dtype=np.float64)
    masks = [view.mask for view in views]
    depths = [view.depth for view in views]

    def run(chunk: np.ndarray) -> CandidateCloud:
        return consistency_filter(project_and_sample(chunk, views), sigma_max, masks, rho, depths)

    chunks = [points[i:i + chunk_size] for i in range(0, max(len(points), 1), chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(chunk) for chunk in chunks]
    return CandidateCloud(*(np.concatenate([getattr(part, name) for part in parts]) for name in CandidateCloud.__dataclass_fields__))


def write_point_cloud(path: Path, points: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
    """
    Write the OCPC binary format.

    Layout: magic b"OCPC", little-endian u64 count, count float32 xyz
    triplets, then optionally count u8 labels.
    """
    path = Path(path)
    points = np.asarray(points, dtype="<f4").reshape(-1, 3)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(points)))
        f.write(points.tobytes())
        if labels is not None:
            labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
            if len(labels) != len(points):
                raise ValueError(f"Got {len(labels)} labels for {len(points)} points")
            f.write(labels.tobytes())
    os.replace(tmp, path)


def read_point_cloud(path: Path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Read an OCPC file.

    Raises:
        DatasetError: On a missing file, a bad magic string or a truncated body.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Missing point cloud: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC or len(data) < 12:
        raise DatasetError(f"{path} is not an OCPC point cloud")
    (count,) = struct.unpack("<Q", data[4:12])
    body = 12 + 12 * count
    if len(data) < body:
        raise DatasetError(f"{path} is truncated: expected {count} points")
    points = np.frombuffer(data[12:body], dtype="<f4").reshape(count, 3).astype(np.float64)
    labels = None
    if len(data) >= body + count and count > 0:
        labels = np.frombuffer(data[body:body + count], dtype=np.uint8).copy()
    return points, labels


def candidate_box(bundle: SceneBundle, pose: int, margin: float = 0.01) -> Box:
    """Joint bounding box of a pose grown by the largest bone radius plus `margin`, clipped to the scene."""
    joints = bundle.poses[pose].pose.all_joints()
    grown = Box.around(joints, float(np.max(bundle.radii)) + margin)
    return grown.intersect(bundle.box)


def carve_dataset(
    bundle: SceneBundle,
    views: Sequence[int],
    candidates: int = 200000,
    sigma_max: float = SIGMA_MAX,
    rho: float = RHO,
    seed: int = 0,
    workers: int = 1,
    normalization: str = "identity",
) -> list[Path]:
    """Carve every pose of a dataset and write `clouds/<pose>.ocpc` with keep labels."""
    out_dir = bundle.clouds_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    logger.info("=" * 70)
    logger.info("Carving %d poses from %d views (%d candidates each)", len(bundle.poses), len(views), candidates)
    logger.info("=" * 70)

    for p, record in enumerate(bundle.poses):
        pose_views = [
            View(
                bundle.cameras[v],
                normalize_image(bundle.image(p, v), normalization),
                bundle.mask(p, v),
                bundle.depth(p, v),
            )
            for v in views
        ]
        missing = sum(view.depth is None for view in pose_views)
        if missing:
            logger.warning(
                "  %s: %d/%d views have no depth buffer; free-space rejection is off for them",
                record.name, missing, len(pose_views),
            )
        else:
            logger.info("  %s: free-space rejection on (%d depth buffers)", record.name, len(pose_views))
        points = sample_bbox(candidate_box(bundle, p), candidates, seed + p)
        cloud = carve(points, pose_views, sigma_max, rho, workers)
        path = out_dir / f"{record.name}.ocpc"
        write_point_cloud(path, cloud.points, cloud.keep)
        written.append(path)

        truth = bundle.oracle(cloud.points, p)
        kept = int(cloud.keep.sum())
        precision = float((cloud.keep & truth).sum() / max(kept, 1))
        recall = float((cloud.keep & truth).sum() / max(int(truth.sum()), 1))
        logger.info("  %s: kept %d/%d (precision %.3f, recall %.3f)", record.name, kept, len(cloud), precision, recall)
    return written
