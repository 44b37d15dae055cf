"""
Ray generation, occupancy-derived ray bounds and sampling along rays.

Random draws come from src.utils.counter_uniform keyed by pixel index, so a
ray's samples never depend on which other rays are in the batch.
"""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from src.camera import Camera
from src.imaging import pixel_centers
from src.utils import Box, counter_uniform

logger = logging.getLogger(__name__)

ProbabilityFn = Callable[[np.ndarray], np.ndarray]

P_MIN = 0.1
P_MAX = 0.99
D_FIX = 0.02
MARCH_DIVISIONS = 8
BISECTION_STEPS = 10
MIN_DELTA = 1e-5
MARCH_CHUNK = 16


class SamplingError(ValueError):
    """Raised for invalid sampling parameters or bounds."""
    pass


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    pixels: np.ndarray
    near: np.ndarray
    far: np.ndarray
    alive: np.ndarray
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def alive_count(self) -> int:
        return int(self.alive.sum())


@dataclass
class SampleSet:
    """Samples along the alive rays of a batch; every per-ray array has one row per alive ray."""

    rays: np.ndarray
    pixels: np.ndarray
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    depths: np.ndarray
    points: np.ndarray
    deltas: np.ndarray

    @property
    def num_rays(self) -> int:
        return len(self.rays)

    @property
    def per_ray(self) -> int:
        return self.depths.shape[1] if self.depths.ndim == 2 else 0


def generate_rays(cam: Camera, pixels: Optional[np.ndarray] = None) -> RayBatch:
    """One unit-direction ray per pixel center; `pixels` are row-major flat indices."""
    all_pixels = np.arange(cam.height * cam.width)
    pixels = all_pixels if pixels is None else np.asarray(pixels, dtype=np.int64)
    uv = pixel_centers(cam.height, cam.width)[pixels]
    homogeneous = np.concatenate([uv, np.ones((len(uv), 1))], axis=1)
    cam_dirs = homogeneous @ np.linalg.inv(cam.K).T
    directions = cam_dirs @ cam.R
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    count = len(pixels)
    return RayBatch(
        origins=np.broadcast_to(cam.center, (count, 3)).copy(),
        directions=directions,
        pixels=pixels,
        near=np.zeros(count),
        far=np.full(count, np.inf),
        alive=np.ones(count, dtype=bool),
        height=cam.height,
        width=cam.width,
    )


def march_crossing(
    prob_fn: ProbabilityFn,
    origins: np.ndarray,
    directions: np.ndarray,
    t_start: np.ndarray,
    t_end: np.ndarray,
    step: float,
    threshold: float,
    bisect_steps: int = BISECTION_STEPS,
) -> tuple[np.ndarray, np.ndarray]:
    """
    First depth in [t_start, t_end] where the probability reaches `threshold`.

    Rules:
    - March with a fixed step from t_start; the first sample at or above the
      threshold brackets the crossing with the sample before it
    - The bracket is refined by bisection; the returned depth is the upper end,
      so prob(t) >= threshold holds at every returned depth
    - A crossing at t_start itself is returned as t_start

    Returns:
        (depths, found) with depths set to inf where no crossing exists.
    """
    if step <= 0:
        raise SamplingError(f"March step must be positive, got {step}")
    count = len(origins)
    depths = np.full(count, np.inf)
    found = np.zeros(count, dtype=bool)
    lower = np.zeros(count)
    pending = np.flatnonzero(t_end > t_start)
    if count == 0 or pending.size == 0:
        return depths, found

    n_steps = int(np.ceil(np.max((t_end[pending] - t_start[pending]) / step))) + 1
    for first in range(0, n_steps, MARCH_CHUNK):
        if pending.size == 0:
            break
        offsets = np.arange(first, min(first + MARCH_CHUNK, n_steps)) * step
        t = np.minimum(t_start[pending, None] + offsets[None, :], t_end[pending, None])
        points = origins[pending, None, :] + t[..., None] * directions[pending, None, :]
        probs = prob_fn(points.reshape(-1, 3)).reshape(t.shape)
        hit = probs >= threshold
        any_hit = hit.any(axis=1)
        index = np.argmax(hit, axis=1)
        rays = pending[any_hit]
        idx = index[any_hit]
        depths[rays] = t[any_hit, idx]
        found[rays] = True
        lower[rays] = np.where(idx + first > 0, depths[rays] - step, depths[rays])
        exhausted = t[:, -1] >= t_end[pending]
        pending = pending[~any_hit & ~exhausted]

    refine = np.flatnonzero(found & (depths > lower))
    lo = np.maximum(lower[refine], t_start[refine])
    hi = depths[refine]
    for _ in range(bisect_steps):
        mid = 0.5 * (lo + hi)
        points = origins[refine] + mid[:, None] * directions[refine]
        above = prob_fn(points) >= threshold
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    depths[refine] = hi
    return depths, found


def compute_bounds(
    batch: RayBatch,
    prob_fn: ProbabilityFn,
    box: Box,
    p_min: float = P_MIN,
    p_max: float = P_MAX,
    d_fix: float = D_FIX,
    step: Optional[float] = None,
) -> RayBatch:
    """
    Tight per-ray bounds around the occupied surface; rays without a crossing are pruned.

    t_near is the first p_min crossing inside `box`; t_far is the earlier of the
    p_max crossing past t_near and t_near + d_fix.
    """
    step = d_fix / MARCH_DIVISIONS if step is None else step
    t_enter, t_exit, hit = box.ray_interval(batch.origins, batch.directions)
    rays = np.flatnonzero(hit & batch.alive)
    near = np.zeros(len(batch))
    far = np.zeros(len(batch))
    alive = np.zeros(len(batch), dtype=bool)

    if rays.size:
        origins = batch.origins[rays]
        directions = batch.directions[rays]
        t_near, found = march_crossing(prob_fn, origins, directions, t_enter[rays], t_exit[rays], step, p_min)
        keep = np.flatnonzero(found)
        rays, origins, directions, t_near = rays[keep], origins[keep], directions[keep], t_near[keep]
        limit = t_near + d_fix
        t_sat, saturated = march_crossing(prob_fn, origins, directions, t_near, limit, step, p_max)
        t_far = np.where(saturated, np.minimum(t_sat, limit), limit)
        t_far = np.maximum(t_far, t_near + step)
        near[rays] = t_near
        far[rays] = t_far
        alive[rays] = True

    logger.debug("Bounds: %d of %d rays alive", int(alive.sum()), len(batch))
    return replace(batch, near=near, far=far, alive=alive)


def fixed_bounds(batch: RayBatch, box: Box) -> RayBatch:
    """Scene-box bounds with no pruning beyond rays that miss the box."""
    t_enter, t_exit, hit = box.ray_interval(batch.origins, batch.directions)
    return replace(batch, near=np.where(hit, t_enter, 0.0), far=np.where(hit, t_exit, 0.0), alive=hit & batch.alive)


def _deltas(depths: np.ndarray, far: np.ndarray) -> np.ndarray:
    last = np.maximum(far[:, None] - depths[:, -1:], MIN_DELTA)
    return np.concatenate([np.diff(depths, axis=1), last], axis=1)


def _strictly_increasing(depths: np.ndarray) -> np.ndarray:
    out = depths.copy()
    for i in range(1, out.shape[1]):
        out[:, i] = np.maximum(out[:, i], np.nextafter(out[:, i - 1], np.inf))
    return out


def _sample_set(batch: RayBatch, rays: np.ndarray, depths: np.ndarray) -> SampleSet:
    origins = batch.origins[rays]
    directions = batch.directions[rays]
    far = batch.far[rays]
    return SampleSet(
        rays=rays,
        pixels=batch.pixels[rays],
        origins=origins,
        directions=directions,
        near=batch.near[rays],
        far=far,
        depths=depths,
        points=origins[:, None, :] + depths[..., None] * directions[:, None, :],
        deltas=_deltas(depths, far),
    )


def uniform_samples(
    batch: RayBatch,
    k_u: int,
    seed: int = 0,
    stream: int = 0,
    randomize: bool = True,
) -> SampleSet:
    """
    One depth per equal stratum of [t_near, t_far] on every alive ray.

    With `randomize` off the depths are the stratum midpoints.
    """
    if k_u < 2:
        raise SamplingError(f"Need at least 2 uniform samples per ray, got {k_u}")
    rays = np.flatnonzero(batch.alive)
    near = batch.near[rays, None]
    width = (batch.far[rays] - batch.near[rays])[:, None] / k_u
    if randomize:
        jitter = counter_uniform(seed, 2 * stream, batch.pixels[rays], k_u)
    else:
        jitter = np.full((len(rays), k_u), 0.5)
    depths = near + (np.arange(k_u)[None, :] + jitter) * width
    return _sample_set(batch, rays, depths)


def hierarchical_samples(
    batch: RayBatch,
    coarse: SampleSet,
    weights: np.ndarray,
    k_h: int,
    seed: int = 0,
    stream: int = 0,
) -> tuple[SampleSet, int]:
    """
    Draw k_h extra depths per ray by inverse-CDF over the coarse strata.

    Each of the k_u equal strata of [t_near, t_far] carries the weight of the
    coarse sample inside it. Rays whose weights are all zero fall back to
    uniform weights; the number of such rays is returned alongside the
    merged, re-sorted sample set.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != coarse.depths.shape:
        raise SamplingError(f"Weights {weights.shape} do not match coarse samples {coarse.depths.shape}")
    if np.any(weights < 0):
        raise SamplingError("Sampling weights must be non-negative")
    if k_h == 0 or coarse.num_rays == 0:
        return coarse, 0

    k_u = weights.shape[1]
    totals = weights.sum(axis=1, keepdims=True)
    empty = totals[:, 0] <= 0
    fallbacks = int(empty.sum())
    if fallbacks:
        logger.warning("Hierarchical sampling fell back to uniform weights on %d rays", fallbacks)
    pdf = np.where(empty[:, None], 1.0 / k_u, weights / np.where(totals > 0, totals, 1.0))
    cdf = np.concatenate([np.zeros((len(pdf), 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    u = counter_uniform(seed, 2 * stream + 1, coarse.pixels, k_h)
    bins = np.clip(np.sum(cdf[:, None, 1:] <= u[:, :, None], axis=2), 0, k_u - 1)
    lower_cdf = np.take_along_axis(cdf, bins, axis=1)
    bin_pdf = np.take_along_axis(pdf, bins, axis=1)
    frac = np.clip((u - lower_cdf) / np.where(bin_pdf > 0, bin_pdf, 1.0), 0.0, 1.0)

    width = ((coarse.far - coarse.near) / k_u)[:, None]
    fine = coarse.near[:, None] + (bins + frac) * width
    merged = _strictly_increasing(np.sort(np.concatenate([coarse.depths, fine], axis=1), axis=1, kind="stable"))
    return _sample_set(batch, coarse.rays, merged), fallbacks
