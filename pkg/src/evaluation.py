"""
Held-out evaluation and the occupancy-pruning benchmark.

Both render the test views of every pose and compare against the dataset's
images cropped through the same transform.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from src.metrics import psnr, ssim
from src.render import HandModels, RenderedFrame, RenderSettings, ground_truth_crop, pose_grid, render_frame
from src.tensor import Tensor, no_grad, resize_bilinear2x
from src.upsampler import upsample
from src.utils import append_jsonl, write_json

logger = logging.getLogger(__name__)

METRICS_LOG = "metrics.jsonl"
REPORT_FILE = "report.json"
BENCH_FILE = "bench.json"


@dataclass
class FrameMetrics:
    frame: str
    psnr: float
    ssim: float
    rays_alive: int
    samples: int
    ms: float
    psnr_upsampled: Optional[float] = None
    psnr_bilinear: Optional[float] = None

    def log_record(self) -> dict:
        return {"frame": self.frame, "psnr": self.psnr, "ssim": self.ssim, "rays_alive": self.rays_alive, "ms": self.ms}


@dataclass
class MetricReport:
    frames: list = field(default_factory=list)

    def _mean(self, name: str) -> Optional[float]:
        values = [getattr(f, name) for f in self.frames if getattr(f, name) is not None]
        return float(np.mean(values)) if values else None

    @property
    def psnr(self) -> Optional[float]:
        return self._mean("psnr")

    @property
    def ssim(self) -> Optional[float]:
        return self._mean("ssim")

    def to_dict(self) -> dict:
        return {
            "frames": [vars(f) for f in self.frames],
            "psnr": self.psnr,
            "ssim": self.ssim,
            "lpips": "n/a",
            "psnr_upsampled": self._mean("psnr_upsampled"),
            "psnr_bilinear": self._mean("psnr_bilinear"),
            "ms_per_frame": self._mean("ms"),
            "rays_alive": self._mean("rays_alive"),
            "samples_evaluated": self._mean("samples"),
        }


def test_frames(bundle, views: Sequence[int], limit: Optional[int] = None) -> list[tuple[int, int]]:
    frames = [(p, v) for p in range(len(bundle.poses)) for v in views]
    return frames if limit is None else frames[:limit]


test_frames.__test__ = False


def bilinear_baseline(frame: RenderedFrame) -> np.ndarray:
    with no_grad():
        x = Tensor(frame.rgb.transpose(2, 0, 1))
        return resize_bilinear2x(x).numpy().transpose(1, 2, 0).clip(0.0, 1.0)


def score_frame(
    models: HandModels,
    bundle,
    pose: int,
    view: int,
    settings: RenderSettings,
    frame: RenderedFrame,
) -> FrameMetrics:
    image = bundle.image(pose, view)
    target = ground_truth_crop(image, frame.transform, settings, settings.downscale)
    metrics = FrameMetrics(
        frame=f"{bundle.poses[pose].name}/view_{view}",
        psnr=psnr(frame.rgb, target),
        ssim=ssim(frame.rgb, target),
        rays_alive=frame.rays_alive,
        samples=frame.samples,
        ms=frame.ms,
    )
    if settings.downscale % 2 == 0:
        full = ground_truth_crop(image, frame.transform, settings, settings.downscale // 2)
        metrics.psnr_upsampled = psnr(upsample(models.upsampler, frame), full)
        metrics.psnr_bilinear = psnr(bilinear_baseline(frame), full)
    return metrics


def evaluate(
    models: HandModels,
    bundle,
    views: Sequence[int],
    settings: RenderSettings,
    run_dir: Optional[Path] = None,
    seed: int = 0,
    limit: Optional[int] = None,
) -> MetricReport:
    """
    PSNR and SSIM of every (pose, test view) render against its ground-truth crop.

    With a run directory, per-frame lines go to metrics.jsonl and the
    aggregate to report.json.
    """
    report = MetricReport()
    frames = test_frames(bundle, views, limit)
    logger.info("=" * 70)
    logger.info("Evaluating %d frames", len(frames))
    logger.info("=" * 70)

    grids = {}
    for p, v in frames:
        record = bundle.poses[p]
        if p not in grids:
            grids[p] = pose_grid(models, record.pose, settings)
        frame = render_frame(models, record.pose, bundle.cameras[v], record.identity, settings, seed=seed, grid=grids[p])
        metrics = score_frame(models, bundle, p, v, settings, frame)
        report.frames.append(metrics)
        logger.info("  %s: PSNR %.2f dB, SSIM %.3f, %d rays alive", metrics.frame, metrics.psnr, metrics.ssim, metrics.rays_alive)
        if run_dir is not None:
            append_jsonl(metrics.log_record(), Path(run_dir) / METRICS_LOG)

    if report.frames:
        logger.info("Mean PSNR %.2f dB, mean SSIM %.3f", report.psnr, report.ssim)
    if run_dir is not None:
        write_json(report.to_dict(), Path(run_dir) / REPORT_FILE)
    return report


def _bench_mode(models, bundle, frames, settings, dense: bool, seed: int) -> dict:
    samples, ms, pruned, scores = 0, 0.0, [], []
    grids = {}
    for p, v in frames:
        record = bundle.poses[p]
        grid = None
        if not dense:
            if p not in grids:
                grids[p] = pose_grid(models, record.pose, settings)
            grid = grids[p]
        frame = render_frame(models, record.pose, bundle.cameras[v], record.identity, settings, seed=seed, grid=grid, dense=dense)
        target = ground_truth_crop(bundle.image(p, v), frame.transform, settings, settings.downscale)
        samples += frame.samples
        ms += frame.ms
        pruned.append(frame.pruned_fraction)
        scores.append(psnr(frame.rgb, target))
    count = max(len(frames), 1)
    return {
        "frames": len(frames),
        "samples_evaluated": samples,
        "ms_per_frame": ms / count,
        "pruned_fraction": float(np.mean(pruned)) if pruned else 0.0,
        "psnr": float(np.mean(scores)) if scores else 0.0,
    }


def bench_pruning(
    models: HandModels,
    bundle,
    views: Sequence[int],
    settings: RenderSettings,
    run_dir: Optional[Path] = None,
    max_frames: Optional[int] = 4,
    seed: int = 0,
) -> dict:
    """
    Compare occupancy-bounded 8+8 rendering against dense fixed-bounds rendering.

    Mode "pruned" uses occupancy bounds and ray pruning; mode "dense" uses
    scene-box bounds and `dense_samples` uniform samples on every ray that
    hits the box. The speedup is the ratio of samples evaluated.
    """
    frames = test_frames(bundle, views, max_frames)
    logger.info("=" * 70)
    logger.info("Benchmarking pruning on %d frames", len(frames))
    logger.info("=" * 70)

    pruned = _bench_mode(models, bundle, frames, settings, dense=False, seed=seed)
    dense = _bench_mode(models, bundle, frames, settings, dense=True, seed=seed)
    speedup = dense["samples_evaluated"] / max(pruned["samples_evaluated"], 1)
    report = {
        "pruned": pruned,
        "dense": dense,
        "sample_speedup": speedup,
        "time_speedup": dense["ms_per_frame"] / max(pruned["ms_per_frame"], 1e-9),
        "psnr_difference": dense["psnr"] - pruned["psnr"],
    }
    logger.info("  pruned: %d samples, %.1f ms/frame, %.1f%% rays pruned, PSNR %.2f dB",
                pruned["samples_evaluated"], pruned["ms_per_frame"], 100 * pruned["pruned_fraction"], pruned["psnr"])
    logger.info("  dense:  %d samples, %.1f ms/frame, PSNR %.2f dB",
                dense["samples_evaluated"], dense["ms_per_frame"], dense["psnr"])
    logger.info("  sample speedup %.1fx", speedup)
    if run_dir is not None:
        write_json(report, Path(run_dir) / BENCH_FILE)
    return report
