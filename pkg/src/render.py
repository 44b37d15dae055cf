"""
Full-frame rendering and end-to-end training of the radiance stack.

A frame is rendered in a crop around the projected skeleton at 1/k of the
crop resolution: crop camera -> rays -> occupancy bounds and pruning ->
uniform + hierarchical samples -> canonical-space occupancy query ->
radiance MLP -> compositing. Pruned pixels keep the background color.
"""
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from src.appearance import CodeTable, get_code, regularize_codes
from src.camera import Camera, crop_camera, crop_transform, square_bbox
from src.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from src.geometry import Skeleton, TwoHandPose, project_skeleton
from src.imaging import downscale, warp_image
from src.metrics import psnr
from src.nn import Adam, l1_loss, mse_loss
from src.occupancy import OccupancyGrid, OccupancyModel, TrainingError, query_canonical, scene_probability
from src.radiance import RadianceModel, SampleInputs, composite, eval_radiance
from src.rays import compute_bounds, fixed_bounds, generate_rays, hierarchical_samples, uniform_samples
from src.tensor import Tensor, no_grad, scatter_rows
from src.upsampler import UpsamplerModel, frame_input
from src.utils import Box, append_jsonl

logger = logging.getLogger(__name__)

# Sample spacings enter the density quadrature in millimetres.
DEPTH_UNIT = 1e-3
MARCH_MARGIN = 0.01
PARTS = ("occ", "rad", "app", "up")

ProbabilityFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class RenderSettings:
    k_u: int = 8
    k_h: int = 8
    p_min: float = 0.1
    p_max: float = 0.99
    d_fix: float = 0.02
    crop_size: int = 128
    downscale: int = 2
    crop_margin: float = 0.25
    grid_spacing: float = 0.004
    dense_samples: int = 64
    background: tuple = (0.0, 0.0, 0.0)
    scene_box: Box = field(default_factory=lambda: Box.cube((0.0, 0.0, 0.0), 0.25))
    hand_radius: float = 0.012

    @property
    def frame_size(self) -> int:
        return self.crop_size // self.downscale

    @classmethod
    def from_config(cls, config, bundle=None) -> "RenderSettings":
        settings = cls(
            k_u=config.sampling.k_u,
            k_h=config.sampling.k_h,
            p_min=config.sampling.p_min,
            p_max=config.sampling.p_max,
            d_fix=config.sampling.d_fix,
            crop_size=config.image.crop_size,
            downscale=config.image.downscale,
            crop_margin=config.image.crop_margin,
            grid_spacing=config.sampling.grid_spacing,
            dense_samples=config.sampling.dense_samples,
        )
        if bundle is not None:
            settings.scene_box = bundle.box
            settings.hand_radius = float(np.max(bundle.radii))
        return settings


class HandModels:
    """The four trainable parts of a run, saved together under occ./rad./app./up. prefixes."""

    def __init__(
        self,
        occupancy: OccupancyModel,
        radiance: RadianceModel,
        codes: CodeTable,
        upsampler: UpsamplerModel,
        canonical: Skeleton,
    ) -> None:
        self.occupancy = occupancy
        self.radiance = radiance
        self.codes = codes
        self.upsampler = upsampler
        self.canonical = canonical

    @classmethod
    def build(cls, config, identities: Sequence[str], canonical: Skeleton) -> "HandModels":
        m = config.model
        seed = config.seeds.model
        return cls(
            OccupancyModel(seed, m.feature_dim, m.embed_dim, m.occ_hidden, m.occ_blocks),
            RadianceModel(
                seed,
                feature_dim=m.feature_dim,
                code_dim=m.code_dim,
                extra_dim=m.extra_dim,
                width=m.width,
                depth=m.depth,
                use_view_dirs=m.use_view_dirs,
                use_probability=m.use_probability,
                use_appearance=m.use_appearance,
            ),
            CodeTable(identities, m.code_dim),
            UpsamplerModel(seed, m.extra_dim, m.up_width, m.up_blocks),
            canonical,
        )

    def _modules(self) -> dict:
        return {"occ": self.occupancy, "rad": self.radiance, "app": self.codes, "up": self.upsampler}

    def state_dict(self, parts: Sequence[str] = PARTS) -> dict[str, np.ndarray]:
        state = {}
        for name, module in self._modules().items():
            if name in parts:
                state.update(module.state_dict(f"{name}."))
        return state

    def load_state_dict(self, state: dict, parts: Sequence[str] = PARTS) -> None:
        for name, module in self._modules().items():
            if name in parts:
                module.load_state_dict(state, f"{name}.")

    def save(self, path: Path, parts: Sequence[str] = PARTS) -> None:
        save_checkpoint(path, self.state_dict(parts))
        logger.info("Saved %s to %s", "/".join(parts), path)

    def load(self, path: Path, parts: Sequence[str] = PARTS) -> None:
        """
        Raises:
            CheckpointError: If the file is unreadable or lacks or mis-shapes a parameter.
        """
        state = load_checkpoint(path)
        try:
            self.load_state_dict(state, parts)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: {exc}") from None
        logger.info("Loaded %s from %s", "/".join(parts), path)

    def trainable(self) -> list[Tensor]:
        """Parameters updated by renderer training; occupancy stays frozen."""
        return self.radiance.parameters() + self.codes.parameters() + self.upsampler.parameters()


@dataclass
class RenderedFrame:
    rgb: np.ndarray
    features: np.ndarray
    opacity: np.ndarray
    pruned: np.ndarray
    rays_alive: int
    samples: int
    fallbacks: int
    transform: np.ndarray
    camera: Camera
    ms: float = 0.0
    rgb_tensor: Optional[Tensor] = None
    extra_tensor: Optional[Tensor] = None

    @property
    def pruned_fraction(self) -> float:
        return float(self.pruned.mean()) if self.pruned.size else 0.0


def frame_crop(
    pose: TwoHandPose,
    cam: Camera,
    settings: RenderSettings,
    jitter: tuple = (0.0, 0.0),
    seed: Optional[int] = None,
) -> tuple[np.ndarray, Camera]:
    """
    Crop transform and crop camera for the square around the projected skeleton(s).

    The square grows by `crop_margin` of its side plus the largest bone radius
    reprojected at the nearest joint depth.

    Raises:
        GeometryError: If a joint projects from behind the camera.
    """
    uv = np.concatenate([project_skeleton(hand, cam) for hand in pose.hands()])
    _, z = cam.project(pose.all_joints())
    pad = settings.hand_radius * float(cam.K[0, 0]) / float(z.min())
    bbox = square_bbox(uv, settings.crop_margin, pad)
    target = (settings.crop_size, settings.crop_size)
    T = crop_transform(bbox, target, jitter, seed)
    return T, crop_camera(cam, T, settings.downscale, target)


def march_box(pose: TwoHandPose, settings: RenderSettings) -> Box:
    """Skeleton bounding box grown by the largest bone radius plus 1 cm, clipped to the scene box."""
    grown = Box.around(pose.all_joints(), settings.hand_radius + MARCH_MARGIN)
    try:
        return grown.intersect(settings.scene_box)
    except ValueError:
        logger.warning("Pose lies outside the scene box; marching the whole scene box")
        return settings.scene_box


def pose_grid(models: HandModels, pose: TwoHandPose, settings: RenderSettings) -> Optional[OccupancyGrid]:
    """Cached occupancy for bounds, or None when grid_spacing is 0."""
    if settings.grid_spacing <= 0:
        return None
    return OccupancyGrid(scene_probability(models.occupancy, pose), march_box(pose, settings), settings.grid_spacing)


def _background_frame(models, T, crop_cam, settings, count, start) -> RenderedFrame:
    height, width = crop_cam.height, crop_cam.width
    d = models.radiance.extra_dim
    background = np.asarray(settings.background, dtype=np.float32)
    rgb = np.broadcast_to(background, (height, width, 3)).copy()
    return RenderedFrame(
        rgb=rgb,
        features=np.zeros((height, width, d), dtype=np.float32),
        opacity=np.zeros((height, width), dtype=np.float32),
        pruned=np.ones((height, width), dtype=bool),
        rays_alive=0,
        samples=0,
        fallbacks=0,
        transform=T,
        camera=crop_cam,
        ms=(time.perf_counter() - start) * 1000.0,
        rgb_tensor=Tensor(rgb.reshape(count, 3)),
        extra_tensor=Tensor(np.zeros((count, d))),
    )


def render_frame(
    models: HandModels,
    pose: TwoHandPose,
    cam: Camera,
    code_id: str,
    settings: RenderSettings,
    seed: int = 0,
    stream: int = 0,
    grid: Optional[ProbabilityFn] = None,
    jitter: tuple = (0.0, 0.0),
    randomize: bool = False,
    dense: bool = False,
    requires_grad: bool = False,
    crop: Optional[tuple] = None,
) -> RenderedFrame:
    """
    Render one view of a pose with an identity's appearance code.

    Args:
        grid: Probability function used for bounds and hierarchical weights;
            defaults to a fresh grid cache (or the exact model when
            grid_spacing is 0).
        randomize: Jitter sample depths within their strata.
        dense: Scene-box bounds, no occupancy pruning and `dense_samples`
            uniform samples per ray instead of the 8+8 scheme.
        requires_grad: Keep the autodiff graph for training.
        crop: Precomputed (T, crop camera) pair.

    Raises:
        UnknownIdentityError: If `code_id` has no appearance code.
    """
    start = time.perf_counter()
    get_code(models.codes, code_id)
    T, crop_cam = crop if crop is not None else frame_crop(pose, cam, settings, jitter, seed + stream)
    batch = generate_rays(crop_cam)
    count = len(batch)

    if dense:
        batch = fixed_bounds(batch, settings.scene_box)
        samples = uniform_samples(batch, settings.dense_samples, seed, stream, randomize)
        fallbacks = 0
    else:
        if grid is None:
            grid = pose_grid(models, pose, settings) or scene_probability(models.occupancy, pose)
        batch = compute_bounds(batch, grid, march_box(pose, settings), settings.p_min, settings.p_max, settings.d_fix)
        coarse = uniform_samples(batch, settings.k_u, seed, stream, randomize)
        weights = grid(coarse.points.reshape(-1, 3)).reshape(coarse.depths.shape) if coarse.num_rays else coarse.depths
        samples, fallbacks = hierarchical_samples(batch, coarse, weights, settings.k_h, seed, stream)

    if samples.num_rays == 0:
        logger.debug("All %d rays pruned", count)
        return _background_frame(models, T, crop_cam, settings, count, start)

    rays, k = samples.depths.shape
    occupancy = query_canonical(models.occupancy, samples.points.reshape(-1, 3), pose, models.canonical)
    inputs = SampleInputs(
        features=occupancy.features,
        signed=occupancy.signed,
        directions=np.repeat(samples.directions, k, axis=0),
        code_id=code_id,
    )
    d = models.radiance.extra_dim
    with nullcontext() if requires_grad else no_grad():
        out = eval_radiance(models.radiance, inputs, models.codes)
        result = composite(
            out.sigma.reshape(rays, k),
            out.color.reshape(rays, k, 3),
            samples.deltas / DEPTH_UNIT,
            np.asarray(settings.background),
            out.extra.reshape(rays, k, d),
        )
        rgb = scatter_rows(result.rgb, samples.rays, count, settings.background)
        extra = scatter_rows(result.extra, samples.rays, count, 0.0)
        opacity = scatter_rows(result.opacity.reshape(rays, 1), samples.rays, count, 0.0)

    height, width = crop_cam.height, crop_cam.width
    return RenderedFrame(
        rgb=rgb.numpy().reshape(height, width, 3).copy(),
        features=extra.numpy().reshape(height, width, d).copy(),
        opacity=opacity.numpy().reshape(height, width).copy(),
        pruned=~batch.alive.reshape(height, width),
        rays_alive=batch.alive_count,
        samples=rays * k,
        fallbacks=fallbacks,
        transform=T,
        camera=crop_cam,
        ms=(time.perf_counter() - start) * 1000.0,
        rgb_tensor=rgb,
        extra_tensor=extra,
    )


def ground_truth_crop(image: np.ndarray, T: np.ndarray, settings: RenderSettings, k: int) -> np.ndarray:
    """Crop of a full-frame image through T, box-downscaled by k."""
    crop = warp_image(image, T, (settings.crop_size, settings.crop_size), 0.0)
    return downscale(crop, k)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass
class LossWeights:
    l1: float = 0.6
    mse: float = 0.4
    code_reg: float = 1e-4
    upsample: float = 1.0


@dataclass
class RenderReport:
    steps: int = 0
    losses: list = field(default_factory=list)
    psnrs: list = field(default_factory=list)
    fallbacks: int = 0

    @property
    def final_psnr(self) -> float:
        return self.psnrs[-1] if self.psnrs else 0.0


def train_renderer(
    models: HandModels,
    bundle,
    views: Sequence[int],
    settings: RenderSettings,
    steps: int = 2000,
    lr: float = 5e-4,
    weights: Optional[LossWeights] = None,
    seed: int = 0,
    jitter: tuple = (0.0, 0.0),
    log_every: int = 50,
    log_path: Optional[Path] = None,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    frames: Optional[Sequence[tuple]] = None,
) -> RenderReport:
    """
    Fit the radiance MLP, appearance codes and upsampler to ground-truth crops.

    Each step renders one (pose, view) frame at low resolution and minimizes
    l1 * L1 + mse * MSE against the downscaled crop, plus the same loss on the
    x2 upsampled frame when the downscale factor is even, plus the code
    regularizer. The occupancy model is not updated.

    Args:
        frames: Optional fixed list of (pose, view) pairs to draw from.

    Raises:
        TrainingError: If there are no poses or no training views.
    """
    if frames is None:
        frames = [(p, v) for p in range(len(bundle.poses)) for v in views]
    frames = list(frames)
    if not frames:
        raise TrainingError("Renderer training needs at least one pose and one training view")
    weights = weights or LossWeights()

    k = settings.downscale
    train_upsampler = k % 2 == 0
    if not train_upsampler:
        logger.warning("Downscale factor %d is odd; the upsampler is not trained", k)

    rng = np.random.default_rng(seed)
    optimizer = Adam(models.trainable(), lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
    grids: dict[int, Optional[OccupancyGrid]] = {}
    report = RenderReport()
    size = settings.frame_size

    logger.info("=" * 70)
    logger.info("Training renderer: %d frames, %d steps, %dx%d renders", len(frames), steps, size, size)
    logger.info("=" * 70)

    for step in range(1, steps + 1):
        p, v = frames[int(rng.integers(len(frames)))]
        record = bundle.poses[p]
        if p not in grids:
            grids[p] = pose_grid(models, record.pose, settings)
        cam = bundle.cameras[v]
        crop = frame_crop(record.pose, cam, settings, jitter, seed + step)
        frame = render_frame(
            models,
            record.pose,
            cam,
            record.identity,
            settings,
            seed=seed,
            stream=step,
            grid=grids[p],
            randomize=True,
            requires_grad=True,
            crop=crop,
        )
        report.fallbacks += frame.fallbacks
        image = bundle.image(p, v)
        target = ground_truth_crop(image, crop[0], settings, k)

        pred = frame.rgb_tensor
        flat = target.reshape(-1, 3)
        loss = l1_loss(pred, flat) * weights.l1 + mse_loss(pred, flat) * weights.mse
        if train_upsampler:
            up_target = ground_truth_crop(image, crop[0], settings, k // 2).transpose(2, 0, 1)
            upsampled = models.upsampler(frame_input(pred, frame.extra_tensor, size, size))
            loss = loss + (l1_loss(upsampled, up_target) * weights.l1 + mse_loss(upsampled, up_target) * weights.mse) * weights.upsample
        loss = loss + regularize_codes(models.codes, weights.code_reg)

        loss.backward()
        optimizer.step()
        score = psnr(frame.rgb, target)
        report.losses.append(loss.item())
        report.psnrs.append(score)
        report.steps = step

        if step % log_every == 0 or step == steps:
            logger.info("  step %d/%d: loss %.4f, PSNR %.2f dB, %d rays alive", step, steps, loss.item(), score, frame.rays_alive)
            if log_path is not None:
                append_jsonl({"step": step, "loss": loss.item(), "psnr": score}, log_path)
    if report.fallbacks:
        logger.warning("Hierarchical sampling fell back to uniform weights on %d rays in total", report.fallbacks)
    return report
