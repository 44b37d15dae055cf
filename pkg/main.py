#!/usr/bin/env python3
"""
Command-line entry point for the hand volume renderer.

Run with: uv run python main.py <command> [options]

    synth         render a synthetic capsule-hand dataset
    carve         carve labeled point clouds from the training views
    train-occ     fit the occupancy model to the carved clouds
    train-render  fit the radiance model, appearance codes and upsampler
    render        render one view of one pose to PNG
    transfer      render a pose with another identity's appearance code
    eval          PSNR/SSIM report on the test views
    bench         occupancy pruning vs dense sampling
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from src.appearance import UnknownIdentityError, transfer_render
from src.carving import carve_dataset, read_point_cloud
from src.checkpoint import CheckpointError
from src.config import ConfigError, RunConfig, dump_config, load_config
from src.dataset import DatasetError, SceneBundle, load_dataset
from src.evaluation import METRICS_LOG, bench_pruning, evaluate, score_frame
from src.imaging import write_png
from src.occupancy import TrainingError, split_by_hand, train_occupancy
from src.render import HandModels, LossWeights, RenderSettings, render_frame, train_renderer
from src.synth import make_dataset
from src.upsampler import restore_full, upsample
from src.utils import append_jsonl

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3

OCCUPANCY_CHECKPOINT = "occupancy.ckpt"
MODEL_CHECKPOINT = "model.ckpt"


def open_dataset(config: RunConfig) -> SceneBundle:
    """Load the configured dataset and check the view split against it."""
    bundle = load_dataset(config.data_path)
    for key in ("train_views", "test_views"):
        bad = [v for v in getattr(config.data, key) if not 0 <= v < bundle.num_views]
        if bad:
            raise ConfigError(f"data.{key} lists views {bad} but the dataset has {bundle.num_views} views")
    return bundle


def run_dir(config: RunConfig) -> Path:
    path = config.run_path
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_models(config: RunConfig, bundle: SceneBundle) -> HandModels:
    """Models of a run, restored from the newest checkpoint present."""
    models = HandModels.build(config, bundle.code_ids(), bundle.canonical)
    full = config.run_path / MODEL_CHECKPOINT
    occ = config.run_path / OCCUPANCY_CHECKPOINT
    if full.exists():
        models.load(full)
    elif occ.exists():
        models.load(occ, parts=("occ",))
        logger.warning("No renderer checkpoint at %s; radiance, codes and upsampler are untrained", full)
    else:
        logger.warning("No checkpoints in %s; using untrained models", config.run_path)
    return models


def resolve_pose(bundle: SceneBundle, pose: str) -> int:
    names = [record.name for record in bundle.poses]
    if pose in names:
        return names.index(pose)
    try:
        index = int(pose)
    except ValueError:
        raise DatasetError(f"Unknown pose '{pose}'; available: {', '.join(names)}") from None
    if not 0 <= index < len(names):
        raise DatasetError(f"Pose index {index} out of range (dataset has {len(names)} poses)")
    return index


def check_view(bundle: SceneBundle, view: int) -> int:
    if not 0 <= view < bundle.num_views:
        raise DatasetError(f"View {view} out of range (dataset has {bundle.num_views} views)")
    return view


def write_frame(models: HandModels, frame, settings: RenderSettings, cam, out: Path, full: bool) -> None:
    image = upsample(models.upsampler, frame) if settings.downscale % 2 == 0 else frame.rgb
    if full:
        image = restore_full(image, frame.transform, (cam.height, cam.width), (settings.crop_size, settings.crop_size))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(image, out)
    logger.info("Wrote %dx%d render to %s (%d rays alive, %.0f ms)", image.shape[1], image.shape[0], out, frame.rays_alive, frame.ms)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_synth(args, config: RunConfig) -> None:
    make_dataset(
        n_views=args.views,
        n_poses=args.poses,
        n_identities=args.ids,
        out_dir=Path(args.out),
        seed=args.seed,
        articulation=args.articulation,
        image_size=args.size,
        two_hands=args.two_hands,
    )


def cmd_carve(args, config: RunConfig) -> None:
    bundle = open_dataset(config)
    paths = carve_dataset(
        bundle,
        config.data.train_views,
        candidates=config.carving.candidates,
        sigma_max=config.carving.sigma_max,
        rho=config.carving.rho,
        seed=config.seeds.carving,
        workers=config.carving.workers,
        normalization=config.image.normalization,
    )
    logger.info("Wrote %d point clouds to %s", len(paths), bundle.clouds_dir())


def cmd_train_occ(args, config: RunConfig) -> None:
    bundle = open_dataset(config)
    clouds = []
    for record in bundle.poses:
        points, labels = read_point_cloud(bundle.clouds_dir() / f"{record.name}.ocpc")
        if labels is None:
            raise DatasetError(f"Point cloud for {record.name} has no labels; run carve first")
        clouds.extend(split_by_hand(points, labels, record.pose))

    out = run_dir(config)
    dump_config(config, out / "config.yaml")
    models = HandModels.build(config, bundle.code_ids(), bundle.canonical)
    report = train_occupancy(
        models.occupancy,
        clouds,
        steps=args.steps or config.optim.occ_steps,
        lr=config.optim.occ_lr,
        batch_size=config.optim.occ_batch,
        seed=config.seeds.training,
        canonical=bundle.canonical,
        val_fraction=config.training.val_fraction,
        eval_every=config.training.eval_every or None,
        log_every=config.training.log_every,
        log_path=out / "occupancy_log.jsonl",
        betas=(config.optim.beta1, config.optim.beta2),
        eps=config.optim.eps,
    )
    models.save(out / OCCUPANCY_CHECKPOINT, parts=("occ",))
    logger.info("Occupancy training done: %d steps, validation IoU %.3f", report.steps, report.final_iou)


def cmd_train_render(args, config: RunConfig) -> None:
    bundle = open_dataset(config)
    out = run_dir(config)
    models = HandModels.build(config, bundle.code_ids(), bundle.canonical)
    occ_path = out / OCCUPANCY_CHECKPOINT
    if occ_path.exists():
        models.load(occ_path, parts=("occ",))
    else:
        logger.warning("No occupancy checkpoint at %s; training against an untrained occupancy model", occ_path)

    settings = RenderSettings.from_config(config, bundle)
    report = train_renderer(
        models,
        bundle,
        config.data.train_views,
        settings,
        steps=args.steps or config.optim.render_steps,
        lr=config.optim.lr,
        weights=LossWeights(config.loss.l1, config.loss.mse, config.loss.code_reg, config.loss.upsample),
        seed=config.seeds.training,
        jitter=(config.image.jitter_scale, config.image.jitter_shift),
        log_every=config.training.log_every,
        log_path=out / "render_log.jsonl",
        betas=(config.optim.beta1, config.optim.beta2),
        eps=config.optim.eps,
    )
    models.save(out / MODEL_CHECKPOINT)
    logger.info("Renderer training done: %d steps, last PSNR %.2f dB", report.steps, report.final_psnr)


def cmd_render(args, config: RunConfig) -> None:
    bundle = open_dataset(config)
    p = resolve_pose(bundle, args.pose)
    view = check_view(bundle, args.view)
    code_id = args.id or bundle.poses[p].identity
    models = load_models(config, bundle)
    settings = RenderSettings.from_config(config, bundle)
    cam = bundle.cameras[view]
    frame = render_frame(models, bundle.poses[p].pose, cam, code_id, settings, seed=config.seeds.training)
    write_frame(models, frame, settings, cam, Path(args.out), args.full)
    metrics = score_frame(models, bundle, p, view, settings, frame)
    append_jsonl(metrics.log_record(), run_dir(config) / METRICS_LOG)
    logger.info("PSNR %.2f dB, SSIM %.3f against the dataset image", metrics.psnr, metrics.ssim)


def cmd_transfer(args, config: RunConfig) -> None:
    bundle = open_dataset(config)
    p = resolve_pose(bundle, args.pose_id)
    view = check_view(bundle, args.view if args.view is not None else (config.data.test_views or [0])[0])
    models = load_models(config, bundle)
    settings = RenderSettings.from_config(config, bundle)
    cam = bundle.cameras[view]
    frame = transfer_render(models, bundle.poses[p].pose, args.appearance_id, cam, settings, seed=config.seeds.training)
    write_frame(models, frame, settings, cam, Path(args.out), args.full)


def cmd_eval(args, config: RunConfig) -> None:
    bundle = open_dataset(config)
    models = load_models(config, bundle)
    settings = RenderSettings.from_config(config, bundle)
    evaluate(models, bundle, config.data.test_views, settings, run_dir(config), seed=config.seeds.training)


def cmd_bench(args, config: RunConfig) -> None:
    bundle = open_dataset(config)
    models = load_models(config, bundle)
    settings = RenderSettings.from_config(config, bundle)
    bench_pruning(
        models,
        bundle,
        config.data.test_views,
        settings,
        run_dir(config),
        max_frames=config.training.bench_frames or None,
        seed=config.seeds.training,
    )


COMMANDS = {
    "synth": cmd_synth,
    "carve": cmd_carve,
    "train-occ": cmd_train_occ,
    "train-render": cmd_train_render,
    "render": cmd_render,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Skeleton-conditioned volumetric hand renderer")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="render a synthetic dataset")
    synth.add_argument("--views", type=int, default=10)
    synth.add_argument("--poses", type=int, default=6)
    synth.add_argument("--ids", type=int, default=2)
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--size", type=int, default=192, help="image side in pixels")
    synth.add_argument("--articulation", type=float, default=0.5)
    synth.add_argument("--two-hands", action="store_true")

    for name in ("carve", "train-occ", "train-render", "render", "transfer", "eval", "bench"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="YAML run configuration")
        if name in ("train-occ", "train-render"):
            cmd.add_argument("--steps", type=int, default=None, help="override the configured step count")
        if name in ("render", "transfer"):
            cmd.add_argument("--out", required=True)
            cmd.add_argument("--full", action="store_true", help="paste the crop back into the full frame")
        if name == "render":
            cmd.add_argument("--view", type=int, required=True)
            cmd.add_argument("--pose", required=True, help="pose index or name")
            cmd.add_argument("--id", default=None, help="appearance identity (defaults to the pose's own)")
        if name == "transfer":
            cmd.add_argument("--pose-id", required=True, help="pose index or name supplying the skeleton")
            cmd.add_argument("--appearance-id", required=True, help="identity supplying the appearance code")
            cmd.add_argument("--view", type=int, default=None)
    return parser


def main(argv: Optional[list] = None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        config = load_config(Path(args.config) if getattr(args, "config", None) else None)
        COMMANDS[args.command](args, config)
        return EXIT_OK

    except (ConfigError, UnknownIdentityError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE

    except (DatasetError, CheckpointError, TrainingError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA

    except Exception as exc:  # noqa: BLE001
        logger.error("Unexpected error: %s", exc, exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
