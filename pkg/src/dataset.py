"""
Scene bundles: calibrated views, per-pose skeletons and the on-disk layout.

Layout under a dataset directory:

    cameras.json                       list of camera dicts
    manifest.json                      poses, identities, scene box, bone radii, image size
    poses/<pose>/skeleton.json         right hand
    poses/<pose>/skeleton_left.json    left hand (two-hand scenes only)
    poses/<pose>/view_<v>.png          RGB render
    poses/<pose>/mask_<v>.png          binary hand mask
    poses/<pose>/depth_<v>.bin         float32 ray distance, row-major, inf on background
    clouds/<pose>.ocpc                 carved point clouds (written by carving)
"""
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from src.camera import Camera, CameraError
from src.geometry import GeometryError, Skeleton, TwoHandPose, point_segment_distance
from src.imaging import read_mask, read_png, write_png
from src.utils import Box, read_json, write_json

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CAMERAS = "cameras.json"
FINGERS = 5
BONES_PER_FINGER = 4


class DatasetError(Exception):
    """Raised when a dataset directory is missing, malformed or cannot be written."""
    pass


@dataclass
class Identity:
    """Skin albedo of one person plus a per-finger brightness modulation."""

    name: str
    albedo: np.ndarray
    finger_modulation: np.ndarray = field(default_factory=lambda: np.ones(FINGERS))

    def __post_init__(self) -> None:
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        self.finger_modulation = np.asarray(self.finger_modulation, dtype=np.float64).reshape(FINGERS)

    def bone_colors(self) -> np.ndarray:
        """(20, 3) albedo per bone; bones 4f..4f+3 belong to finger f."""
        per_finger = np.clip(self.albedo[None, :] * self.finger_modulation[:, None], 0.0, 1.0)
        return np.repeat(per_finger, BONES_PER_FINGER, axis=0)

    def to_dict(self) -> dict:
        return {"albedo": self.albedo.tolist(), "finger_modulation": self.finger_modulation.tolist()}

    @classmethod
    def from_dict(cls, name: str, data: dict) -> "Identity":
        return cls(name, data["albedo"], data.get("finger_modulation", [1.0] * FINGERS))


@dataclass
class PoseRecord:
    name: str
    pose: TwoHandPose
    identity: str


@dataclass
class SceneBundle:
    root: Optional[Path]
    cameras: list[Camera]
    poses: list[PoseRecord]
    identities: dict[str, Identity]
    box: Box
    radii: np.ndarray
    canonical: Skeleton
    images: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    depths: dict = field(default_factory=dict)

    @property
    def num_views(self) -> int:
        return len(self.cameras)

    def pose_dir(self, pose: int) -> Path:
        if self.root is None:
            raise DatasetError("Scene bundle has no directory on disk")
        return self.root / "poses" / self.poses[pose].name

    def image(self, pose: int, view: int) -> np.ndarray:
        if (pose, view) not in self.images:
            self.images[(pose, view)] = read_png(self._file(pose, f"view_{view}.png"))
        return self.images[(pose, view)]

    def mask(self, pose: int, view: int) -> np.ndarray:
        if (pose, view) not in self.masks:
            self.masks[(pose, view)] = read_mask(self._file(pose, f"mask_{view}.png"))
        return self.masks[(pose, view)]

    def depth(self, pose: int, view: int) -> Optional[np.ndarray]:
        """Ray-distance buffer, or None when the dataset carries no depth."""
        if (pose, view) not in self.depths:
            path = self.pose_dir(pose) / f"depth_{view}.bin"
            if not path.exists():
                return None
            cam = self.cameras[view]
            data = np.fromfile(path, dtype="<f4")
            if data.size != cam.height * cam.width:
                raise DatasetError(f"Depth file {path} holds {data.size} values, expected {cam.height * cam.width}")
            self.depths[(pose, view)] = data.reshape(cam.height, cam.width)
        return self.depths[(pose, view)]

    def _file(self, pose: int, name: str) -> Path:
        path = self.pose_dir(pose) / name
        if not path.exists():
            raise DatasetError(f"Missing dataset file: {path}")
        return path

    def code_ids(self) -> list[str]:
        return list(self.identities)

    def oracle(self, points: np.ndarray, pose: int) -> np.ndarray:
        """Ground-truth membership of points in the capsule hands of a pose."""
        inside = np.zeros(len(points), dtype=bool)
        for hand in self.poses[pose].pose.hands():
            starts, ends = hand.segments()
            inside |= np.any(point_segment_distance(points, starts, ends) <= self.radii[None, :], axis=1)
        return inside

    def clouds_dir(self) -> Path:
        if self.root is None:
            raise DatasetError("Scene bundle has no directory on disk")
        return self.root / "clouds"


def _skeleton_payload(skeleton: Skeleton) -> dict:
    return skeleton.to_dict()


def write_dataset(bundle: SceneBundle, out_dir: Path) -> Path:
    """
    Write a bundle held in memory to `out_dir`.

    Files are written into a sibling staging directory which is renamed into
    place at the end, so an interrupted write never leaves a partial dataset.

    Raises:
        DatasetError: If `out_dir` exists and is not empty, or cannot be written.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise DatasetError(f"Output directory {out_dir} already exists and is not empty")
    staging = out_dir.with_name(out_dir.name + ".partial")
    try:
        if staging.exists():
            shutil.rmtree(staging)
        (staging / "poses").mkdir(parents=True)
        write_json([cam.to_dict() for cam in bundle.cameras], staging / CAMERAS)
        write_json(
            {
                "poses": [{"name": rec.name, "identity": rec.identity} for rec in bundle.poses],
                "identities": {name: ident.to_dict() for name, ident in bundle.identities.items()},
                "box": bundle.box.to_dict(),
                "radii": np.asarray(bundle.radii).tolist(),
                "canonical": bundle.canonical.to_dict(),
                "image_size": [bundle.cameras[0].height, bundle.cameras[0].width] if bundle.cameras else [0, 0],
            },
            staging / MANIFEST,
        )
        for p, rec in enumerate(bundle.poses):
            pose_dir = staging / "poses" / rec.name
            pose_dir.mkdir()
            write_json(_skeleton_payload(rec.pose.right), pose_dir / "skeleton.json")
            if rec.pose.left is not None:
                write_json(_skeleton_payload(rec.pose.left), pose_dir / "skeleton_left.json")
            for v in range(len(bundle.cameras)):
                write_png(bundle.images[(p, v)], pose_dir / f"view_{v}.png")
                write_png(bundle.masks[(p, v)], pose_dir / f"mask_{v}.png")
                if (p, v) in bundle.depths:
                    np.asarray(bundle.depths[(p, v)], dtype="<f4").tofile(pose_dir / f"depth_{v}.bin")
        if out_dir.exists():
            out_dir.rmdir()
        os.replace(staging, out_dir)
    except OSError as exc:
        raise DatasetError(f"Could not write dataset to {out_dir}: {exc}") from exc
    bundle.root = out_dir
    logger.info("Wrote %d poses x %d views to %s", len(bundle.poses), len(bundle.cameras), out_dir)
    return out_dir


def load_dataset(path: Path) -> SceneBundle:
    """
    Read the manifest, cameras and skeletons of a dataset; images load lazily.

    Raises:
        DatasetError: If required files are missing or malformed.
    """
    root = Path(path)
    for name in (MANIFEST, CAMERAS):
        if not (root / name).exists():
            raise DatasetError(f"Missing dataset file: {root / name}")
    try:
        manifest = read_json(root / MANIFEST)
        cameras = [Camera.from_dict(entry) for entry in read_json(root / CAMERAS)]
        identities = {name: Identity.from_dict(name, data) for name, data in manifest["identities"].items()}
        poses = []
        for entry in manifest["poses"]:
            pose_dir = root / "poses" / entry["name"]
            right = Skeleton.from_dict(read_json(pose_dir / "skeleton.json"))
            left_path = pose_dir / "skeleton_left.json"
            left = Skeleton.from_dict(read_json(left_path)) if left_path.exists() else None
            poses.append(PoseRecord(entry["name"], TwoHandPose(right, left), entry["identity"]))
        bundle = SceneBundle(
            root=root,
            cameras=cameras,
            poses=poses,
            identities=identities,
            box=Box.from_dict(manifest["box"]),
            radii=np.asarray(manifest["radii"], dtype=np.float64),
            canonical=Skeleton.from_dict(manifest["canonical"]),
        )
    except (KeyError, ValueError, OSError, CameraError, GeometryError) as exc:
        raise DatasetError(f"Malformed dataset at {root}: {exc}") from exc
    unknown = {rec.identity for rec in poses} - set(identities)
    if unknown:
        raise DatasetError(f"Poses reference unknown identities {sorted(unknown)} in {root / MANIFEST}")
    logger.info("Loaded dataset %s: %d poses, %d views, %d identities", root, len(poses), len(cameras), len(identities))
    return bundle
