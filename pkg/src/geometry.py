"""
Hand skeletons and the rigid per-bone deformation to the canonical pose.

Joint order: wrist 0, then four joints per finger from base to tip
(thumb 1-4, index 5-8, middle 9-12, ring 13-16, pinky 17-20). Bone b joins
joint PARENTS[b + 1] to joint b + 1.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from src.camera import Camera

logger = logging.getLogger(__name__)

NUM_JOINTS = 21
PARENTS = (-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19)
BONES = tuple((PARENTS[child], child) for child in range(1, NUM_JOINTS))
PALM_JOINTS = (0, 1, 5, 9, 13, 17)
HANDEDNESS = ("right", "left")

MIN_BONE_LENGTH = 1e-9
ANTIPARALLEL_TOLERANCE = 1e-9


class GeometryError(ValueError):
    """Raised for malformed skeletons, degenerate bones or joints behind a camera."""
    pass


@dataclass
class Skeleton:
    joints: np.ndarray
    handedness: str = "right"
    parents: tuple = field(default=PARENTS)

    def __post_init__(self) -> None:
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.shape != (NUM_JOINTS, 3):
            raise GeometryError(f"Skeleton needs {NUM_JOINTS}x3 joints, got shape {self.joints.shape}")
        if self.handedness not in HANDEDNESS:
            raise GeometryError(f"Handedness must be one of {HANDEDNESS}, got '{self.handedness}'")
        self.parents = tuple(int(p) for p in self.parents)
        if len(self.parents) != NUM_JOINTS or self.parents[0] != -1:
            raise GeometryError(f"Parent list must have {NUM_JOINTS} entries with joint 0 as root")

    @property
    def root(self) -> np.ndarray:
        return self.joints[0]

    @property
    def bones(self) -> tuple:
        return tuple((self.parents[c], c) for c in range(1, NUM_JOINTS))

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """(starts, ends) of every bone, each (20, 3)."""
        bones = np.asarray(self.bones)
        return self.joints[bones[:, 0]], self.joints[bones[:, 1]]

    def bone_lengths(self) -> np.ndarray:
        starts, ends = self.segments()
        return np.linalg.norm(ends - starts, axis=1)

    def to_dict(self) -> dict:
        return {"handedness": self.handedness, "joints": self.joints.tolist(), "parents": list(self.parents)}

    @classmethod
    def from_dict(cls, data: dict) -> "Skeleton":
        try:
            return cls(data["joints"], data.get("handedness", "right"), tuple(data.get("parents", PARENTS)))
        except KeyError as exc:
            raise GeometryError(f"Skeleton entry is missing key {exc}") from None


@dataclass
class TwoHandPose:
    """A right hand and an optional left hand in one world frame."""

    right: Skeleton
    left: Optional[Skeleton] = None

    @property
    def offset(self) -> Optional[np.ndarray]:
        if self.left is None:
            return None
        return self.left.root - self.right.root

    def hands(self) -> Iterator[Skeleton]:
        yield self.right
        if self.left is not None:
            yield self.left

    def all_joints(self) -> np.ndarray:
        return np.concatenate([hand.joints for hand in self.hands()])


@dataclass
class BoneTransform:
    """x_canonical = R x_observed + t for points of one bone."""

    R: np.ndarray
    t: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t


def canonicalize(skeleton: Skeleton) -> Skeleton:
    return Skeleton(skeleton.joints - skeleton.joints[0], skeleton.handedness, skeleton.parents)


def mirror_x(points: np.ndarray) -> np.ndarray:
    mirrored = np.array(points, dtype=np.float64, copy=True)
    mirrored[..., 0] = -mirrored[..., 0]
    return mirrored


def mirror_skeleton(skeleton: Skeleton) -> Skeleton:
    flipped = "left" if skeleton.handedness == "right" else "right"
    return Skeleton(mirror_x(skeleton.joints), flipped, skeleton.parents)


def mirror_pose(pose: TwoHandPose) -> TwoHandPose:
    """Mirror the whole scene about x = 0; the mirrored left hand becomes the right hand."""
    if pose.left is None:
        raise GeometryError("Mirroring a scene needs both hands")
    return TwoHandPose(right=mirror_skeleton(pose.left), left=mirror_skeleton(pose.right))


def right_query_frame(points: np.ndarray, pose: TwoHandPose) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) - pose.right.root


def left_query_frame(points: np.ndarray, pose: TwoHandPose) -> np.ndarray:
    """Re-express points in the mirrored, root-centered frame of the left hand."""
    if pose.left is None:
        raise GeometryError("Pose has no left hand")
    return mirror_x(np.asarray(points, dtype=np.float64) - pose.left.root)


def query_skeleton(skeleton: Skeleton) -> Skeleton:
    """The right-handed, root-centered skeleton a hand is queried with."""
    canonical = canonicalize(skeleton)
    if skeleton.handedness == "left":
        return Skeleton(mirror_x(canonical.joints), "right", skeleton.parents)
    return canonical


def to_query_frame(points: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    local = np.asarray(points, dtype=np.float64) - skeleton.root
    return mirror_x(local) if skeleton.handedness == "left" else local


def point_segment_distance(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """(m, b) Euclidean distances from m points to b segments."""
    points = np.asarray(points, dtype=np.float64)
    axis = ends - starts
    length_sq = np.maximum(np.einsum("bi,bi->b", axis, axis), MIN_BONE_LENGTH ** 2)
    rel = points[:, None, :] - starts[None, :, :]
    s = np.clip(np.einsum("mbi,bi->mb", rel, axis) / length_sq, 0.0, 1.0)
    closest = starts[None] + s[..., None] * axis[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def _check_bones(skeleton: Skeleton, label: str) -> None:
    lengths = skeleton.bone_lengths()
    bad = np.flatnonzero(lengths < MIN_BONE_LENGTH)
    if bad.size:
        raise GeometryError(f"Bone {int(bad[0])} of the {label} skeleton has zero length")


def _kabsch(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Proper rotation R minimizing sum |R (source - mean) - (target - mean)|^2."""
    src = source - source.mean(axis=0)
    dst = target - target.mean(axis=0)
    U, _, Vt = np.linalg.svd(src.T @ dst)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def shortest_arc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Minimal rotation taking unit vector a onto unit vector b.

    Rules:
    - Parallel vectors give the identity
    - Antiparallel vectors rotate by pi about cross(a, e_k), where e_k is the
      coordinate axis least aligned with a
    """
    c = float(np.dot(a, b))
    if c > 1.0 - 1e-15:
        return np.eye(3)
    if c < -1.0 + ANTIPARALLEL_TOLERANCE:
        helper = np.zeros(3)
        helper[int(np.argmin(np.abs(a)))] = 1.0
        axis = np.cross(a, helper)
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    v = np.cross(a, b)
    K = _skew(v)
    return np.eye(3) + K + K @ K * ((1.0 - c) / float(np.dot(v, v)))


def bone_transforms(observed: Skeleton, canonical: Skeleton) -> list[BoneTransform]:
    """
    Per-bone rigid transforms from the observed pose to the canonical pose.

    The palm is aligned rigidly first; each bone then takes the shortest arc
    from its palm-aligned direction to the canonical direction, and its parent
    joint lands exactly on the canonical parent joint.

    Raises:
        GeometryError: If either skeleton has a zero-length bone.
    """
    _check_bones(observed, "observed")
    _check_bones(canonical, "canonical")
    palm = list(PALM_JOINTS)
    R_palm = _kabsch(observed.joints[palm], canonical.joints[palm])

    transforms = []
    for parent, child in observed.bones:
        obs_dir = R_palm @ (observed.joints[child] - observed.joints[parent])
        can_dir = canonical.joints[child] - canonical.joints[parent]
        R_arc = shortest_arc(obs_dir / np.linalg.norm(obs_dir), can_dir / np.linalg.norm(can_dir))
        R = R_arc @ R_palm
        t = canonical.joints[parent] - R @ observed.joints[parent]
        transforms.append(BoneTransform(R, t))
    return transforms


def segment_points(points: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Nearest bone per point; ties go to the lowest bone index."""
    starts, ends = skeleton.segments()
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(point_segment_distance(points, starts, ends), axis=1)


def deform_to_canonical(
    points: np.ndarray,
    observed: Skeleton,
    canonical: Skeleton,
    assignment: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Move each point rigidly with its nearest observed bone into the canonical pose.

    Args:
        points: (m, 3) points in the frame of `observed`.
        observed: Skeleton the points follow.
        canonical: Target skeleton with the same topology.
        assignment: Optional precomputed bone index per point.

    Returns:
        (m, 3) deformed points.
    """
    points = np.asarray(points, dtype=np.float64)
    if assignment is None:
        assignment = segment_points(points, observed)
    transforms = bone_transforms(observed, canonical)
    out = np.empty_like(points)
    for b, transform in enumerate(transforms):
        picked = assignment == b
        if np.any(picked):
            out[picked] = transform.apply(points[picked])
    return out


def project_skeleton(skeleton: Skeleton, cam: Camera) -> np.ndarray:
    """
    Pinhole projection of all joints.

    Raises:
        GeometryError: If a joint lies on or behind the camera plane.
    """
    uv, z = cam.project(skeleton.joints)
    behind = np.flatnonzero(z <= 0)
    if behind.size:
        raise GeometryError(f"Joint {int(behind[0])} is behind the camera (z={z[behind[0]]:.4f})")
    return uv
