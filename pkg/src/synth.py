"""
Procedural capsule hands and their analytic renders.

A hand is the union of 20 capsules, one per bone. Rendering intersects every
pixel ray with every capsule in closed form and shades the nearest hit with a
Lambertian model under one fixed directional light, so every point on the
hand has the same color in every view.
"""
import colorsys
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from src.camera import Camera
from src.dataset import Identity, PoseRecord, SceneBundle, write_dataset
from src.geometry import Skeleton, TwoHandPose, mirror_skeleton, point_segment_distance
from src.rays import generate_rays
from src.utils import Box

logger = logging.getLogger(__name__)

# Right hand, palm facing +z, fingers along +y, wrist at the origin (meters).
TEMPLATE_JOINTS = np.array(
    [
        [0.000, 0.000, 0.000],
        [0.020, 0.022, 0.006], [0.038, 0.046, 0.010], [0.052, 0.068, 0.012], [0.062, 0.088, 0.012],
        [0.025, 0.085, 0.000], [0.026, 0.125, 0.000], [0.026, 0.150, 0.000], [0.026, 0.170, 0.000],
        [0.005, 0.090, 0.000], [0.005, 0.135, 0.000], [0.005, 0.163, 0.000], [0.005, 0.185, 0.000],
        [-0.015, 0.085, 0.000], [-0.015, 0.127, 0.000], [-0.015, 0.153, 0.000], [-0.015, 0.173, 0.000],
        [-0.032, 0.075, 0.000], [-0.032, 0.107, 0.000], [-0.032, 0.127, 0.000], [-0.032, 0.145, 0.000],
    ]
)

BONE_RADII = np.array(
    [
        0.012, 0.011, 0.010, 0.009,
        0.012, 0.010, 0.009, 0.008,
        0.012, 0.010, 0.009, 0.008,
        0.012, 0.010, 0.009, 0.008,
        0.011, 0.008, 0.007, 0.007,
    ]
)

MIN_RADIUS = 0.004
MAX_RADIUS = 0.015

MIN_ALBEDO_DISTANCE = 0.2
ALBEDO_SHADES = ((0.6, 0.85), (0.3, 0.6), (0.9, 0.5))
ALBEDO_HUES = 12

# Flexion limits in radians at the three joints below each fingertip.
FLEXION_LIMITS = (1.4, 1.6, 1.2)
ABDUCTION_LIMIT = 0.15
GLOBAL_ROTATION_LIMIT = 0.15
GLOBAL_SHIFT_LIMIT = 0.005

LIGHT_DIRECTION = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
AMBIENT = 0.8
DIFFUSE = 0.2

SCENE_SIZE = 0.25
TWO_HAND_SCENE_SIZE = 0.32
TWO_HAND_SHIFT = 0.07
RING_RADIUS = 0.5
ELEVATION_JITTER_DEG = 15.0
IMAGE_SIZE = 192
FOCAL = 300.0
RAY_CHUNK = 8192


@dataclass
class CapsuleHand:
    skeleton: Skeleton
    radii: np.ndarray
    identity: Identity

    def capsules(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(starts, ends, radii, colors) of the 20 bone capsules."""
        starts, ends = self.skeleton.segments()
        return starts, ends, np.asarray(self.radii, dtype=np.float64), self.identity.bone_colors()


def canonical_template() -> Skeleton:
    """The articulation-0 right hand, shifted so its joint bounding box is centered at the origin."""
    center = (TEMPLATE_JOINTS.min(axis=0) + TEMPLATE_JOINTS.max(axis=0)) / 2
    return Skeleton(TEMPLATE_JOINTS - center, "right")


def albedo_palette(count: int) -> np.ndarray:
    """
    `count` albedos picked farthest-first from a fixed palette of hues and shades.

    The first albedo is always the palette's first entry, so adding identities
    never changes the earlier ones.

    Raises:
        ValueError: If the palette cannot keep every pair more than
            MIN_ALBEDO_DISTANCE apart in RGB.
    """
    palette = np.array([colorsys.hsv_to_rgb(h / ALBEDO_HUES, s, v) for s, v in ALBEDO_SHADES for h in range(ALBEDO_HUES)])
    chosen = [0]
    nearest = np.linalg.norm(palette - palette[0], axis=1)
    while len(chosen) < count:
        best = int(np.argmax(nearest))
        if nearest[best] <= MIN_ALBEDO_DISTANCE:
            raise ValueError(f"Cannot keep {count} identity albedos more than {MIN_ALBEDO_DISTANCE} apart")
        chosen.append(best)
        nearest = np.minimum(nearest, np.linalg.norm(palette - palette[best], axis=1))
    return palette[chosen]


def make_identity(index: int, count: int, seed: int = 0) -> Identity:
    """Albedo from `albedo_palette(count)`; the per-finger modulation is drawn from [0.9, 1.1]."""
    albedo = albedo_palette(max(count, index + 1))[index]
    rng = np.random.default_rng([seed, index])
    return Identity(f"id{index}", albedo, 0.9 + 0.2 * rng.random(5))


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _rotate_about(joints: np.ndarray, indices: Sequence[int], pivot: np.ndarray, R: np.ndarray) -> None:
    idx = list(indices)
    joints[idx] = (joints[idx] - pivot) @ R.T + pivot


def articulate(template: Skeleton, seed: int, articulation: float) -> Skeleton:
    """
    Curl the fingers of `template` by random fractions of their joint limits.

    Every change is a rotation about a joint, so bone lengths are preserved.
    Articulation 0 returns the template joints unchanged.
    """
    joints = template.joints.copy()
    if articulation <= 0:
        return Skeleton(joints, template.handedness)
    articulation = min(float(articulation), 1.0)
    rng = np.random.default_rng(seed)
    palm_normal = np.array([0.0, 0.0, 1.0])

    for finger in range(5):
        chain = [1 + 4 * finger + k for k in range(4)]
        curls = rng.random(3)
        spread = rng.uniform(-1.0, 1.0)
        abduction = articulation * spread * ABDUCTION_LIMIT
        if abduction != 0.0:
            _rotate_about(joints, chain[1:], joints[chain[0]], _rotation(palm_normal, abduction))
        for k in range(3):
            angle = articulation * curls[k] * FLEXION_LIMITS[k]
            if angle == 0.0:
                continue
            direction = joints[chain[k + 1]] - joints[chain[k]]
            axis = np.cross(direction, palm_normal)
            _rotate_about(joints, chain[k + 1:], joints[chain[k]], _rotation(axis, angle))

    axis = rng.normal(size=3)
    angle = articulation * rng.uniform(-1.0, 1.0) * GLOBAL_ROTATION_LIMIT
    shift = articulation * rng.uniform(-1.0, 1.0, 3) * GLOBAL_SHIFT_LIMIT
    center = (joints.min(axis=0) + joints.max(axis=0)) / 2
    joints = (joints - center) @ _rotation(axis, angle).T + center + shift
    return Skeleton(joints, template.handedness)


def generate_pose(seed: int, articulation: float, identity: Optional[Identity] = None) -> CapsuleHand:
    """A right capsule hand; articulation 0 is the canonical template, 1 is maximal random curl."""
    identity = identity if identity is not None else make_identity(0, 1)
    return CapsuleHand(articulate(canonical_template(), seed, articulation), BONE_RADII.copy(), identity)


def place_two_hands(right: CapsuleHand, left_source: CapsuleHand) -> tuple[CapsuleHand, CapsuleHand]:
    """Shift `right` to +x and mirror `left_source` into a left hand at -x."""
    offset = np.array([TWO_HAND_SHIFT, 0.0, 0.0])
    moved = Skeleton(right.skeleton.joints + offset, "right")
    mirrored = mirror_skeleton(left_source.skeleton)
    left = Skeleton(mirrored.joints - offset, "left")
    return (
        CapsuleHand(moved, right.radii, right.identity),
        CapsuleHand(left, left_source.radii, left_source.identity),
    )


HandsLike = Union[CapsuleHand, Sequence[CapsuleHand]]


def _as_list(hands: HandsLike) -> list[CapsuleHand]:
    return [hands] if isinstance(hands, CapsuleHand) else list(hands)


def oracle_occupancy(points: np.ndarray, hands: HandsLike) -> np.ndarray:
    """True where a point is within its bone's radius of any bone segment."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inside = np.zeros(len(points), dtype=bool)
    for hand in _as_list(hands):
        starts, ends, radii, _ = hand.capsules()
        inside |= np.any(point_segment_distance(points, starts, ends) <= radii[None, :], axis=1)
    return inside


def _sphere_hits(oc: np.ndarray, directions: np.ndarray, radius: float) -> np.ndarray:
    b = np.einsum("ri,ri->r", oc, directions)
    c = np.einsum("ri,ri->r", oc, oc) - radius * radius
    h = b * b - c
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(h)
    return np.where((h >= 0) & (t > 0), t, np.inf)


def intersect_capsule(
    origins: np.ndarray,
    directions: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    radius: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Nearest entering hit of unit rays with one capsule.

    The capsule is the union of a finite cylinder and two end spheres; the
    nearest entering hit among the three is the hit with the union.

    Returns:
        (t, normals) with t = inf where the ray misses.
    """
    ba = b - a
    baba = float(ba @ ba)
    oa = origins - a
    bard = directions @ ba
    baoa = oa @ ba
    rdoa = np.einsum("ri,ri->r", directions, oa)
    oaoa = np.einsum("ri,ri->r", oa, oa)

    A = baba - bard * bard
    B = baba * rdoa - baoa * bard
    C = baba * oaoa - baoa * baoa - radius * radius * baba
    h = B * B - A * C
    with np.errstate(divide="ignore", invalid="ignore"):
        t_body = (-B - np.sqrt(h)) / A
    y = baoa + t_body * bard
    body_ok = (A > 1e-12) & (h >= 0) & (t_body > 0) & (y > 0) & (y < baba)
    t_body = np.where(body_ok, t_body, np.inf)

    t_a = _sphere_hits(oa, directions, radius)
    t_b = _sphere_hits(origins - b, directions, radius)
    t = np.minimum(np.minimum(t_body, t_a), t_b)

    points = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * directions
    rel = points - a
    s = np.clip((rel @ ba) / baba, 0.0, 1.0)
    normals = rel - s[:, None] * ba
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(norms > 0, norms, 1.0)
    return t, normals


def render_capsules(
    starts: np.ndarray,
    ends: np.ndarray,
    radii: np.ndarray,
    colors: np.ndarray,
    cam: Camera,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render an arbitrary capsule set; returns (rgb, mask, depth) with depth = ray distance."""
    height, width = cam.height, cam.width
    rgb = np.zeros((height * width, 3), dtype=np.float64)
    depth = np.full(height * width, np.inf)
    batch = generate_rays(cam)

    for first in range(0, height * width, RAY_CHUNK):
        sl = slice(first, first + RAY_CHUNK)
        origins = batch.origins[sl]
        directions = batch.directions[sl]
        best = np.full(len(origins), np.inf)
        shade = np.zeros((len(origins), 3))
        for b in range(len(radii)):
            t, normals = intersect_capsule(origins, directions, starts[b], ends[b], float(radii[b]))
            closer = t < best
            if not np.any(closer):
                continue
            best = np.where(closer, t, best)
            lambert = AMBIENT + DIFFUSE * np.maximum(normals[closer] @ LIGHT_DIRECTION, 0.0)
            shade[closer] = colors[b][None, :] * lambert[:, None]
        rgb[sl] = shade
        depth[sl] = best

    mask = np.isfinite(depth)
    return (
        np.clip(rgb, 0.0, 1.0).reshape(height, width, 3).astype(np.float32),
        mask.reshape(height, width),
        depth.reshape(height, width).astype(np.float32),
    )


def render_analytic(hands: HandsLike, cam: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    hands = _as_list(hands)
    if not hands:
        return render_capsules(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), cam)
    parts = [hand.capsules() for hand in hands]
    return render_capsules(*(np.concatenate([part[i] for part in parts]) for i in range(4)), cam)


def make_cameras(
    n_views: int,
    seed: int = 0,
    image_size: int = IMAGE_SIZE,
    focal: float = FOCAL,
    radius: float = RING_RADIUS,
) -> list[Camera]:
    """Cameras on a ring around the finger axis with random elevation, all looking at the origin."""
    rng = np.random.default_rng(seed)
    K = np.array([[focal, 0.0, image_size / 2], [0.0, focal, image_size / 2], [0.0, 0.0, 1.0]])
    cameras = []
    for v in range(n_views):
        azimuth = 2.0 * np.pi * v / n_views
        elevation = np.radians(rng.uniform(-ELEVATION_JITTER_DEG, ELEVATION_JITTER_DEG))
        eye = radius * np.array(
            [np.cos(elevation) * np.sin(azimuth), np.sin(elevation), np.cos(elevation) * np.cos(azimuth)]
        )
        cameras.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), K, image_size, image_size))
    return cameras


def make_dataset(
    n_views: int,
    n_poses: int,
    n_identities: int,
    out_dir: Optional[Path] = None,
    seed: int = 0,
    articulation: float = 0.5,
    image_size: int = IMAGE_SIZE,
    two_hands: bool = False,
) -> SceneBundle:
    """
    Render a synthetic multi-view dataset and write it to `out_dir` when given.

    Identities are assigned to poses round-robin. Pose p is articulated with
    seed `seed + p`; in two-hand scenes the left hand uses seed `seed + 1000 + p`.

    Raises:
        ValueError: If fewer than 2 views or no poses/identities are requested.
    """
    if n_views < 2:
        raise ValueError(f"Need at least 2 views, got {n_views}")
    if n_poses < 1 or n_identities < 1:
        raise ValueError(f"Need at least one pose and one identity, got {n_poses} and {n_identities}")

    logger.info("=" * 70)
    logger.info("Rendering synthetic dataset: %d views, %d poses, %d identities", n_views, n_poses, n_identities)
    logger.info("=" * 70)

    focal = FOCAL * image_size / IMAGE_SIZE
    cameras = make_cameras(n_views, seed, image_size, focal)
    identities = [make_identity(i, n_identities, seed) for i in range(n_identities)]
    box = Box.cube(np.zeros(3), TWO_HAND_SCENE_SIZE if two_hands else SCENE_SIZE)
    bundle = SceneBundle(
        root=None,
        cameras=cameras,
        poses=[],
        identities={ident.name: ident for ident in identities},
        box=box,
        radii=BONE_RADII.copy(),
        canonical=canonical_template(),
    )

    for p in range(n_poses):
        identity = identities[p % n_identities]
        hand = generate_pose(seed + p, articulation, identity)
        hands = [hand]
        pose = TwoHandPose(hand.skeleton)
        if two_hands:
            right, left = place_two_hands(hand, generate_pose(seed + 1000 + p, articulation, identity))
            hands = [right, left]
            pose = TwoHandPose(right.skeleton, left.skeleton)
        bundle.poses.append(PoseRecord(f"pose_{p:03d}", pose, identity.name))
        for v, cam in enumerate(cameras):
            rgb, mask, depth = render_analytic(hands, cam)
            bundle.images[(p, v)] = rgb
            bundle.masks[(p, v)] = mask
            bundle.depths[(p, v)] = depth
        logger.info("Rendered pose %d/%d (identity %s)", p + 1, n_poses, identity.name)

    if out_dir is not None:
        write_dataset(bundle, Path(out_dir))
    return bundle


def hands_of(bundle: SceneBundle, pose: int) -> list[CapsuleHand]:
    """Capsule hands of a dataset pose, for oracle renders."""
    record = bundle.poses[pose]
    identity = bundle.identities[record.identity]
    return [CapsuleHand(skeleton, bundle.radii, identity) for skeleton in record.pose.hands()]