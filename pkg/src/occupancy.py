"""
Skeleton-conditioned occupancy field.

A per-joint MLP with max pooling embeds the root-centered skeleton; a
residual point decoder with per-block scale/shift conditioning maps query
points to a feature vector and an occupancy logit. Left hands are queried
as mirrored right hands, so one model serves both.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from src.geometry import (
    GeometryError,
    Skeleton,
    TwoHandPose,
    deform_to_canonical,
    point_segment_distance,
    query_skeleton,
    to_query_frame,
)
from src.nn import Adam, Linear, Module, bce_with_logits
from src.rays import march_crossing
from src.tensor import Tensor, no_grad
from src.utils import Box, append_jsonl

logger = logging.getLogger(__name__)

FEATURE_DIM = 32
EMBED_DIM = 64
HIDDEN_DIM = 128
NUM_BLOCKS = 4
# Meters to decimeters before the first layer keeps inputs near unit scale.
INPUT_SCALE = 10.0
PROB_EPS = 1e-6
ROOT_TOLERANCE = 1e-6
QUERY_CHUNK = 8192
HAND_MARGIN = 0.025
SHELL_FRACTION = 0.25


class TrainingError(Exception):
    """Raised when a training set is empty or lacks a label class."""
    pass


class SkeletonEncoder(Module):
    def __init__(self, rng: np.random.Generator, embed_dim: int = EMBED_DIM) -> None:
        self.fc_in = Linear(3, embed_dim, rng)
        self.fc_out = Linear(embed_dim, embed_dim, rng)

    def forward(self, joints: Tensor) -> Tensor:
        h = self.fc_in(joints * INPUT_SCALE).relu()
        h = self.fc_out(h).relu()
        return h.max(axis=0).reshape(1, h.shape[1])


class ConditionedBlock(Module):
    """x + fc2(relu(fc1(relu(x * (1 + scale) + shift)))) with scale/shift from the embedding."""

    def __init__(self, width: int, embed_dim: int, rng: np.random.Generator) -> None:
        self.width = width
        self.film = Linear(embed_dim, 2 * width, rng, zero=True)
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)

    def forward(self, x: Tensor, embedding: Tensor) -> Tensor:
        count = x.shape[0]
        film = self.film(embedding)
        scale = film[:, :self.width].expand(count, self.width)
        shift = film[:, self.width:].expand(count, self.width)
        h = (x * (scale + 1.0) + shift).relu()
        h = self.fc2(self.fc1(h).relu())
        return x + h


class PointDecoder(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        embed_dim: int = EMBED_DIM,
        hidden: int = HIDDEN_DIM,
        blocks: int = NUM_BLOCKS,
        feature_dim: int = FEATURE_DIM,
    ) -> None:
        self.fc_in = Linear(3, hidden, rng)
        self.blocks = [ConditionedBlock(hidden, embed_dim, rng) for _ in range(blocks)]
        self.fc_feat = Linear(hidden, feature_dim, rng)
        self.head = Linear(feature_dim, 1, rng, zero=True)

    def forward(self, points: Tensor, embedding: Tensor) -> tuple[Tensor, Tensor]:
        x = self.fc_in(points * INPUT_SCALE)
        for block in self.blocks:
            x = block(x, embedding)
        features = self.fc_feat(x.relu()).relu()
        return self.head(features), features


class OccupancyModel(Module):
    def __init__(
        self,
        seed: int = 0,
        feature_dim: int = FEATURE_DIM,
        embed_dim: int = EMBED_DIM,
        hidden: int = HIDDEN_DIM,
        blocks: int = NUM_BLOCKS,
    ) -> None:
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.enc = SkeletonEncoder(rng, embed_dim)
        self.dec = PointDecoder(rng, embed_dim, hidden, blocks, feature_dim)

    def forward(self, points: Tensor, joints: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (logits (K, 1), features (K, m))."""
        return self.dec(points, self.enc(joints))


@dataclass
class OccResult:
    probability: np.ndarray
    features: np.ndarray


@dataclass
class TwoHandResult:
    p_right: np.ndarray
    p_left: np.ndarray
    features: np.ndarray

    @property
    def signed(self) -> np.ndarray:
        return signed_probability(self.p_right, self.p_left)

    @property
    def probability(self) -> np.ndarray:
        return np.maximum(self.p_right, self.p_left)


def _check_canonical(skeleton: Skeleton) -> None:
    norm = float(np.linalg.norm(skeleton.root))
    if norm > ROOT_TOLERANCE:
        raise GeometryError(f"Skeleton is not root-centered (root norm {norm:.3g}); canonicalize it first")


def encode_skeleton(model: OccupancyModel, skeleton: Skeleton) -> np.ndarray:
    _check_canonical(skeleton)
    with no_grad():
        return model.enc(Tensor(skeleton.joints)).numpy().reshape(-1).copy()


def query(model: OccupancyModel, points: np.ndarray, skeleton: Skeleton, chunk: int = QUERY_CHUNK) -> OccResult:
    """Probabilities and features for points in the root-centered frame of `skeleton`."""
    _check_canonical(skeleton)
    points = np.asarray(points).reshape(-1, 3)
    probability = np.empty(len(points), dtype=np.float32)
    features = np.empty((len(points), model.feature_dim), dtype=np.float32)
    with no_grad():
        embedding = model.enc(Tensor(skeleton.joints))
        for first in range(0, len(points), chunk):
            logits, feats = model.dec(Tensor(points[first:first + chunk]), embedding)
            probability[first:first + chunk] = logits.sigmoid().numpy().reshape(-1)
            features[first:first + chunk] = feats.numpy()
    return OccResult(np.clip(probability, PROB_EPS, 1.0 - PROB_EPS), features)


def signed_probability(p_right, p_left):
    """p_right where p_right >= p_left, otherwise -p_left."""
    p_right = np.asarray(p_right)
    p_left = np.asarray(p_left)
    return np.where(p_right >= p_left, p_right, -p_left)


def query_two_hands(model: OccupancyModel, points: np.ndarray, pose: TwoHandPose) -> TwoHandResult:
    """
    Per-hand probabilities of world points; features come from the more likely hand.

    The right hand is queried at P - s0_R with its canonicalized skeleton, the
    left at mirror(P - s0_L) with the mirrored canonicalized skeleton. An
    absent left hand has probability 0.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    right = query(model, to_query_frame(points, pose.right), query_skeleton(pose.right))
    if pose.left is None:
        return TwoHandResult(right.probability, np.zeros_like(right.probability), right.features)
    left = query(model, to_query_frame(points, pose.left), query_skeleton(pose.left))
    pick_right = right.probability >= left.probability
    features = np.where(pick_right[:, None], right.features, left.features)
    return TwoHandResult(right.probability, left.probability, features)


def query_canonical(
    model: OccupancyModel,
    points: np.ndarray,
    pose: TwoHandPose,
    canonical: Skeleton,
) -> TwoHandResult:
    """Like query_two_hands, but every point is first deformed into the canonical pose."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    target = query_skeleton(canonical)
    results = []
    for hand in pose.hands():
        source = query_skeleton(hand)
        deformed = deform_to_canonical(to_query_frame(points, hand), source, target)
        results.append(query(model, deformed, target))
    if len(results) == 1:
        return TwoHandResult(results[0].probability, np.zeros_like(results[0].probability), results[0].features)
    right, left = results
    pick_right = right.probability >= left.probability
    return TwoHandResult(right.probability, left.probability, np.where(pick_right[:, None], right.features, left.features))


def scene_probability(model: OccupancyModel, pose: TwoHandPose) -> Callable[[np.ndarray], np.ndarray]:
    """World-space occupancy of a pose, max over its hands."""

    def prob_fn(points: np.ndarray) -> np.ndarray:
        return query_two_hands(model, points, pose).probability.astype(np.float64)

    return prob_fn


class OccupancyGrid:
    """
    Occupancy sampled on a regular grid and read back by trilinear interpolation.

    Points outside the grid box read 0.
    """

    def __init__(self, prob_fn: Callable[[np.ndarray], np.ndarray], box: Box, spacing: float) -> None:
        self.box = box
        self.spacing = spacing
        self.shape = tuple(int(np.ceil(s / spacing)) + 1 for s in box.hi_array - box.lo_array)
        axes = [box.lo_array[i] + spacing * np.arange(self.shape[i]) for i in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        self.values = prob_fn(grid).reshape(self.shape)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        coords = (points - self.box.lo_array) / self.spacing
        inside = np.all((coords >= 0) & (coords <= np.array(self.shape) - 1), axis=1)
        upper = np.array(self.shape) - 2
        base = np.clip(np.floor(coords).astype(np.int64), 0, np.maximum(upper, 0))
        frac = np.clip(coords - base, 0.0, 1.0)
        out = np.zeros(len(points))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (frac[:, 0] if dx else 1 - frac[:, 0])
                        * (frac[:, 1] if dy else 1 - frac[:, 1])
                        * (frac[:, 2] if dz else 1 - frac[:, 2])
                    )
                    ix = np.minimum(base[:, 0] + dx, self.shape[0] - 1)
                    iy = np.minimum(base[:, 1] + dy, self.shape[1] - 1)
                    iz = np.minimum(base[:, 2] + dz, self.shape[2] - 1)
                    out += w * self.values[ix, iy, iz]
        return np.where(inside, out, 0.0)


def surface_extract(
    model: OccupancyModel,
    skeleton: Skeleton,
    origin: np.ndarray,
    direction: np.ndarray,
    step: float,
    p_min: float,
    box: Box,
) -> Optional[float]:
    """
    First depth along one ray where occupancy reaches p_min, refined by 10 bisections.

    Returns None when the ray crosses no such point inside `box`.
    """
    origins = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    directions = np.asarray(direction, dtype=np.float64).reshape(1, 3)
    t_enter, t_exit, hit = box.ray_interval(origins, directions)
    if not hit[0]:
        return None

    def prob_fn(points: np.ndarray) -> np.ndarray:
        return query(model, points, skeleton).probability.astype(np.float64)

    depths, found = march_crossing(prob_fn, origins, directions, t_enter, t_exit, step, p_min)
    return float(depths[0]) if found[0] else None


def filter_cloud(model: OccupancyModel, points: np.ndarray, skeleton: Skeleton, threshold: float = 0.5) -> np.ndarray:
    """Keep points (in the skeleton's root-centered frame) whose occupancy exceeds `threshold`."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points[query(model, points, skeleton).probability > threshold]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass
class LabeledCloud:
    """Carved points of one hand in world coordinates with keep labels."""

    points: np.ndarray
    labels: np.ndarray
    skeleton: Skeleton


@dataclass
class TrainingExample:
    points: np.ndarray
    labels: np.ndarray
    skeleton: Skeleton
    hand_box: Box


@dataclass
class OccupancyReport:
    steps: int = 0
    losses: list = field(default_factory=list)
    ious: list = field(default_factory=list)

    @property
    def final_iou(self) -> float:
        return self.ious[-1] if self.ious else 0.0


def split_by_hand(points: np.ndarray, labels: np.ndarray, pose: TwoHandPose) -> list[LabeledCloud]:
    """Assign each carved point to the hand with the nearest bone."""
    hands = list(pose.hands())
    if len(hands) == 1:
        return [LabeledCloud(points, labels.astype(bool), hands[0])]
    distances = np.stack(
        [point_segment_distance(points, *hand.segments()).min(axis=1) for hand in hands], axis=1
    )
    owner = np.argmin(distances, axis=1)
    return [LabeledCloud(points[owner == h], labels[owner == h].astype(bool), hand) for h, hand in enumerate(hands)]


def build_examples(clouds: Sequence[LabeledCloud], canonical: Optional[Skeleton] = None) -> list[TrainingExample]:
    """
    Express clouds in their hands' query frames.

    With a canonical skeleton, every cloud also yields a copy deformed into
    the canonical pose and conditioned on it.
    """
    target = query_skeleton(canonical) if canonical is not None else None
    examples = []
    for cloud in clouds:
        source = query_skeleton(cloud.skeleton)
        local = to_query_frame(cloud.points, cloud.skeleton)
        examples.append(TrainingExample(local, cloud.labels, source, Box.around(source.joints, HAND_MARGIN)))
        if target is not None:
            deformed = deform_to_canonical(local, source, target)
            examples.append(TrainingExample(deformed, cloud.labels, target, Box.around(target.joints, HAND_MARGIN)))
    return examples


def shell_samples(hand_box: Box, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in the box twice the size of `hand_box`, excluding `hand_box` itself."""
    size = hand_box.hi_array - hand_box.lo_array
    outer = Box(tuple(hand_box.center - size), tuple(hand_box.center + size))
    picked = np.zeros((0, 3))
    while len(picked) < count:
        draw = outer.lo_array + rng.random((2 * count + 8, 3)) * (outer.hi_array - outer.lo_array)
        picked = np.concatenate([picked, draw[~hand_box.contains(draw)]])
    return picked[:count]


def iou(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    union = int((predicted | truth).sum())
    if union == 0:
        return 1.0
    return float((predicted & truth).sum() / union)


def _validation_iou(model: OccupancyModel, examples: Sequence[TrainingExample], holdout: Sequence[np.ndarray]) -> float:
    predicted, truth = [], []
    for example, idx in zip(examples, holdout):
        if idx.size == 0:
            continue
        result = query(model, example.points[idx], example.skeleton)
        predicted.append(result.probability > 0.5)
        truth.append(example.labels[idx])
    if not predicted:
        return 0.0
    return iou(np.concatenate(predicted), np.concatenate(truth))


def train_occupancy(
    model: OccupancyModel,
    clouds: Sequence[LabeledCloud],
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 512,
    seed: int = 0,
    canonical: Optional[Skeleton] = None,
    val_fraction: float = 0.1,
    eval_every: Optional[int] = None,
    log_every: int = 100,
    log_path: Optional[Path] = None,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
) -> OccupancyReport:
    """
    Fit the occupancy model with binary cross-entropy on carved labels.

    Each step draws one example, half positives and half negatives; a quarter
    of the negatives come from the shell around the hand box. Validation IoU
    at threshold 0.5 is measured on a held-out fraction every `eval_every`
    steps. Batches never draw held-out points; an example left without one
    label class after the split is not trained on.

    Raises:
        TrainingError: If no example has both positive and negative points.
    """
    examples = build_examples(clouds, canonical)
    usable = [ex for ex in examples if ex.labels.any() and (~ex.labels).any()]
    if len(usable) < len(examples):
        logger.warning("Skipping %d training examples without both label classes", len(examples) - len(usable))
    if not usable:
        raise TrainingError("Occupancy training needs positive and negative points; none were found")

    rng = np.random.default_rng(seed)
    train_pos, train_neg, holdout = [], [], []
    for ex in usable:
        order = rng.permutation(len(ex.points))
        n_val = int(len(order) * val_fraction)
        holdout.append(order[:n_val])
        rest = order[n_val:]
        train_pos.append(rest[ex.labels[rest]])
        train_neg.append(rest[~ex.labels[rest]])
    trainable = [e for e in range(len(usable)) if train_pos[e].size and train_neg[e].size]
    if not trainable:
        raise TrainingError("Training split has an empty positive or negative set")
    if len(trainable) < len(usable):
        logger.warning("%d examples lose a label class to the validation split", len(usable) - len(trainable))

    optimizer = Adam(model.parameters(), lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
    eval_every = eval_every or max(steps // 10, 1)
    report = OccupancyReport()
    half = batch_size // 2
    n_shell = int(round(half * SHELL_FRACTION))

    logger.info("=" * 70)
    logger.info("Training occupancy: %d examples, %d steps, batch %d", len(usable), steps, batch_size)
    logger.info("=" * 70)

    for step in range(1, steps + 1):
        e = trainable[int(rng.integers(len(trainable)))]
        ex = usable[e]
        pos = ex.points[rng.choice(train_pos[e], half)]
        neg = ex.points[rng.choice(train_neg[e], half - n_shell)]
        shell = shell_samples(ex.hand_box, n_shell, rng)
        batch = np.concatenate([pos, neg, shell])
        labels = np.concatenate([np.ones(half), np.zeros(half)])[:, None]

        logits, _ = model(Tensor(batch), Tensor(ex.skeleton.joints))
        loss = bce_with_logits(logits, labels)
        loss.backward()
        optimizer.step()
        report.losses.append(loss.item())
        report.steps = step

        if step % log_every == 0:
            logger.info("  step %d/%d: loss %.4f", step, steps, loss.item())
        if step % eval_every == 0 or step == steps:
            score = _validation_iou(model, usable, holdout)
            report.ious.append(score)
            logger.info("  step %d: validation IoU %.3f", step, score)
            if log_path is not None:
                append_jsonl({"step": step, "loss": loss.item(), "iou": score}, log_path)
    return report
