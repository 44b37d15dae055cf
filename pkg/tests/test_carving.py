import logging
import shutil

import numpy as np
import pytest

from src.camera import Camera
from src.carving import (
    View,
    carve,
    carve_dataset,
    candidate_box,
    consistency_filter,
    project_and_sample,
    read_point_cloud,
    sample_bbox,
    write_point_cloud,
)
from src.dataset import DatasetError, load_dataset
from src.synth import AMBIENT, make_dataset
from src.utils import Box

K = np.array([[100.0, 0.0, 32.0], [0.0, 100.0, 32.0], [0.0, 0.0, 1.0]])


def camera_at(eye, target=(0.0, 0.0, 0.0)):
    return Camera.look_at(eye, target, [0.0, 1.0, 0.0], K, 64, 64)


def flat_view(cam, color, mask=True, depth=None):
    image = np.tile(np.asarray(color, dtype=np.float32), (64, 64, 1))
    return View(cam, image, np.full((64, 64), mask, dtype=bool), depth)


@pytest.fixture
def ring_views():
    return [
        flat_view(camera_at([0.0, 0.0, 0.5]), [0.3, 0.5, 0.7]),
        flat_view(camera_at([0.5, 0.0, 0.0]), [0.3, 0.5, 0.7]),
        flat_view(camera_at([0.0, 0.0, -0.5]), [0.3, 0.5, 0.7]),
    ]


class TestSampleBBox:
    def test_uniform_mean(self):
        points = sample_bbox(Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), 10_000, seed=4)
        assert np.all(np.abs(points.mean(axis=0) - 0.5) < 0.02)

    def test_seeded(self):
        box = Box.cube([0.0, 0.0, 0.0], 0.1)
        assert np.array_equal(sample_bbox(box, 50, 1), sample_bbox(box, 50, 1))
        assert box.contains(sample_bbox(box, 50, 1)).all()


class TestProjectAndSample:
    def test_constant_color_gives_identical_samples(self, ring_views):
        cloud = project_and_sample(np.array([[0.0, 0.0, 0.0], [0.01, 0.02, 0.0]]), ring_views)
        assert np.allclose(cloud.colors, [0.3, 0.5, 0.7])
        assert np.all(cloud.std == 0.0)
        assert cloud.valid.all()

    def test_view_behind_point_is_excluded(self, ring_views):
        away = flat_view(camera_at([0.0, 0.0, 0.5], target=[0.0, 0.0, 1.0]), [1.0, 0.0, 0.0])
        cloud = project_and_sample(np.zeros((1, 3)), ring_views + [away])
        assert cloud.valid[0].tolist() == [True, True, True, False]
        assert cloud.std[0] == 0.0

    def test_occluded_view_is_excluded(self, ring_views):
        # surface buffered 0.1 m in front of a point at distance 0.5
        occluded = flat_view(camera_at([0.0, 0.3, 0.4]), [0.0, 1.0, 0.0], depth=np.full((64, 64), 0.4, np.float32))
        cloud = project_and_sample(np.zeros((1, 3)), ring_views + [occluded])
        assert not cloud.valid[0, 3]
        assert cloud.in_frame[0, 3]

    def test_inconsistent_colors_raise_std(self, ring_views):
        ring_views[1] = flat_view(ring_views[1].camera, [0.9, 0.5, 0.7])
        cloud = project_and_sample(np.zeros((1, 3)), ring_views)
        assert cloud.std[0] > 0.08

    def test_single_valid_view_has_zero_std(self):
        cloud = project_and_sample(np.zeros((1, 3)), [flat_view(camera_at([0.0, 0.0, 0.5]), [0.2, 0.2, 0.2])])
        assert cloud.std[0] == 0.0


class TestConsistencyFilter:
    def test_consistent_point_inside_all_masks_is_kept(self, ring_views):
        cloud = project_and_sample(np.zeros((1, 3)), ring_views)
        kept = consistency_filter(cloud, 0.08, [v.mask for v in ring_views], 1.0)
        assert kept.keep.tolist() == [True]

    def test_point_outside_masks_is_dropped(self, ring_views):
        cloud = project_and_sample(np.zeros((1, 3)), ring_views)
        empty = [np.zeros((64, 64), dtype=bool)] * 3
        assert not consistency_filter(cloud, 10.0, empty, 0.3).keep.any()

    def test_rho_counts_a_fraction_of_views(self, ring_views):
        cloud = project_and_sample(np.zeros((1, 3)), ring_views)
        masks = [v.mask for v in ring_views]
        masks[2] = np.zeros((64, 64), dtype=bool)
        assert not consistency_filter(cloud, 0.08, masks, 1.0).keep[0]
        assert consistency_filter(cloud, 0.08, masks, 0.6).keep[0]

    def test_free_space_rejection(self, ring_views):
        cloud = project_and_sample(np.zeros((1, 3)), ring_views)
        masks = [v.mask for v in ring_views]
        # the first view saw a surface 5 cm behind the point
        depths = [np.full((64, 64), 0.55, np.float32), None, None]
        assert not consistency_filter(cloud, 0.08, masks, 1.0, depths).keep[0]
        depths[0] = np.full((64, 64), 0.5, np.float32)
        assert consistency_filter(cloud, 0.08, masks, 1.0, depths).keep[0]

    @pytest.mark.parametrize("rho", [0.0, 1.5])
    def test_rejects_bad_rho(self, ring_views, rho):
        cloud = project_and_sample(np.zeros((1, 3)), ring_views)
        with pytest.raises(ValueError, match="rho"):
            consistency_filter(cloud, 0.08, [v.mask for v in ring_views], rho)


def test_carve_is_independent_of_chunking_and_workers(ring_views, rng):
    points = rng.uniform(-0.05, 0.05, size=(250, 3))
    single = carve(points, ring_views, chunk_size=1000)
    chunked = carve(points, ring_views, workers=3, chunk_size=64)
    assert np.array_equal(single.keep, chunked.keep)
    assert np.array_equal(single.points, chunked.points)


class TestPointCloudFile:
    def test_round_trip_with_labels(self, tmp_path, rng):
        points = rng.normal(size=(20, 3)).astype(np.float32)
        labels = rng.random(20) > 0.5
        write_point_cloud(tmp_path / "p.ocpc", points, labels)
        loaded, loaded_labels = read_point_cloud(tmp_path / "p.ocpc")
        assert np.allclose(loaded, points)
        assert np.array_equal(loaded_labels.astype(bool), labels)

    def test_without_labels(self, tmp_path):
        write_point_cloud(tmp_path / "p.ocpc", np.zeros((3, 3)))
        assert read_point_cloud(tmp_path / "p.ocpc")[1] is None

    def test_bad_magic(self, tmp_path):
        (tmp_path / "p.ocpc").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(DatasetError, match="not an OCPC"):
            read_point_cloud(tmp_path / "p.ocpc")

    def test_truncated(self, tmp_path):
        write_point_cloud(tmp_path / "p.ocpc", np.zeros((5, 3)))
        (tmp_path / "p.ocpc").write_bytes((tmp_path / "p.ocpc").read_bytes()[:30])
        with pytest.raises(DatasetError, match="truncated"):
            read_point_cloud(tmp_path / "p.ocpc")

    def test_missing(self, tmp_path):
        with pytest.raises(DatasetError, match="Missing"):
            read_point_cloud(tmp_path / "absent.ocpc")


def pose_views(bundle, pose=0):
    return [
        View(bundle.cameras[v], bundle.image(pose, v), bundle.mask(pose, v), bundle.depth(pose, v))
        for v in range(bundle.num_views)
    ]


@pytest.fixture(scope="module")
def projected(tiny_bundle):
    views = pose_views(tiny_bundle)
    cloud = project_and_sample(sample_bbox(candidate_box(tiny_bundle, 0), 4000, 0), views)
    return cloud, [v.mask for v in views], [v.depth for v in views]


class TestCarvingProperties:
    @pytest.mark.parametrize("loose, tight", [(0.12, 0.08), (0.08, 0.04), (0.04, 0.01)])
    def test_smaller_sigma_keeps_a_subset(self, projected, loose, tight):
        cloud, masks, depths = projected
        wide = consistency_filter(cloud, loose, masks, 0.75, depths).keep
        narrow = consistency_filter(cloud, tight, masks, 0.75, depths).keep
        assert not np.any(narrow & ~wide)

    @pytest.mark.parametrize("low, high", [(0.25, 0.5), (0.5, 0.75), (0.75, 1.0)])
    def test_higher_rho_keeps_a_subset(self, projected, low, high):
        cloud, masks, depths = projected
        lenient = consistency_filter(cloud, 0.08, masks, low, depths).keep
        strict = consistency_filter(cloud, 0.08, masks, high, depths).keep
        assert not np.any(strict & ~lenient)

    def test_view_order_does_not_matter(self, tiny_bundle):
        views = pose_views(tiny_bundle)
        points = sample_bbox(candidate_box(tiny_bundle, 0), 3000, 1)
        forward = carve(points, views)
        backward = carve(points, [views[v] for v in (2, 0, 3, 1)])
        assert np.array_equal(forward.keep, backward.keep)

    def test_kept_points_lie_inside_every_mask(self, tiny_bundle):
        views = pose_views(tiny_bundle)
        cloud = carve(sample_bbox(candidate_box(tiny_bundle, 0), 4000, 2), views, rho=1.0)
        kept = cloud.kept
        assert len(kept) > 0
        for view in views:
            uv, z = view.camera.project(kept)
            cols = np.floor(uv[:, 0]).astype(int)
            rows = np.floor(uv[:, 1]).astype(int)
            assert np.all(z > 0)
            assert np.all((cols >= 0) & (cols < 64) & (rows >= 0) & (rows < 64))
            assert view.mask[rows, cols].all()


def test_candidate_box_covers_the_hand(tiny_bundle):
    box = candidate_box(tiny_bundle, 0)
    assert box.contains(tiny_bundle.poses[0].pose.right.joints).all()


def test_kept_colors_lie_in_the_shading_range(tiny_bundle):
    views = [View(tiny_bundle.cameras[v], tiny_bundle.image(0, v), tiny_bundle.mask(0, v), tiny_bundle.depth(0, v)) for v in range(4)]
    cloud = carve(sample_bbox(candidate_box(tiny_bundle, 0), 4000, 0), views)
    inside = tiny_bundle.oracle(cloud.points, 0) & cloud.valid.all(axis=1)
    albedo = tiny_bundle.identities[tiny_bundle.poses[0].identity].bone_colors()
    sampled = cloud.colors[inside]
    assert sampled.size > 0
    assert sampled.max() <= albedo.max() + 1e-3


def test_carve_dataset_writes_labelled_clouds(dataset_dir, tmp_path):
    root = tmp_path / "carve"
    shutil.copytree(dataset_dir, root)
    bundle = load_dataset(root)
    paths = carve_dataset(bundle, [0, 1, 2, 3], candidates=2000, seed=0)
    assert [p.name for p in paths] == ["pose_000.ocpc", "pose_001.ocpc"]
    points, labels = read_point_cloud(paths[0])
    assert len(points) == 2000 and labels is not None and labels.any()


def test_carve_dataset_reports_missing_depth(dataset_dir, tmp_path, caplog):
    root = tmp_path / "nodepth"
    shutil.copytree(dataset_dir, root)
    caplog.set_level(logging.INFO, logger="src.carving")
    carve_dataset(load_dataset(root), [0, 1, 2, 3], candidates=500, seed=0)
    assert "free-space rejection on" in caplog.text
    caplog.clear()
    for path in root.glob("poses/*/depth_*.bin"):
        path.unlink()
    carve_dataset(load_dataset(root), [0, 1, 2, 3], candidates=500, seed=0)
    assert "4/4 views have no depth buffer" in caplog.text
    assert any(r.levelno == logging.WARNING for r in caplog.records)


@pytest.mark.slow
def test_carving_matches_the_oracle():
    bundle = make_dataset(n_views=8, n_poses=1, n_identities=1, seed=0)
    views = [View(bundle.cameras[v], bundle.image(0, v), bundle.mask(0, v), bundle.depth(0, v)) for v in range(8)]
    cloud = carve(sample_bbox(candidate_box(bundle, 0), 200_000, 0), views, sigma_max=0.08, rho=1.0)
    truth = bundle.oracle(cloud.points, 0)
    hits = (cloud.keep & truth).sum()
    assert hits / max(cloud.keep.sum(), 1) >= 0.95
    assert hits / max(truth.sum(), 1) >= 0.95
