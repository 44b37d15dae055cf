import numpy as np
import pytest

from src.imaging import dilate
from src.synth import (
    AMBIENT,
    BONE_RADII,
    SCENE_SIZE,
    TWO_HAND_SCENE_SIZE,
    CapsuleHand,
    articulate,
    canonical_template,
    generate_pose,
    hands_of,
    intersect_capsule,
    make_cameras,
    make_dataset,
    MIN_ALBEDO_DISTANCE,
    albedo_palette,
    make_identity,
    oracle_occupancy,
    render_analytic,
)


class TestPoses:
    def test_articulation_zero_is_the_template(self):
        hand = generate_pose(seed=3, articulation=0.0)
        assert np.array_equal(hand.skeleton.joints, canonical_template().joints)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_articulation_preserves_bone_lengths(self, seed):
        template = canonical_template()
        posed = articulate(template, seed, 1.0)
        assert np.allclose(posed.bone_lengths(), template.bone_lengths(), atol=1e-12)
        assert not np.allclose(posed.joints, template.joints)

    def test_same_seed_same_pose(self):
        a = generate_pose(seed=7, articulation=0.5)
        b = generate_pose(seed=7, articulation=0.5)
        assert np.array_equal(a.skeleton.joints, b.skeleton.joints)

    def test_template_is_centered(self):
        joints = canonical_template().joints
        assert np.allclose((joints.min(axis=0) + joints.max(axis=0)) / 2, 0.0)


class TestIdentities:
    def test_albedos_are_distinct(self):
        a = make_identity(0, 2)
        b = make_identity(1, 2)
        assert a.name == "id0" and b.name == "id1"
        assert np.linalg.norm(a.albedo - b.albedo) > 0.2

    def test_finger_modulation_range(self):
        modulation = make_identity(4, 6, seed=2).finger_modulation
        assert modulation.min() >= 0.9 and modulation.max() <= 1.1

    def test_albedos_stay_apart_for_many_identities(self):
        albedos = np.array([make_identity(i, 8).albedo for i in range(8)])
        distances = np.linalg.norm(albedos[:, None] - albedos[None], axis=-1)
        assert distances[~np.eye(8, dtype=bool)].min() > MIN_ALBEDO_DISTANCE

    def test_adding_identities_keeps_earlier_albedos(self):
        assert np.allclose(albedo_palette(5)[:2], albedo_palette(2))
        assert np.allclose(make_identity(1, 2).albedo, make_identity(1, 6).albedo)

    def test_palette_exhaustion(self):
        with pytest.raises(ValueError, match="more than 0.2 apart"):
            albedo_palette(200)


class TestCapsules:
    def test_oracle_contains_joints_not_far_points(self):
        hand = generate_pose(seed=0, articulation=0.0)
        assert oracle_occupancy(hand.skeleton.joints, hand).all()
        assert not oracle_occupancy(np.array([[0.0, 0.0, 0.2]]), hand).any()

    def test_ray_hits_cylinder_body(self):
        t, normals = intersect_capsule(
            np.array([[0.0, 0.0, 1.0]]), np.array([[0.0, 0.0, -1.0]]),
            np.array([-0.1, 0.0, 0.0]), np.array([0.1, 0.0, 0.0]), 0.01,
        )
        assert t[0] == pytest.approx(0.99)
        assert np.allclose(normals[0], [0.0, 0.0, 1.0])

    def test_ray_hits_end_cap(self):
        t, normals = intersect_capsule(
            np.array([[0.2, 0.0, 0.0]]), np.array([[-1.0, 0.0, 0.0]]),
            np.array([-0.1, 0.0, 0.0]), np.array([0.1, 0.0, 0.0]), 0.01,
        )
        assert t[0] == pytest.approx(0.09)
        assert np.allclose(normals[0], [1.0, 0.0, 0.0])

    def test_ray_misses(self):
        t, _ = intersect_capsule(
            np.array([[0.0, 0.5, 1.0]]), np.array([[0.0, 0.0, -1.0]]),
            np.array([-0.1, 0.0, 0.0]), np.array([0.1, 0.0, 0.0]), 0.01,
        )
        assert np.isinf(t[0])


class TestRendering:
    def test_render_template_from_the_front(self, frontal_camera):
        hand = generate_pose(seed=0, articulation=0.0)
        rgb, mask, depth = render_analytic(hand, frontal_camera)
        assert rgb.shape == (64, 64, 3) and mask.shape == (64, 64)
        assert mask[32, 32]
        assert 0.45 < depth[32, 32] < 0.5
        assert np.array_equal(mask, np.isfinite(depth))
        assert np.all(rgb[~mask] == 0.0)

    def test_shading_stays_within_lambert_range(self, frontal_camera):
        hand = generate_pose(seed=0, articulation=0.0)
        rgb, mask, _ = render_analytic(hand, frontal_camera)
        colors = hand.identity.bone_colors()
        assert rgb[mask].min() >= AMBIENT * colors.min() - 1e-6
        assert rgb[mask].max() <= colors.max() + 1e-6

    def test_no_hands_renders_background(self, frontal_camera):
        rgb, mask, depth = render_analytic([], frontal_camera)
        assert not mask.any() and np.all(rgb == 0.0) and np.isinf(depth).all()

    def test_ring_cameras_look_at_the_origin(self):
        for cam in make_cameras(6, seed=1, image_size=64, focal=100.0):
            uv, z = cam.project(np.zeros((1, 3)))
            assert np.allclose(uv, [[32.0, 32.0]])
            assert z[0] == pytest.approx(0.5)


class TestMakeDataset:
    def test_needs_two_views(self):
        with pytest.raises(ValueError, match="at least 2 views"):
            make_dataset(n_views=1, n_poses=1, n_identities=1, image_size=32)

    def test_tiny_bundle_layout(self, tiny_bundle):
        assert tiny_bundle.num_views == 4
        assert [rec.name for rec in tiny_bundle.poses] == ["pose_000", "pose_001"]
        assert [rec.identity for rec in tiny_bundle.poses] == ["id0", "id1"]
        assert tiny_bundle.image(0, 0).shape == (64, 64, 3)
        assert tiny_bundle.mask(1, 3).any()
        assert np.allclose(tiny_bundle.box.hi_array - tiny_bundle.box.lo_array, SCENE_SIZE)

    def test_two_hand_scene(self):
        bundle = make_dataset(n_views=2, n_poses=1, n_identities=1, seed=0, image_size=32, two_hands=True)
        pose = bundle.poses[0].pose
        assert pose.left is not None and pose.left.handedness == "left"
        assert pose.offset[0] < 0
        assert np.allclose(bundle.box.hi_array - bundle.box.lo_array, TWO_HAND_SCENE_SIZE)
        hands = hands_of(bundle, 0)
        assert len(hands) == 2 and all(isinstance(h, CapsuleHand) for h in hands)
        assert np.array_equal(hands[0].radii, BONE_RADII)

    def test_oracle_inside_points_fall_in_every_mask(self, tiny_bundle, rng):
        box = tiny_bundle.box
        points = box.lo_array + rng.random((20000, 3)) * (box.hi_array - box.lo_array)
        inside = points[tiny_bundle.oracle(points, 0)]
        assert len(inside) > 0
        for v, cam in enumerate(tiny_bundle.cameras):
            uv, _ = cam.project(inside)
            cols = np.floor(uv[:, 0]).astype(int)
            rows = np.floor(uv[:, 1]).astype(int)
            assert np.all((cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height))
            assert dilate(tiny_bundle.mask(0, v), 1)[rows, cols].all()

    def test_joints_project_inside_the_dilated_mask(self, tiny_bundle):
        for p, record in enumerate(tiny_bundle.poses):
            joints = np.concatenate([hand.joints for hand in record.pose.hands()])
            for v, cam in enumerate(tiny_bundle.cameras):
                uv, _ = cam.project(joints)
                cols = np.clip(np.floor(uv[:, 0]).astype(int), 0, cam.width - 1)
                rows = np.clip(np.floor(uv[:, 1]).astype(int), 0, cam.height - 1)
                assert dilate(tiny_bundle.mask(p, v), 6)[rows, cols].all()
