import numpy as np
import pytest

from src.camera import Camera
from src.carving import candidate_box
from src.imaging import erode
from src.rays import (
    MIN_DELTA,
    RayBatch,
    SamplingError,
    compute_bounds,
    fixed_bounds,
    generate_rays,
    hierarchical_samples,
    march_crossing,
    uniform_samples,
)
from src.utils import Box

SPHERE_RADIUS = 0.05


def sphere_probability(points):
    """Smooth occupancy of a 5 cm ball at the origin."""
    distance = np.linalg.norm(points, axis=-1)
    return 1.0 / (1.0 + np.exp(-(SPHERE_RADIUS - distance) * 2000.0))


def straight_batch(count, near=1.0, far=2.0):
    return RayBatch(
        origins=np.zeros((count, 3)),
        directions=np.tile([0.0, 0.0, 1.0], (count, 1)),
        pixels=np.arange(count),
        near=np.full(count, near),
        far=np.full(count, far),
        alive=np.ones(count, dtype=bool),
        height=1,
        width=count,
    )


class TestGenerateRays:
    def test_principal_point_ray_is_the_optical_axis(self):
        K = np.array([[80.0, 0.0, 4.5], [0.0, 80.0, 4.5], [0.0, 0.0, 1.0]])
        cam = Camera.look_at([0.3, 0.2, 0.5], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], K, 9, 9)
        batch = generate_rays(cam, pixels=np.array([4 * 9 + 4]))
        assert np.allclose(batch.directions[0], cam.optical_axis)
        assert np.allclose(batch.origins[0], cam.center)

    def test_unit_directions(self, frontal_camera):
        batch = generate_rays(frontal_camera)
        assert len(batch) == 64 * 64
        assert np.allclose(np.linalg.norm(batch.directions, axis=1), 1.0, atol=1e-9)

    def test_rays_reproject_to_their_pixels(self, frontal_camera):
        batch = generate_rays(frontal_camera, pixels=np.array([0, 65, 4095]))
        uv, _ = frontal_camera.project(batch.origins + 0.3 * batch.directions)
        assert np.allclose(uv, [[0.5, 0.5], [1.5, 1.5], [63.5, 63.5]])


class TestBounds:
    def test_march_finds_the_sphere_entry(self):
        origins = np.array([[0.0, 0.0, -0.5]])
        directions = np.array([[0.0, 0.0, 1.0]])
        depths, found = march_crossing(sphere_probability, origins, directions, np.zeros(1), np.ones(1), 0.0025, 0.1)
        assert found[0]
        assert depths[0] == pytest.approx(0.45, abs=0.0025)
        assert sphere_probability(origins + depths[0] * directions)[0] >= 0.1

    def test_march_rejects_bad_step(self):
        with pytest.raises(SamplingError):
            march_crossing(sphere_probability, np.zeros((1, 3)), np.ones((1, 3)), np.zeros(1), np.ones(1), 0.0, 0.5)

    def test_hit_and_background_rays(self, frontal_camera):
        batch = generate_rays(frontal_camera, pixels=np.array([32 * 64 + 32, 0]))
        bounded = compute_bounds(batch, sphere_probability, Box.cube([0.0, 0.0, 0.0], 0.25))
        assert bounded.alive.tolist() == [True, False]
        step = 0.02 / 8
        assert bounded.near[0] == pytest.approx(0.45, abs=step)
        assert bounded.near[0] < bounded.far[0] <= bounded.near[0] + 0.02 + 1e-12

    def test_refined_crossing_sits_on_the_threshold(self, frontal_camera):
        batch = generate_rays(frontal_camera, pixels=np.array([32 * 64 + 32]))
        bounded = compute_bounds(batch, sphere_probability, Box.cube([0.0, 0.0, 0.0], 0.25))
        point = bounded.origins[0] + bounded.near[0] * bounded.directions[0]
        assert abs(sphere_probability(point[None])[0] - 0.1) < 0.02

    def test_empty_scene_prunes_everything(self, frontal_camera):
        batch = generate_rays(frontal_camera)
        bounded = compute_bounds(batch, lambda p: np.zeros(len(p)), Box.cube([0.0, 0.0, 0.0], 0.25))
        assert bounded.alive_count == 0

    def test_pruned_rays_miss_the_eroded_mask(self, tiny_bundle):
        box = candidate_box(tiny_bundle, 0)
        occupancy = lambda points: tiny_bundle.oracle(points, 0).astype(np.float64)
        for v, cam in enumerate(tiny_bundle.cameras):
            mask = tiny_bundle.mask(0, v).ravel()
            bounded = compute_bounds(generate_rays(cam), occupancy, box)
            assert not np.any(erode(tiny_bundle.mask(0, v), 1).ravel() & ~bounded.alive)
            assert not np.any(bounded.alive & ~mask)

    def test_fixed_bounds_use_the_box(self, frontal_camera):
        batch = fixed_bounds(generate_rays(frontal_camera, pixels=np.array([32 * 64 + 32])), Box.cube([0.0, 0.0, 0.0], 0.2))
        assert batch.alive[0]
        assert batch.near[0] == pytest.approx(0.4, abs=1e-3)
        assert batch.far[0] == pytest.approx(0.6, abs=1e-3)


class TestUniformSamples:
    def test_one_sample_per_stratum(self):
        samples = uniform_samples(straight_batch(50), 8, seed=3)
        strata = np.floor((samples.depths - 1.0) * 8).astype(int)
        assert np.array_equal(strata, np.tile(np.arange(8), (50, 1)))
        assert np.all(np.diff(samples.depths, axis=1) > 0)

    def test_midpoints_without_randomization(self):
        samples = uniform_samples(straight_batch(2), 4, randomize=False)
        assert np.allclose(samples.depths[0], [1.125, 1.375, 1.625, 1.875])
        assert np.allclose(samples.deltas[0], [0.25, 0.25, 0.25, 0.125])

    def test_points_lie_on_rays(self):
        samples = uniform_samples(straight_batch(3), 4, seed=1)
        assert np.allclose(samples.points[..., 2], samples.depths)

    def test_draws_do_not_depend_on_the_batch(self, frontal_camera):
        full = fixed_bounds(generate_rays(frontal_camera), Box.cube([0.0, 0.0, 0.0], 0.25))
        part = fixed_bounds(generate_rays(frontal_camera, pixels=full.pixels[2000:2010]), Box.cube([0.0, 0.0, 0.0], 0.25))
        a = uniform_samples(full, 8, seed=5)
        b = uniform_samples(part, 8, seed=5)
        rows = np.searchsorted(a.pixels, b.pixels)
        assert np.allclose(a.depths[rows], b.depths, rtol=0, atol=1e-12)

    def test_dead_rays_get_no_samples(self):
        batch = straight_batch(4)
        batch.alive[1] = False
        samples = uniform_samples(batch, 4)
        assert samples.num_rays == 3 and 1 not in samples.rays

    def test_needs_two_samples(self):
        with pytest.raises(SamplingError):
            uniform_samples(straight_batch(1), 1)

    def test_last_delta_is_floored(self):
        batch = straight_batch(1, near=1.0, far=1.0 + 1e-9)
        assert uniform_samples(batch, 2).deltas[0, -1] >= MIN_DELTA


class TestHierarchicalSamples:
    def test_one_hot_weights_concentrate_samples(self):
        batch = straight_batch(20)
        coarse = uniform_samples(batch, 8, randomize=False)
        weights = np.zeros((20, 8))
        weights[:, 5] = 1.0
        merged, fallbacks = hierarchical_samples(batch, coarse, weights, 8, seed=2)
        assert fallbacks == 0
        assert merged.per_ray == 16
        fine = merged.depths[~np.isin(merged.depths, coarse.depths)].reshape(20, -1)
        assert np.all((fine >= 1.0 + 5 / 8) & (fine <= 1.0 + 6 / 8))

    def test_merged_depths_increase(self, rng):
        batch = straight_batch(30)
        coarse = uniform_samples(batch, 8, seed=1)
        merged, _ = hierarchical_samples(batch, coarse, rng.random((30, 8)), 8, seed=1)
        assert np.all(np.diff(merged.depths, axis=1) > 0)
        assert np.all(merged.deltas > 0)
        assert np.all((merged.depths >= 1.0) & (merged.depths <= 2.0))

    def test_zero_weights_fall_back_to_uniform(self):
        batch = straight_batch(5)
        coarse = uniform_samples(batch, 4, randomize=False)
        merged, fallbacks = hierarchical_samples(batch, coarse, np.zeros((5, 4)), 4)
        assert fallbacks == 5
        assert merged.per_ray == 8

    def test_uniform_weights_fill_bins_evenly(self):
        rays = 1250
        batch = straight_batch(rays)
        coarse = uniform_samples(batch, 8, randomize=False)
        merged, _ = hierarchical_samples(batch, coarse, np.ones((rays, 8)), 8, seed=11)
        counts = np.bincount(np.floor((merged.depths - 1.0) * 8).astype(int).ravel(), minlength=8) - rays
        expected = rays * 8 / 8
        sigma = np.sqrt(rays * 8 * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - expected) < 3 * sigma)

    def test_geometric_weights_match_the_multinomial(self):
        rays = 1250
        batch = straight_batch(rays)
        coarse = uniform_samples(batch, 8, randomize=False)
        profile = 2.0 ** np.arange(8)
        merged, fallbacks = hierarchical_samples(batch, coarse, np.tile(profile, (rays, 1)), 8, seed=13)
        assert fallbacks == 0
        counts = np.bincount(np.floor((merged.depths - 1.0) * 8).astype(int).ravel(), minlength=8)[:8] - rays
        share = profile / profile.sum()
        expected = rays * 8 * share
        sigma = np.sqrt(rays * 8 * share * (1 - share))
        assert np.all(np.abs(counts - expected) < 3 * sigma)

    def test_same_seed_same_samples(self):
        batch = straight_batch(10)
        coarse = uniform_samples(batch, 8, seed=0)
        weights = np.linspace(0.1, 1.0, 8)[None].repeat(10, axis=0)
        a, _ = hierarchical_samples(batch, coarse, weights, 8, seed=4)
        b, _ = hierarchical_samples(batch, coarse, weights, 8, seed=4)
        assert np.array_equal(a.depths, b.depths)

    def test_weight_validation(self):
        batch = straight_batch(2)
        coarse = uniform_samples(batch, 4)
        with pytest.raises(SamplingError, match="do not match"):
            hierarchical_samples(batch, coarse, np.ones((2, 3)), 4)
        with pytest.raises(SamplingError, match="non-negative"):
            hierarchical_samples(batch, coarse, -np.ones((2, 4)), 4)
