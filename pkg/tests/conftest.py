import numpy as np
import pytest

from src.camera import Camera
from src.carving import candidate_box, sample_bbox
from src.config import RunConfig
from src.occupancy import split_by_hand, train_occupancy
from src.render import HandModels, RenderSettings, train_renderer
from src.synth import canonical_template, make_dataset

TINY_IMAGE = 64

ACCEPTANCE_RUN = {
    "data": {"train_views": [0, 1, 2, 3, 4, 5, 6, 7], "test_views": [8, 9]},
    "image": {"crop_size": 64, "downscale": 2},
    "sampling": {"k_u": 8, "k_h": 8, "grid_spacing": 0.004, "dense_samples": 64},
    "model": {
        "width": 64,
        "depth": 6,
        "feature_dim": 16,
        "code_dim": 8,
        "extra_dim": 4,
        "embed_dim": 32,
        "occ_hidden": 64,
        "occ_blocks": 2,
        "up_width": 16,
        "up_blocks": 2,
    },
}
ACCEPTANCE_STEPS = 5000


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run training-length acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def frontal_camera():
    """64x64 camera at z = +0.5 looking at the origin, focal 100."""
    K = np.array([[100.0, 0.0, 32.0], [0.0, 100.0, 32.0], [0.0, 0.0, 1.0]])
    return Camera.look_at([0.0, 0.0, 0.5], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], K, 64, 64)


@pytest.fixture(scope="session")
def tiny_bundle():
    """In-memory synthetic dataset: 4 views, 2 poses, 2 identities, 64x64 images."""
    return make_dataset(n_views=4, n_poses=2, n_identities=2, seed=0, image_size=TINY_IMAGE)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synth"
    make_dataset(n_views=4, n_poses=2, n_identities=2, out_dir=out, seed=0, image_size=TINY_IMAGE)
    return out


@pytest.fixture
def small_config():
    """Run configuration scaled down for unit tests."""
    return RunConfig.from_dict(
        {
            "data": {"train_views": [0, 1, 2], "test_views": [3]},
            "image": {"crop_size": 32, "downscale": 2},
            "sampling": {"k_u": 4, "k_h": 4, "grid_spacing": 0.008, "dense_samples": 16},
            "model": {
                "width": 16,
                "depth": 4,
                "feature_dim": 8,
                "code_dim": 4,
                "extra_dim": 2,
                "embed_dim": 8,
                "occ_hidden": 16,
                "occ_blocks": 1,
                "up_width": 4,
                "up_blocks": 1,
            },
        }
    )


@pytest.fixture
def small_models(small_config, tiny_bundle):
    return HandModels.build(small_config, tiny_bundle.code_ids(), canonical_template())


@pytest.fixture
def small_settings(small_config, tiny_bundle):
    return RenderSettings.from_config(small_config, tiny_bundle)


def numeric_gradient(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of a float64 array."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn(x)
        flat[i] = old - eps
        down = fn(x)
        flat[i] = old
        g[i] = (up - down) / (2 * eps)
    return grad


@pytest.fixture(scope="session")
def acceptance_config():
    return RunConfig.from_dict(ACCEPTANCE_RUN)


@pytest.fixture(scope="session")
def acceptance_bundle():
    """10 views of 2 poses, one per identity, at the full synthetic resolution."""
    return make_dataset(n_views=10, n_poses=2, n_identities=2, seed=0)


@pytest.fixture(scope="session")
def acceptance_settings(acceptance_config, acceptance_bundle):
    return RenderSettings.from_config(acceptance_config, acceptance_bundle)


@pytest.fixture(scope="session")
def occupancy_state(acceptance_config, acceptance_bundle):
    """Occupancy weights fit to the synthetic oracle of every pose."""
    bundle = acceptance_bundle
    models = HandModels.build(acceptance_config, bundle.code_ids(), bundle.canonical)
    clouds = []
    for p, record in enumerate(bundle.poses):
        points = sample_bbox(candidate_box(bundle, p), 60000, p)
        clouds.extend(split_by_hand(points, bundle.oracle(points, p), record.pose))
    train_occupancy(models.occupancy, clouds, steps=ACCEPTANCE_STEPS, lr=1e-3, batch_size=512, canonical=bundle.canonical)
    return {name: value.copy() for name, value in models.state_dict(parts=("occ",)).items()}


@pytest.fixture
def occupancy_models(acceptance_config, acceptance_bundle, occupancy_state):
    """Fresh renderer models on top of the fitted occupancy."""
    models = HandModels.build(acceptance_config, acceptance_bundle.code_ids(), acceptance_bundle.canonical)
    models.load_state_dict(occupancy_state, parts=("occ",))
    return models


@pytest.fixture(scope="session")
def trained_hands(acceptance_config, acceptance_bundle, acceptance_settings, occupancy_state):
    """Renderer trained on the training views of every pose."""
    models = HandModels.build(acceptance_config, acceptance_bundle.code_ids(), acceptance_bundle.canonical)
    models.load_state_dict(occupancy_state, parts=("occ",))
    train_renderer(
        models,
        acceptance_bundle,
        acceptance_config.data.train_views,
        acceptance_settings,
        steps=ACCEPTANCE_STEPS,
        lr=5e-4,
        jitter=(acceptance_config.image.jitter_scale, acceptance_config.image.jitter_shift),
        log_every=500,
    )
    return models
