"""
Run configuration.

A YAML file maps section names to key/value pairs; every key has a default
and unknown sections or keys are rejected:

    data:
      path: data
      train_views: [0, 1, 2, 3, 4, 5, 6, 7]
      test_views: [8, 9]
    sampling:
      k_u: 8
"""
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Raised for unreadable, malformed or inconsistent configuration files."""
    pass


@dataclass
class DataConfig:
    path: str = "data"
    run_dir: str = "runs/default"
    train_views: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5, 6, 7])
    test_views: list = field(default_factory=lambda: [8, 9])


@dataclass
class ImageConfig:
    crop_size: int = 128
    downscale: int = 2
    crop_margin: float = 0.25
    jitter_scale: float = 0.05
    jitter_shift: float = 3.0
    normalization: str = "identity"


@dataclass
class SamplingConfig:
    k_u: int = 8
    k_h: int = 8
    p_min: float = 0.1
    p_max: float = 0.99
    d_fix: float = 0.02
    grid_spacing: float = 0.004
    dense_samples: int = 64


@dataclass
class ModelConfig:
    width: int = 128
    depth: int = 8
    feature_dim: int = 32
    code_dim: int = 16
    extra_dim: int = 8
    embed_dim: int = 64
    occ_hidden: int = 128
    occ_blocks: int = 4
    up_width: int = 32
    up_blocks: int = 3
    use_view_dirs: bool = True
    use_probability: bool = True
    use_appearance: bool = True


@dataclass
class OptimConfig:
    lr: float = 5e-4
    occ_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    occ_steps: int = 2000
    occ_batch: int = 512
    render_steps: int = 2000


@dataclass
class LossConfig:
    l1: float = 0.6
    mse: float = 0.4
    code_reg: float = 1e-4
    upsample: float = 1.0


@dataclass
class CarvingConfig:
    sigma_max: float = 0.08
    rho: float = 1.0
    candidates: int = 200000
    workers: int = 1


@dataclass
class TrainingConfig:
    log_every: int = 50
    eval_every: int = 0
    val_fraction: float = 0.1
    bench_frames: int = 4


@dataclass
class SeedConfig:
    data: int = 0
    carving: int = 0
    model: int = 0
    training: int = 0


SECTIONS = {
    "data": DataConfig,
    "image": ImageConfig,
    "sampling": SamplingConfig,
    "model": ModelConfig,
    "optim": OptimConfig,
    "loss": LossConfig,
    "carving": CarvingConfig,
    "training": TrainingConfig,
    "seeds": SeedConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    carving: CarvingConfig = field(default_factory=CarvingConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    base_dir: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        train = set(self.data.train_views)
        test = set(self.data.test_views)
        if train & test:
            raise ConfigError(f"data.train_views and data.test_views overlap: {sorted(train & test)}")
        if not train:
            raise ConfigError("data.train_views must not be empty")
        if self.image.downscale < 1:
            raise ConfigError(f"image.downscale must be >= 1, got {self.image.downscale}")
        if self.image.crop_size % self.image.downscale:
            raise ConfigError(
                f"image.crop_size {self.image.crop_size} is not divisible by image.downscale {self.image.downscale}"
            )
        if self.sampling.k_u < 2:
            raise ConfigError(f"sampling.k_u must be >= 2, got {self.sampling.k_u}")
        if not 0 < self.carving.rho <= 1:
            raise ConfigError(f"carving.rho must be in (0, 1], got {self.carving.rho}")

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, data: Optional[dict], base_dir: Optional[Path] = None) -> "RunConfig":
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("Configuration must be a mapping of sections")
        sections = {}
        for name, values in data.items():
            if name not in SECTIONS:
                raise ConfigError(f"Unknown config section '{name}'")
            if values is None:
                values = {}
            if not isinstance(values, dict):
                raise ConfigError(f"Config section '{name}' must be a mapping")
            sections[name] = _build_section(name, SECTIONS[name], values)
        return cls(**sections, base_dir=base_dir)

    def resolve(self, value: str) -> Path:
        """Resolve a path relative to the config file's directory."""
        path = Path(value)
        if path.is_absolute() or self.base_dir is None:
            return path
        return self.base_dir / path

    @property
    def data_path(self) -> Path:
        return self.resolve(self.data.path)

    @property
    def run_path(self) -> Path:
        return self.resolve(self.data.run_dir)


def _coerce(key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be a list of integers, got {value!r}")
        return list(value)
    return value


def _build_section(name: str, section_cls, values: dict):
    defaults = section_cls()
    known = {f.name for f in fields(section_cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"Unknown config key '{name}.{key}'")
        kwargs[key] = _coerce(f"{name}.{key}", getattr(defaults, key), value)
    return section_cls(**kwargs)


def load_config(path: Optional[Path]) -> RunConfig:
    """
    Read a YAML run configuration; None gives the defaults.

    Raises:
        ConfigError: If the file is missing, not valid YAML, or has unknown or mistyped keys.
    """
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Could not parse {path}: {exc}") from exc
    try:
        return RunConfig.from_dict(data, base_dir=path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(config: RunConfig, path: Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
    tmp.replace(path)
