"""
Conditioned radiance MLP and discrete volume compositing.

Per sample the MLP reads the occupancy features, the signed two-hand
probability, the identity's appearance code and an encoded view direction,
and returns color, density and extra feature channels for the upsampler.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.appearance import CodeTable, get_code
from src.nn import Linear, Module
from src.tensor import Tensor, concat

logger = logging.getLogger(__name__)

WIDTH = 128
DEPTH = 8
EXTRA_DIM = 8
VIEW_FREQUENCIES = 4


def view_encoding_dim(frequencies: int = VIEW_FREQUENCIES) -> int:
    return 3 + 3 * 2 * frequencies


def encode_directions(directions: np.ndarray, frequencies: int = VIEW_FREQUENCIES) -> np.ndarray:
    """[d, sin(2^k pi d), cos(2^k pi d)] for k < frequencies."""
    directions = np.asarray(directions, dtype=np.float64)
    parts = [directions]
    for k in range(frequencies):
        scaled = (2.0 ** k) * np.pi * directions
        parts.append(np.sin(scaled))
        parts.append(np.cos(scaled))
    return np.concatenate(parts, axis=-1)


@dataclass
class SampleInputs:
    """Per-sample conditioning, flattened over (ray, sample)."""

    features: np.ndarray
    signed: np.ndarray
    directions: np.ndarray
    code_id: str

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class RadianceOutput:
    color: Tensor
    sigma: Tensor
    extra: Tensor


@dataclass
class CompositeResult:
    rgb: Tensor
    opacity: Tensor
    extra: Optional[Tensor]
    weights: Tensor


class RadianceModel(Module):
    """
    Eight fully connected layers with the input re-injected halfway.

    Heads: sigmoid color (3), softplus density (1) and linear extra features (d).
    """

    def __init__(
        self,
        seed: int = 0,
        feature_dim: int = 32,
        code_dim: int = 16,
        extra_dim: int = EXTRA_DIM,
        width: int = WIDTH,
        depth: int = DEPTH,
        use_view_dirs: bool = True,
        use_probability: bool = True,
        use_appearance: bool = True,
    ) -> None:
        rng = np.random.default_rng(seed + 1)
        self.feature_dim = feature_dim
        self.code_dim = code_dim
        self.extra_dim = extra_dim
        self.use_view_dirs = use_view_dirs
        self.use_probability = use_probability
        self.use_appearance = use_appearance
        self.in_dim = (
            feature_dim
            + (1 if use_probability else 0)
            + (code_dim if use_appearance else 0)
            + (view_encoding_dim() if use_view_dirs else 0)
        )
        self.skip = depth // 2
        self.layers = [
            Linear(self.in_dim if i == 0 else width + (self.in_dim if i == self.skip else 0), width, rng)
            for i in range(depth)
        ]
        self.color = Linear(width, 3, rng)
        self.density = Linear(width, 1, rng)
        self.extra = Linear(width, extra_dim, rng)

    def forward(self, x: Tensor) -> RadianceOutput:
        h = x
        for i, layer in enumerate(self.layers):
            if i == self.skip:
                h = concat([h, x], axis=1)
            h = layer(h).relu()
        return RadianceOutput(self.color(h).sigmoid(), self.density(h).softplus(), self.extra(h))

    def assemble(self, inputs: SampleInputs, code: Optional[Tensor]) -> Tensor:
        count = len(inputs)
        parts = [Tensor(inputs.features)]
        if self.use_probability:
            parts.append(Tensor(np.asarray(inputs.signed).reshape(count, 1)))
        if self.use_appearance:
            parts.append(code.expand(count, self.code_dim))
        if self.use_view_dirs:
            parts.append(Tensor(encode_directions(inputs.directions)))
        return concat(parts, axis=1)


def eval_radiance(model: RadianceModel, inputs: SampleInputs, codes: CodeTable) -> RadianceOutput:
    """
    Evaluate the radiance MLP on every sample.

    Raises:
        UnknownIdentityError: If the samples' code id is not in `codes`.
    """
    code = get_code(codes, inputs.code_id)
    return model(model.assemble(inputs, code))


def composite(
    sigma: Tensor,
    color: Tensor,
    deltas: np.ndarray,
    background: np.ndarray,
    extra: Optional[Tensor] = None,
) -> CompositeResult:
    """
    Alpha-composite samples front to back.

    alpha_i = 1 - exp(-sigma_i delta_i), T_i = exp(-sum_{j<i} sigma_j delta_j),
    w_i = T_i alpha_i, C = sum w_i c_i + (1 - sum w_i) background. Extra
    feature channels use the same weights over a zero background.

    Args:
        sigma: (R, k) densities.
        color: (R, k, 3) colors.
        deltas: (R, k) segment lengths.
        background: RGB triplet.
        extra: Optional (R, k, d) feature channels.
    """
    rays, k = sigma.shape
    tau = sigma * Tensor(deltas, dtype=sigma.data.dtype)
    alpha = 1.0 - (-tau).exp()
    transmittance = (-tau.cumsum_exclusive(axis=1)).exp()
    weights = transmittance * alpha
    opacity = weights.sum(axis=1)

    w3 = weights.reshape(rays, k, 1).expand(rays, k, 3)
    bg = Tensor(np.broadcast_to(np.asarray(background, dtype=np.float64), (rays, 3)), dtype=sigma.data.dtype)
    rgb = (w3 * color).sum(axis=1) + (1.0 - opacity).reshape(rays, 1).expand(rays, 3) * bg

    extra_out = None
    if extra is not None:
        d = extra.shape[2]
        extra_out = (weights.reshape(rays, k, 1).expand(rays, k, d) * extra).sum(axis=1)
    return CompositeResult(rgb, opacity, extra_out, weights)
