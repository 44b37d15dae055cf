"""Layers, losses and the Adam optimizer on top of src.tensor."""
from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from src.tensor import Tensor, conv2d


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"Missing parameter '{name}' in state")
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"Parameter '{name}' has shape {p.shape}, state holds {value.shape}")
            p.data = value.astype(p.data.dtype).copy()


def parameter(array: np.ndarray) -> Tensor:
    return Tensor(array, requires_grad=True)


class Linear(Module):
    """y = x W + b for row-major batches (N, in) -> (N, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero: bool = False) -> None:
        self.in_features = in_features
        self.out_features = out_features
        if zero:
            weight = np.zeros((in_features, out_features))
        else:
            bound = math.sqrt(6.0 / in_features)
            weight = rng.uniform(-bound, bound, (in_features, out_features))
        self.weight = parameter(weight)
        self.bias = parameter(np.zeros((1, out_features)))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias.expand(x.shape[0], self.out_features)


class Conv2d(Module):
    """3x3 same-size convolution over (C, H, W) with a per-channel bias."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, zero: bool = False) -> None:
        self.in_channels = in_channels
        self.out_channels = out_channels
        if zero:
            kernel = np.zeros((out_channels, in_channels, 3, 3))
        else:
            bound = math.sqrt(6.0 / (in_channels * 9))
            kernel = rng.uniform(-bound, bound, (out_channels, in_channels, 3, 3))
        self.kernel = parameter(kernel)
        self.bias = parameter(np.zeros((out_channels, 1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.kernel)
        return out + self.bias.expand(out.shape)


class Adam:
    """Adam with bias correction; moment state persists across step() calls."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if all(p.grad is None for p in self.params):
            return
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def l1_loss(pred: Tensor, target: np.ndarray, weight: Optional[np.ndarray] = None) -> Tensor:
    diff = (pred - Tensor(target, dtype=pred.data.dtype)).abs()
    return _weighted_mean(diff, weight)


def mse_loss(pred: Tensor, target: np.ndarray, weight: Optional[np.ndarray] = None) -> Tensor:
    diff = pred - Tensor(target, dtype=pred.data.dtype)
    return _weighted_mean(diff * diff, weight)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, computed as softplus(z) - y z."""
    y = Tensor(labels, dtype=logits.data.dtype)
    return (logits.softplus() - y * logits).mean()


def _weighted_mean(values: Tensor, weight: Optional[np.ndarray]) -> Tensor:
    if weight is None:
        return values.mean()
    w = np.broadcast_to(np.asarray(weight, dtype=values.data.dtype), values.shape)
    total = float(w.sum())
    return (values * Tensor(w, dtype=values.data.dtype)).sum() * (1.0 / max(total, 1.0))
