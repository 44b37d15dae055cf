import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    z = (x ^ (x >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream: int, keys: np.ndarray, count: int) -> np.ndarray:
    """
    Uniform draws in [0, 1) addressed by (seed, stream, key, j).

    Rules:
    - The value for a given key never depends on which other keys are in the
      batch, so partitioned or parallel evaluation gives identical draws.
    - `stream` separates independent uses (e.g. one frame vs another).
    - Returns a float64 array of shape (len(keys), count).
    """
    keys = np.asarray(keys, dtype=np.int64).reshape(-1).astype(np.uint64)
    base = _splitmix64(np.array([seed], dtype=np.int64).astype(np.uint64))
    base = _splitmix64(base ^ np.array([stream], dtype=np.int64).astype(np.uint64))
    per_key = _splitmix64(base ^ keys)
    lanes = np.arange(count, dtype=np.uint64)
    bits = _splitmix64(per_key[:, None] ^ _splitmix64(lanes)[None, :])
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 2.0 ** 53)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in meters."""

    lo: tuple
    hi: tuple

    def __post_init__(self) -> None:
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"Box must have positive volume, got lo={self.lo} hi={self.hi}")

    @classmethod
    def around(cls, points: np.ndarray, margin: float) -> "Box":
        points = np.asarray(points, dtype=np.float64)
        return cls(tuple(points.min(axis=0) - margin), tuple(points.max(axis=0) + margin))

    @classmethod
    def cube(cls, center, size: float) -> "Box":
        center = np.asarray(center, dtype=np.float64)
        return cls(tuple(center - size / 2), tuple(center + size / 2))

    @property
    def lo_array(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def hi_array(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return (self.lo_array + self.hi_array) / 2

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        return np.all((points >= self.lo_array) & (points <= self.hi_array), axis=-1)

    def intersect(self, other: "Box") -> "Box":
        return Box(tuple(np.maximum(self.lo_array, other.lo_array)), tuple(np.minimum(self.hi_array, other.hi_array)))

    def ray_interval(self, origins: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Slab test; returns (t_enter, t_exit, hit) with t_enter clipped at 0."""
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / directions
            t1 = (self.lo_array - origins) * inv
            t2 = (self.hi_array - origins) * inv
        t_lo = np.nanmax(np.minimum(t1, t2), axis=-1)
        t_hi = np.nanmin(np.maximum(t1, t2), axis=-1)
        t_lo = np.maximum(t_lo, 0.0)
        return t_lo, t_hi, t_hi > t_lo

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, data: dict) -> "Box":
        return cls(tuple(float(v) for v in data["lo"]), tuple(float(v) for v in data["hi"]))


def write_json(data: Any, output_path: Path) -> None:
    """Write UTF-8 JSON via a temporary sibling so a failure never leaves a partial file."""
    output_path = Path(output_path)
    tmp = output_path.with_name(output_path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
    os.replace(tmp, output_path)


def read_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def append_jsonl(record: dict, output_path: Path) -> None:
    with open(output_path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, ensure_ascii=False) + "\n")
