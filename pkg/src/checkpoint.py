"""
Binary checkpoint format shared by every learned component.

Layout (little-endian):
    b"OCCA" | version u32 | count u32 |
    count x (name_len u32 | utf-8 name | rank u32 | extents u32 x rank | float32 values)
"""
import logging
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"OCCA"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint file is missing, truncated or of another format."""
    pass


def save_checkpoint(path: Path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        array = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())

    logger.info("Saving %d tensors to %s", len(tensors), path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp, path)
    except Exception as exc:
        logger.error("Failed to save checkpoint %s: %s", path, exc)
        raise
    logger.info("Saved checkpoint (%.1f KB)", path.stat().st_size / 1024)


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint not found: {path}") from None

    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (magic {blob[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        offset = 12
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n_values = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset)
            offset += 4 * n_values
            tensors[name] = values.reshape(shape).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc

    logger.info("Loaded %d tensors from %s", len(tensors), path)
    return tensors
