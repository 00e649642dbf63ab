"""Edit-direction arithmetic over token-sequence text embeddings.

A direction is the mean embedding of the after-edit captions minus the
mean embedding of the before-edit captions, computed over the encoder's
full token-sequence output so it can be added directly to the denoiser's
conditioning input.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

_MAGIC = b"DIRE"
_VERSION = 1


class EmbeddingShapeError(ValueError):
    """Embeddings that do not share one (token_positions, embed_dim) shape."""


@dataclass(frozen=True)
class ConditioningEmbedding:
    """Full token-sequence output of a text encoder for one caption."""

    matrix: np.ndarray  # (token_positions, embed_dim)

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2:
            raise EmbeddingShapeError(f"expected a 2-d matrix, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise EmbeddingShapeError("embedding contains non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class DirectionEmbedding:
    """Additive edit direction, shape-compatible with a conditioning embedding."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2:
            raise EmbeddingShapeError(f"expected a 2-d matrix, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise EmbeddingShapeError("direction contains non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape  # type: ignore[return-value]


def _common_shape(embeddings: Sequence[ConditioningEmbedding]) -> tuple[int, int]:
    shapes = {e.shape for e in embeddings}
    if len(shapes) != 1:
        raise EmbeddingShapeError(f"embeddings disagree on shape: {sorted(shapes)}")
    return shapes.pop()


def compute_direction(
    before: Sequence[ConditioningEmbedding], after: Sequence[ConditioningEmbedding]
) -> DirectionEmbedding:
    """Entrywise mean(after) minus mean(before)."""
    if not before or not after:
        raise EmbeddingShapeError("both caption sets must be non-empty")
    shape = _common_shape(list(before) + list(after))
    mean_after = np.mean(np.stack([e.matrix for e in after]), axis=0, dtype=np.float64)
    mean_before = np.mean(np.stack([e.matrix for e in before]), axis=0, dtype=np.float64)
    out = (mean_after - mean_before).astype(before[0].matrix.dtype)
    assert out.shape == shape
    return DirectionEmbedding(matrix=out)


def apply_direction(
    base: ConditioningEmbedding, direction: DirectionEmbedding, strength: float = 1.0
) -> ConditioningEmbedding:
    """base + strength * direction."""
    if base.shape != direction.shape:
        raise EmbeddingShapeError(f"base shape {base.shape} != direction shape {direction.shape}")
    if not math.isfinite(strength):
        raise EmbeddingShapeError(f"strength {strength} is not finite")
    return ConditioningEmbedding(matrix=base.matrix + strength * direction.matrix)


def save_direction(direction: DirectionEmbedding, path: str | Path) -> None:
    """Write a direction: 4-byte magic, u32 version, u32 rows, u32 cols, row-major float32 (little-endian)."""
    rows, cols = direction.shape
    data = np.ascontiguousarray(direction.matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, rows, cols))
        fh.write(data.tobytes())


def load_direction(path: str | Path) -> DirectionEmbedding:
    """Read a direction written by :func:`save_direction`."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a direction file")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * rows * cols
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    matrix = np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, cols).copy()
    return DirectionEmbedding(matrix=matrix)
