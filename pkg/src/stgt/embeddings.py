"""2D sinusoidal spatial embeddings, temporal embeddings and frame assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ConfigError, DimensionError


def sinusoid_embed(z: float, d: int) -> np.ndarray:
    """Sin/cos features of a scalar position.

    Frequency index ``i`` runs over ``1..d/2``. Slot ``2(i-1)`` holds
    ``sin(z / 10000**(2i/d))`` and slot ``2(i-1)+1`` holds
    ``cos(z / 10000**((2i-1)/d))``. Note the cosine exponent is ``(2i-1)/d``,
    not the usual ``2i/d``.
    """
    if d < 2 or d % 2:
        raise ConfigError(f"embedding dimension must be even and >= 2, got {d}")
    i = np.arange(1, d // 2 + 1, dtype=np.float64)
    out = np.empty(d)
    out[0::2] = np.sin(z / 10000.0 ** (2 * i / d))
    out[1::2] = np.cos(z / 10000.0 ** ((2 * i - 1) / d))
    return out


def sinusoid_frequencies(d: int) -> np.ndarray:
    """Angular frequency of each slot of :func:`sinusoid_embed`."""
    i = np.arange(1, d // 2 + 1, dtype=np.float64)
    out = np.empty(d)
    out[0::2] = 10000.0 ** (-2 * i / d)
    out[1::2] = 10000.0 ** (-(2 * i - 1) / d)
    return out


@dataclass(frozen=True)
class SpatialEmbeddingTable:
    grid_side: int
    dim: int
    table: np.ndarray  # (n*n, d); row (y-1)*n + (x-1)


@dataclass(frozen=True)
class TemporalEmbeddingTable:
    frames: int
    dim: int
    table: np.ndarray  # (m, d)

    def __post_init__(self):
        if self.table.shape != (self.frames, self.dim):
            raise DimensionError(
                f"temporal table shape {self.table.shape} != {(self.frames, self.dim)}"
            )


def build_spatial_table(n: int, d: int) -> SpatialEmbeddingTable:
    if n < 1:
        raise ConfigError("grid side must be >= 1")
    if d % 4:
        raise ConfigError(f"spatial embedding dimension must be divisible by 4, got {d}")
    half = d // 2
    per_coord = np.stack([sinusoid_embed(c, half) for c in range(1, n + 1)])
    rows = np.empty((n * n, d))
    for y in range(n):
        for x in range(n):
            rows[y * n + x, :half] = per_coord[x]
            rows[y * n + x, half:] = per_coord[y]
    return SpatialEmbeddingTable(n, d, rows)


def assemble_frame(
    tokens: np.ndarray,
    spatial: SpatialEmbeddingTable,
    temporal: TemporalEmbeddingTable,
    frame_index: int,
) -> np.ndarray:
    """Add embeddings to one frame's ``[CLS] + n*n`` tokens; ``frame_index`` is 1-based.

    Every row gets the frame's temporal vector; only the grid rows get the
    spatial term, since [CLS] has no grid position.
    """
    if not 1 <= frame_index <= temporal.frames:
        raise IndexError(f"frame index {frame_index} outside 1..{temporal.frames}")
    t = spatial.grid_side**2
    if tokens.shape != (1 + t, spatial.dim):
        raise DimensionError(f"expected tokens of shape {(1 + t, spatial.dim)}, got {tokens.shape}")
    out = tokens + temporal.table[frame_index - 1]
    out[1:] += spatial.table
    return out


def assemble_video(tokens: np.ndarray, spatial: SpatialEmbeddingTable, temporal: np.ndarray):
    """Batched :func:`assemble_frame` over ``(..., m, 1+n*n, d)`` tokens."""
    out = tokens + temporal[:, None, :]
    out[..., 1:, :] += spatial.table
    return out
