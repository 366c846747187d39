"""Spatio-temporal token graph: similarity weights, frame-band mask, thresholded adjacency."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numerics import DimensionError, l2_normalize_rows

TRAIN_THRESHOLD = 0.1
EVAL_THRESHOLD = 0.5


def token_similarity(x_l: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Pairwise similarity of token rows; cosine by default, raw Gram if ``normalize`` is off."""
    x_l = np.asarray(x_l)
    if x_l.ndim < 2 or x_l.shape[-2] < 1:
        raise DimensionError(f"need at least one token row, got shape {x_l.shape}")
    if not normalize:
        return x_l @ np.swapaxes(x_l, -1, -2)
    xn = l2_normalize_rows(x_l)
    w = xn @ np.swapaxes(xn, -1, -2)
    nonzero = np.any(x_l != 0, axis=-1)
    diag = np.arange(x_l.shape[-2])
    w[..., diag, diag] = np.where(nonzero, 1.0, 0.0)
    return w


def temporal_mask(m: int, t: int) -> np.ndarray:
    """Frame-major band mask: tokens connect within a frame or to adjacent frames."""
    frame = np.arange(m * t) // t
    return np.abs(frame[:, None] - frame[None, :]) <= 1


def build_adjacency(weights: np.ndarray, mask: np.ndarray, threshold: float) -> np.ndarray:
    weights = np.asarray(weights)
    mask = np.asarray(mask, dtype=bool)
    if weights.shape[-2:] != mask.shape[-2:]:
        raise DimensionError(f"weights {weights.shape} vs mask {mask.shape}")
    return mask & (weights >= threshold)


@dataclass(frozen=True)
class SpatioTemporalGraph:
    adjacency: np.ndarray  # (N, N) bool
    weights: np.ndarray  # (N, N)
    frames: int
    tokens_per_frame: int
    threshold: float

    @property
    def node_count(self) -> int:
        return self.frames * self.tokens_per_frame

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Row pointer and column index arrays (per-row sorted neighbor lists)."""
        rows, cols = np.nonzero(self.adjacency)
        counts = np.bincount(rows, minlength=self.node_count)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return indptr, cols

    @cached_property
    def ell(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Neighbor lists padded to the max degree: ``(index, valid, weight)``, each ``(N, max_deg)``.

        Padding slots point at node 0 with ``valid`` False and weight 0.
        """
        indptr, cols = self.csr
        n = self.node_count
        deg = np.diff(indptr)
        width = int(deg.max()) if n else 0
        rows = np.repeat(np.arange(n), deg)
        slot = np.arange(cols.size) - np.repeat(indptr[:-1], deg)
        index = np.zeros((n, width), dtype=np.intp)
        valid = np.zeros((n, width), dtype=bool)
        index[rows, slot] = cols
        valid[rows, slot] = True
        weight = np.where(valid, np.take_along_axis(self.weights, index, axis=1), 0)
        return index, valid, weight

    def neighbors(self, i: int) -> np.ndarray:
        indptr, cols = self.csr
        return cols[indptr[i] : indptr[i + 1]]

    def to_dense_from_lists(self) -> np.ndarray:
        indptr, cols = self.csr
        out = np.zeros((self.node_count, self.node_count), dtype=bool)
        rows = np.repeat(np.arange(self.node_count), np.diff(indptr))
        out[rows, cols] = True
        return out


def build_graph(
    x_l: np.ndarray, frames: int, threshold: float, normalize: bool = True
) -> SpatioTemporalGraph:
    n_nodes = x_l.shape[0]
    if n_nodes % frames:
        raise DimensionError(f"{n_nodes} tokens do not split into {frames} frames")
    t = n_nodes // frames
    w = token_similarity(x_l, normalize=normalize)
    adj = build_adjacency(w, temporal_mask(frames, t), threshold)
    return SpatioTemporalGraph(adj, w, frames, t, threshold)


def degree_stats(g: SpatioTemporalGraph | np.ndarray) -> dict:
    adj = g.adjacency if isinstance(g, SpatioTemporalGraph) else np.asarray(g, dtype=bool)
    n = adj.shape[0]
    deg = adj.sum(axis=1)
    return {
        "mean_degree": float(deg.mean()) if n else 0.0,
        "density": float(deg.sum()) / (n * n) if n else 0.0,
        "isolated_nodes": int(np.sum(deg == 0)),
    }


def dump_graph(g: SpatioTemporalGraph, out: io.TextIOBase) -> None:
    """One JSON object per line: a header, then one record per node.

    Node records hold ``node``, ``frame`` (1-based), ``neighbors`` and the
    matching similarity ``weights``.
    """
    header = {
        "kind": "stgt-graph",
        "version": 1,
        "nodes": g.node_count,
        "frames": g.frames,
        "tokens_per_frame": g.tokens_per_frame,
        "threshold": g.threshold,
        **degree_stats(g),
    }
    out.write(json.dumps(header) + "\n")
    for i in range(g.node_count):
        nb = g.neighbors(i)
        rec = {
            "node": i,
            "frame": i // g.tokens_per_frame + 1,
            "neighbors": nb.tolist(),
            "weights": [float(v) for v in g.weights[i, nb]],
        }
        out.write(json.dumps(rec) + "\n")


def load_graph_dump(lines) -> tuple[dict, list[dict]]:
    it = iter(lines)
    header = json.loads(next(it))
    return header, [json.loads(line) for line in it if line.strip()]
