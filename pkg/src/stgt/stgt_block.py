"""Spatio-temporal graph transformer block.

One block does four things. It runs cross-frame attention over the per-frame
[CLS] tokens. It runs graph-masked attention over all local tokens, where the
graph keeps edges inside a frame or between neighbouring frames whose cosine
similarity clears the threshold. It fuses the global and local tokens in one
more transformer block. Finally it max-pools each frame's grid down to
``1 + 2n`` tokens.

The public single-item operations (:func:`cross_frame_attention`,
:func:`graph_attention`, :func:`fuse_global_local`, :func:`maxpool_sample`)
mirror the batched :func:`stgt_forward` / :func:`stgt_backward` pair used
for training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .graph import SpatioTemporalGraph, build_adjacency, temporal_mask, token_similarity
from .layers import (
    attention_core_backward,
    attention_core_forward,
    block_backward,
    block_forward,
    block_segments,
)
from .numerics import (
    ConfigError,
    DimensionError,
    l2_normalize_backward,
    l2_normalize_forward,
    linear_weight_grad,
)


@dataclass(frozen=True)
class STGTParams:
    """View of one block's weights inside a larger parameter store."""

    store: object  # anything indexable by segment name, normally a ParamVector
    heads: int
    prefix: str = ""

    def __getitem__(self, name: str) -> np.ndarray:
        return self.store[self.prefix + name]


def stgt_segments(prefix: str, d: int, heads: int, mlp_ratio: int = 2):
    if d % heads:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    segs = block_segments(prefix + "cf.", d, mlp_ratio)
    segs += [(prefix + "ga." + w, (d, d)) for w in ("wq", "wk", "wv", "wl")]
    segs += block_segments(prefix + "fu.", d, mlp_ratio)
    return segs


# --- single-item operations ---------------------------------------------


def cross_frame_attention(x_g: np.ndarray, params: STGTParams) -> np.ndarray:
    return block_forward(x_g, params.store, params.prefix + "cf.", params.heads)[0]


def fuse_global_local(x_g2: np.ndarray, x_l2: np.ndarray, params: STGTParams) -> np.ndarray:
    x = np.concatenate([x_g2, x_l2], axis=-2)
    return block_forward(x, params.store, params.prefix + "fu.", params.heads)[0]


def _graph_projections(x_l, params):
    return x_l @ params["ga.wq"], x_l @ params["ga.wk"], x_l @ params["ga.wv"]


def graph_attention(
    x_l: np.ndarray,
    g: SpatioTemporalGraph,
    params: STGTParams,
    use_edge_weights: bool = True,
    return_records: bool = False,
):
    """Graph-masked attention evaluated only on graph edges.

    Each kept edge ``(i, j)`` gets logit ``(q_i . k_j / sqrt(d_head)) * W_s[i, j]``.
    The softmax runs over row ``i``'s neighbours. Rows with no neighbours give zeros.
    Neighbour lists are gathered into a max-degree padded layout so scoring and
    aggregation are batched matmuls of cost ``N * max_deg * d``.
    """
    n, d = x_l.shape
    if n != g.node_count:
        raise DimensionError(f"{n} tokens but graph has {g.node_count} nodes")
    h = params.heads
    dh = d // h
    q, k, v = _graph_projections(x_l, params)
    index, valid, weight = g.ell
    width = index.shape[1]
    # (h, n, 1, dh) @ (h, n, dh, width) -> (h, n, width)
    qh = q.reshape(n, h, dh).transpose(1, 0, 2)[:, :, None, :]
    kg = k[index].reshape(n, width, h, dh).transpose(2, 0, 3, 1)
    logits = (qh @ kg)[:, :, 0, :] / math.sqrt(dh)
    if use_edge_weights:
        logits = logits * weight.astype(logits.dtype, copy=False)
    logits = np.where(valid, logits, -np.inf)
    top = logits.max(axis=-1, keepdims=True) if width else np.zeros((h, n, 1))
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(logits - top)
    total = e.sum(axis=-1, keepdims=True)
    probs = e / np.where(total > 0, total, 1.0)
    vg = v[index].reshape(n, width, h, dh).transpose(2, 0, 1, 3)
    out = (probs[:, :, None, :] @ vg)[:, :, 0, :]
    y = out.transpose(1, 0, 2).reshape(n, d).astype(np.result_type(x_l, params["ga.wq"]), copy=False)
    y = y @ params["ga.wl"]
    if not return_records:
        return y
    deg = valid.sum(axis=1)
    records = [
        {
            "node": i,
            "neighbors": index[i, : deg[i]].tolist(),
            "probs": probs[:, i, : deg[i]].tolist(),
        }
        for i in range(n)
    ]
    return y, records


def graph_attention_dense(
    x_l: np.ndarray, g: SpatioTemporalGraph, params: STGTParams, use_edge_weights: bool = True
) -> np.ndarray:
    """Reference path: full N x N logits with an additive -inf mask where A = 0."""
    n, d = x_l.shape
    h = params.heads
    dh = d // h
    q, k, v = _graph_projections(x_l, params)
    qh = q.reshape(n, h, dh).transpose(1, 0, 2)
    kh = k.reshape(n, h, dh).transpose(1, 0, 2)
    vh = v.reshape(n, h, dh).transpose(1, 0, 2)
    logits = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
    if use_edge_weights:
        logits = logits * g.weights
    with np.errstate(invalid="ignore"):
        logits = logits + np.where(g.adjacency, 0.0, -np.inf)
    top = logits.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(top)
    e = np.exp(logits - np.where(empty, 0.0, top))
    total = e.sum(axis=-1, keepdims=True)
    p = np.where(empty, 0.0, e / np.where(empty, 1.0, total))
    out = (p @ vh).transpose(1, 0, 2).reshape(n, d)
    return out @ params["ga.wl"]


def attention_flops(nodes: int, d: int, heads: int, edges: int) -> int:
    """Closed-form cost model: four d x d projections plus a per-edge term.

    Each edge and head costs a dot product (2*dh), the scale and edge-weight
    multiplies (2), max/exp/sum/divide (4) and the weighted value add (2*dh).
    """
    return 8 * nodes * d * d + edges * (4 * d + 6 * heads)


def maxpool_sample(x_l2: np.ndarray, x_g2: np.ndarray) -> np.ndarray:
    """Reduce ``(..., m, n, n, d)`` grids (indexed ``[y, x]``) to ``(..., m, 1+2n, d)``.

    Rows ``1..n`` hold one vector per grid column (max over y), rows
    ``n+1..2n`` one per grid row (max over x).
    """
    return _maxpool_forward(x_l2, x_g2)[0]


def _maxpool_forward(grid, x_g):
    col = grid.max(axis=-3)
    row = grid.max(axis=-2)
    out = np.concatenate([x_g[..., None, :], col, row], axis=-2)
    return out, (grid, np.argmax(grid, axis=-3), np.argmax(grid, axis=-2))


def _maxpool_backward(dout, cache):
    grid, col_idx, row_idx = cache
    n = grid.shape[-2]
    dg = dout[..., 0, :]
    dcol = dout[..., 1 : 1 + n, :]
    drow = dout[..., 1 + n :, :]
    dgrid = np.zeros_like(grid)
    tmp = np.zeros_like(grid)
    np.put_along_axis(tmp, col_idx[..., None, :, :], dcol[..., None, :, :], axis=-3)
    dgrid += tmp
    tmp = np.zeros_like(grid)
    np.put_along_axis(tmp, row_idx[..., :, None, :], drow[..., :, None, :], axis=-2)
    dgrid += tmp
    return dgrid, dg


# --- batched training path ------------------------------------------------


@dataclass(frozen=True)
class BlockConfig:
    frames: int
    grid: int
    heads: int = 2
    depth: int = 1
    threshold: float = 0.1
    local_attention: str = "graph"  # "graph" | "dense"
    use_edge_weights: bool = True
    local_residual: bool = True
    normalize_similarity: bool = True

    def __post_init__(self):
        if self.local_attention not in ("graph", "dense"):
            raise ConfigError(f"unknown local_attention {self.local_attention!r}")

    @property
    def tokens_per_frame(self) -> int:
        return self.grid * self.grid

    @property
    def nodes(self) -> int:
        return self.frames * self.tokens_per_frame


@dataclass
class BlockOutput:
    fused_tokens: np.ndarray  # (B, m, 1+2n, d)
    adjacency: list[np.ndarray] = field(default_factory=list)  # per depth, (B, N, N)
    cache: tuple | None = None


def _similarity_forward(x_l, normalize):
    if not normalize:
        return x_l @ np.swapaxes(x_l, -1, -2), None
    xn, ncache = l2_normalize_forward(x_l)
    w = xn @ np.swapaxes(xn, -1, -2)
    diag = np.arange(x_l.shape[-2])
    nonzero = np.any(x_l != 0, axis=-1)
    w[..., diag, diag] = np.where(nonzero, 1.0, 0.0)
    return w, (xn, ncache)


def _similarity_backward(dw, x_l, cache):
    if cache is None:
        return (dw + np.swapaxes(dw, -1, -2)) @ x_l
    xn, ncache = cache
    dw = dw.copy()
    diag = np.arange(dw.shape[-1])
    dw[..., diag, diag] = 0.0
    dxn = (dw + np.swapaxes(dw, -1, -2)) @ xn
    return l2_normalize_backward(dxn, ncache)


def local_attention_forward(x_l, params: STGTParams, cfg: BlockConfig, adjacency=None):
    """Batched graph (or dense) attention over local tokens; returns (out, adjacency, cache)."""
    q, k, v = _graph_projections(x_l, params)
    if cfg.local_attention == "dense":
        keep = None
        weights, scache = None, None
        adjacency = np.ones(x_l.shape[:-2] + (x_l.shape[-2],) * 2, dtype=bool)
    else:
        weights, scache = _similarity_forward(x_l, cfg.normalize_similarity)
        if adjacency is None:
            mask = temporal_mask(cfg.frames, cfg.tokens_per_frame)
            adjacency = build_adjacency(weights, mask, cfg.threshold)
        keep = adjacency
    edge_w = weights if (weights is not None and cfg.use_edge_weights) else None
    attn, core = attention_core_forward(q, k, v, cfg.heads, keep=keep, edge_weights=edge_w)
    out = attn @ params["ga.wl"]
    if cfg.local_residual:
        out = out + x_l
    return out, adjacency, (x_l, attn, core, scache, edge_w is not None)


def local_attention_backward(dout, cache, params: STGTParams, cfg: BlockConfig):
    x_l, attn, core, scache, weighted = cache
    pre = params.prefix + "ga."
    grads = {pre + "wl": linear_weight_grad(attn, dout)}
    dq, dk, dv, dweights = attention_core_backward(dout @ params["ga.wl"].T, core, cfg.heads)
    grads[pre + "wq"] = linear_weight_grad(x_l, dq)
    grads[pre + "wk"] = linear_weight_grad(x_l, dk)
    grads[pre + "wv"] = linear_weight_grad(x_l, dv)
    dx = dq @ params["ga.wq"].T + dk @ params["ga.wk"].T + dv @ params["ga.wv"].T
    if weighted:
        dx = dx + _similarity_backward(dweights, x_l, scache)
    if cfg.local_residual:
        dx = dx + dout
    return dx, grads


def stgt_forward(tokens, store, cfg: BlockConfig, prefix="stgt", adjacency=None) -> BlockOutput:
    """Batched forward over assembled tokens of shape (B, m, 1+n*n, d)."""
    b, m, per, d = tokens.shape
    if m != cfg.frames or per != 1 + cfg.tokens_per_frame:
        raise DimensionError(f"tokens {tokens.shape} do not match block config {cfg}")
    x_g = tokens[:, :, 0, :]
    x_l = tokens[:, :, 1:, :].reshape(b, cfg.nodes, d)
    caches, adjs = [], []
    for layer in range(cfg.depth):
        p = STGTParams(store, cfg.heads, f"{prefix}{layer}.")
        g2, cg = block_forward(x_g, store, p.prefix + "cf.", cfg.heads)
        given = None if adjacency is None else adjacency[layer]
        l2, adj, cl = local_attention_forward(x_l, p, cfg, given)
        adjs.append(adj)
        fused, cfu = block_forward(np.concatenate([g2, l2], axis=1), store, p.prefix + "fu.", cfg.heads)
        caches.append((cg, cl, cfu))
        x_g, x_l = fused[:, :m], fused[:, m:]
    grid = x_l.reshape(b, m, cfg.grid, cfg.grid, d)
    sampled, mcache = _maxpool_forward(grid, x_g)
    return BlockOutput(sampled, adjs, (caches, mcache))


def stgt_backward(dsampled, out: BlockOutput, store, cfg: BlockConfig, prefix="stgt"):
    """Gradient w.r.t. the assembled tokens plus a dict of weight gradients."""
    caches, mcache = out.cache
    b, m = dsampled.shape[:2]
    dgrid, dx_g = _maxpool_backward(dsampled, mcache)
    dx_l = dgrid.reshape(b, cfg.nodes, -1)
    grads: dict[str, np.ndarray] = {}
    for layer in reversed(range(cfg.depth)):
        p = STGTParams(store, cfg.heads, f"{prefix}{layer}.")
        cg, cl, cfu = caches[layer]
        dfused, g = block_backward(np.concatenate([dx_g, dx_l], axis=1), cfu, store, p.prefix + "fu.", cfg.heads)
        grads.update(g)
        dx_l, g = local_attention_backward(dfused[:, m:], cl, p, cfg)
        grads.update(g)
        dx_g, g = block_backward(dfused[:, :m], cg, store, p.prefix + "cf.", cfg.heads)
        grads.update(g)
    dtokens = np.empty(dsampled.shape[:2] + (1 + cfg.tokens_per_frame, dx_l.shape[-1]))
    dtokens[:, :, 0] = dx_g
    dtokens[:, :, 1:] = dx_l.reshape(b, m, cfg.tokens_per_frame, -1)
    return dtokens, grads


def stgt_single(x_tokens: np.ndarray, params: STGTParams, cfg: BlockConfig, return_records=False):
    """Single-item forward built from the public operations (one block).

    Used as the composition reference for the batched path and by the
    ``dump-attention`` command.
    """
    m = cfg.frames
    x_g = x_tokens[:, 0, :]
    x_l = x_tokens[:, 1:, :].reshape(cfg.nodes, -1)
    g2 = cross_frame_attention(x_g, params)
    if cfg.local_attention == "dense":
        w = np.ones((cfg.nodes, cfg.nodes))
        g = SpatioTemporalGraph(np.ones_like(w, dtype=bool), w, m, cfg.tokens_per_frame, -np.inf)
    else:
        w = token_similarity(x_l, normalize=cfg.normalize_similarity)
        adj = build_adjacency(w, temporal_mask(m, cfg.tokens_per_frame), cfg.threshold)
        g = SpatioTemporalGraph(adj, w, m, cfg.tokens_per_frame, cfg.threshold)
    res = graph_attention(
        x_l, g, params,
        use_edge_weights=cfg.use_edge_weights and cfg.local_attention == "graph",
        return_records=return_records,
    )
    l2, records = res if return_records else (res, None)
    if cfg.local_residual:
        l2 = l2 + x_l
    fused = fuse_global_local(g2, l2, params)
    grid = fused[m:].reshape(m, cfg.grid, cfg.grid, -1)
    sampled = maxpool_sample(grid, fused[:m])
    return (sampled, g, records) if return_records else sampled
