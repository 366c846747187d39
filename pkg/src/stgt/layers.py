"""Pre-LN transformer pieces with explicit forward caches and backward passes.

All functions broadcast over leading batch axes. Weight gradients are summed
over those axes and returned in a ``{name: array}`` dict keyed by the same
names used to look the weights up.
"""
from __future__ import annotations

import math

import numpy as np

from .numerics import (
    gelu_backward,
    gelu_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_weight_grad,
    masked_softmax,
    softmax,
    softmax_backward,
)

LN_EPS = 1e-5


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, length, d = x.shape
    return np.swapaxes(x.reshape(*lead, length, heads, d // heads), -2, -3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, heads, length, dh = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, length, heads * dh)


def attention_core_forward(q, k, v, heads, keep=None, edge_weights=None):
    """Scaled dot-product attention on projected q, k, v of shape (..., L, d).

    ``keep`` restricts each query's softmax support; ``edge_weights`` scales
    the scaled logits entrywise. Both are (..., L, L) and shared by all heads.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    raw = (qh @ np.swapaxes(kh, -1, -2)) * scale
    logits = raw if edge_weights is None else raw * edge_weights[..., None, :, :]
    if keep is None:
        p = softmax(logits)
    else:
        p = masked_softmax(logits, np.broadcast_to(keep[..., None, :, :], logits.shape))
    out = merge_heads(p @ vh)
    return out, (qh, kh, vh, raw, p, scale, edge_weights)


def attention_core_backward(dout, cache, heads):
    qh, kh, vh, raw, p, scale, edge_weights = cache
    do = split_heads(dout, heads)
    dp = do @ np.swapaxes(vh, -1, -2)
    dvh = np.swapaxes(p, -1, -2) @ do
    dlogits = softmax_backward(dp, p)
    dweights = None
    if edge_weights is not None:
        dweights = np.sum(dlogits * raw, axis=-3)
        dlogits = dlogits * edge_weights[..., None, :, :]
    draw = dlogits * scale
    dqh = draw @ kh
    dkh = np.swapaxes(draw, -1, -2) @ qh
    return merge_heads(dqh), merge_heads(dkh), merge_heads(dvh), dweights


def msa_forward(x, params, prefix, heads):
    wq, wk, wv, wo = (params[prefix + n] for n in ("wq", "wk", "wv", "wo"))
    q, k, v = x @ wq, x @ wk, x @ wv
    attn, core = attention_core_forward(q, k, v, heads)
    return attn @ wo, (x, attn, core)


def msa_backward(dy, cache, params, prefix, heads):
    x, attn, core = cache
    wq, wk, wv, wo = (params[prefix + n] for n in ("wq", "wk", "wv", "wo"))
    grads = {prefix + "wo": linear_weight_grad(attn, dy)}
    dq, dk, dv, _ = attention_core_backward(dy @ wo.T, core, heads)
    grads[prefix + "wq"] = linear_weight_grad(x, dq)
    grads[prefix + "wk"] = linear_weight_grad(x, dk)
    grads[prefix + "wv"] = linear_weight_grad(x, dv)
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, grads


def mlp_forward(x, params, prefix):
    h = x @ params[prefix + "w1"] + params[prefix + "b1"]
    a, gcache = gelu_forward(h)
    return a @ params[prefix + "w2"] + params[prefix + "b2"], (x, a, gcache)


def mlp_backward(dy, cache, params, prefix):
    x, a, gcache = cache
    d = dy.shape[-1]
    grads = {
        prefix + "w2": linear_weight_grad(a, dy),
        prefix + "b2": dy.reshape(-1, d).sum(axis=0),
    }
    dh = gelu_backward(dy @ params[prefix + "w2"].T, gcache)
    grads[prefix + "w1"] = linear_weight_grad(x, dh)
    grads[prefix + "b1"] = dh.reshape(-1, dh.shape[-1]).sum(axis=0)
    return dh @ params[prefix + "w1"].T, grads


def block_forward(x, params, prefix, heads):
    """``x' = MSA(LN(x)) + x``; ``x'' = MLP(LN(x')) + x'``."""
    n1, c1 = layer_norm_forward(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"], LN_EPS)
    a, ca = msa_forward(n1, params, prefix + "attn.", heads)
    x1 = x + a
    n2, c2 = layer_norm_forward(x1, params[prefix + "ln2.g"], params[prefix + "ln2.b"], LN_EPS)
    mo, cm = mlp_forward(n2, params, prefix + "mlp.")
    return x1 + mo, (c1, ca, c2, cm)


def block_backward(dy, cache, params, prefix, heads):
    c1, ca, c2, cm = cache
    grads = {}
    dn2, g = mlp_backward(dy, cm, params, prefix + "mlp.")
    grads.update(g)
    dx1_ln, grads[prefix + "ln2.g"], grads[prefix + "ln2.b"] = layer_norm_backward(dn2, c2)
    dx1 = dy + dx1_ln
    dn1, g = msa_backward(dx1, ca, params, prefix + "attn.", heads)
    grads.update(g)
    dx_ln, grads[prefix + "ln1.g"], grads[prefix + "ln1.b"] = layer_norm_backward(dn1, c1)
    return dx1 + dx_ln, grads


def block_segments(prefix: str, d: int, mlp_ratio: int = 2) -> list[tuple[str, tuple[int, ...]]]:
    hidden = mlp_ratio * d
    return [
        (prefix + "ln1.g", (d,)),
        (prefix + "ln1.b", (d,)),
        (prefix + "attn.wq", (d, d)),
        (prefix + "attn.wk", (d, d)),
        (prefix + "attn.wv", (d, d)),
        (prefix + "attn.wo", (d, d)),
        (prefix + "ln2.g", (d,)),
        (prefix + "ln2.b", (d,)),
        (prefix + "mlp.w1", (d, hidden)),
        (prefix + "mlp.b1", (hidden,)),
        (prefix + "mlp.w2", (hidden, d)),
        (prefix + "mlp.b2", (d,)),
    ]


def init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Default initialisation keyed on the segment name suffix."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b") and len(shape) == 1:
        return np.zeros(shape)
    if len(shape) == 2:
        return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    return rng.normal(0.0, 0.02, size=shape)
