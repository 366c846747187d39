"""Experiment drivers behind the CLI: gradcheck, bench, train/eval experiments, ablation."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .graph import build_adjacency, degree_stats, temporal_mask, token_similarity, SpatioTemporalGraph
from .losses import EmbeddingPair, csal_loss, csal_weights, vtc_loss
from .numerics import dtype_for, finite_diff_grad, l2_normalize_rows, relative_error
from .pipeline import (
    Model,
    TrainResult,
    evaluate_retrieval,
    gen_corpus,
    init_params,
    loss_and_grad,
    train,
)
from .stgt_block import (
    STGTParams,
    attention_flops,
    graph_attention,
    graph_attention_dense,
)

GRADCHECK_TOL = 1e-4
GRADCHECK_TOL_F32 = 1e-2
BENCH_THRESHOLDS = (-1.1, 0.1, 0.3, 0.5, 0.7)


# --- gradcheck ------------------------------------------------------------


@dataclass
class GradcheckReport:
    rows: list[dict]
    tolerance: float
    precision: str

    @property
    def passed(self) -> bool:
        return all(r["max_rel_err"] < self.tolerance for r in self.rows)

    @property
    def failures(self) -> list[str]:
        return [f"{r['check']}:{r['segment']}" for r in self.rows if r["max_rel_err"] >= self.tolerance]


def gradcheck_config(cfg: RunConfig) -> RunConfig:
    """Shrink a run config to a size where every coordinate can be probed."""
    return cfg.replace(
        count=8, frames=min(cfg.frames, 2), grid=min(cfg.grid, 2), width=8, heads=min(cfg.heads, 2),
        embed_dim=4, patch_dim=3, text_dim=5, latent_dim=3, depth=1, mlp_ratio=2,
    )


def random_pair(rng: np.random.Generator, b: int, e: int, tau: float = 0.07) -> EmbeddingPair:
    v = l2_normalize_rows(rng.normal(size=(b, e)))
    t = l2_normalize_rows(v + 0.5 * rng.normal(size=(b, e)))
    return EmbeddingPair(v, t, math.log(tau))


def _pair_vector(pair: EmbeddingPair) -> np.ndarray:
    return np.concatenate([pair.video.ravel(), pair.text.ravel(), [pair.log_tau]])


def _unpack_pair(theta: np.ndarray, b: int, e: int) -> EmbeddingPair:
    n = b * e
    return EmbeddingPair(theta[:n].reshape(b, e), theta[n : 2 * n].reshape(b, e), float(theta[-1]))


def loss_gradcheck(kind: str, pair: EmbeddingPair, gamma: float, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error of the analytic loss gradient per input block (video/text/log_tau)."""
    b, e = pair.video.shape
    if kind == "vtc":
        g = vtc_loss(pair)
        f = lambda th: vtc_loss(_unpack_pair(th, b, e)).loss
    else:
        w = csal_weights(pair, gamma)
        g = csal_loss(pair, gamma, weights=w)
        f = lambda th: csal_loss(_unpack_pair(th, b, e), gamma, weights=w).loss
    fd = finite_diff_grad(f, _pair_vector(pair), eps)
    err = relative_error(np.concatenate([g.video.ravel(), g.text.ravel(), [g.log_tau]]), fd)
    n = b * e
    return {"video": float(err[:n].max()), "text": float(err[n : 2 * n].max()), "log_tau": float(err[-1])}


def model_gradcheck(cfg: RunConfig, alpha: float, eps: float = 1e-5, params=None) -> dict[str, float]:
    """Max relative error per parameter segment for the encode -> total loss composition.

    Cross-similarity targets and graph topology are pinned at the base point;
    both are piecewise constant in the parameters, with zero derivative
    almost everywhere.
    """
    model = Model(cfg)
    params = init_params(cfg) if params is None else params
    corpus = gen_corpus(cfg)
    base = loss_and_grad(model, params, corpus, alpha, cfg.gamma)

    def f(p):
        return loss_and_grad(
            model, p, corpus, alpha, cfg.gamma, weights=base.weights, adjacency=base.adjacency
        ).report.total

    fd = finite_diff_grad(f, params, eps)
    err = relative_error(base.grad, fd)
    out = {}
    for seg in params.segments:
        out[seg.name] = float(err[seg.offset : seg.offset + seg.length].max())
    return out


def run_gradcheck(cfg: RunConfig, seeds=(0,)) -> GradcheckReport:
    small = gradcheck_config(cfg)
    tol = GRADCHECK_TOL if cfg.precision == "float64" else GRADCHECK_TOL_F32
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        pair = random_pair(rng, 8, 16)
        if cfg.precision == "float32":
            pair = EmbeddingPair(pair.video.astype(np.float32), pair.text.astype(np.float32), pair.log_tau)
        for kind in ("vtc", "csal"):
            for seg, err in loss_gradcheck(kind, pair, cfg.gamma).items():
                rows.append({"seed": seed, "check": kind, "segment": seg, "max_rel_err": err})
        mcfg = small.replace(seed=small.seed + seed)
        for alpha in (1.0, 0.0):
            for seg, err in model_gradcheck(mcfg, alpha).items():
                rows.append({"seed": seed, "check": f"model_alpha{int(alpha)}", "segment": seg, "max_rel_err": err})
    for r in rows:
        r["tolerance"] = tol
        r["precision"] = cfg.precision
        r["pass"] = r["max_rel_err"] < tol
    return GradcheckReport(rows, tol, cfg.precision)


# --- bench ----------------------------------------------------------------


def bench_workload(cfg: RunConfig, seed: int, dtype=np.float32):
    """Seeded local tokens plus graph-attention weights for the benchmark sweep."""
    rng = np.random.default_rng(seed)
    n, d = cfg.nodes, cfg.width
    x = rng.normal(size=(n, d)).astype(dtype)
    store = {name: (rng.normal(size=(d, d)) / math.sqrt(d)).astype(dtype) for name in ("ga.wq", "ga.wk", "ga.wv", "ga.wl")}
    return x, STGTParams(store, cfg.heads)


def _time(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(cfg: RunConfig, thresholds=BENCH_THRESHOLDS, repeats: int = 5, seed: int | None = None) -> list[dict]:
    """Sparse (edge-list) vs dense (-inf masked) graph attention over a threshold sweep."""
    dtype = dtype_for(cfg.precision)
    x, params = bench_workload(cfg, cfg.seed if seed is None else seed, dtype)
    n, d, h = cfg.nodes, cfg.width, cfg.heads
    t = cfg.grid * cfg.grid
    w = token_similarity(x).astype(dtype)
    mask = temporal_mask(cfg.frames, t)
    mask_density = float(mask.sum()) / (n * n)
    rows = []
    for thr in thresholds:
        adj = build_adjacency(w, mask, thr)
        g = SpatioTemporalGraph(adj, w, cfg.frames, t, thr)
        g.csr  # build neighbour lists outside the timed region
        stats = degree_stats(g)
        edges = int(adj.sum())
        sparse_flops = attention_flops(n, d, h, edges)
        dense_flops = attention_flops(n, d, h, n * n)
        banded_flops = attention_flops(n, d, h, int(mask.sum()))
        ts = _time(lambda: graph_attention(x, g, params), repeats)
        td = _time(lambda: graph_attention_dense(x, g, params), repeats)
        rows.append({
            "threshold": thr,
            "nodes": n,
            "density": stats["density"],
            "mask_density": mask_density,
            "mean_degree": stats["mean_degree"],
            "isolated_nodes": stats["isolated_nodes"],
            "sparse_flops": sparse_flops,
            "dense_flops": dense_flops,
            "banded_flops": banded_flops,
            "sparse_s": ts,
            "dense_s": td,
            "speedup": td / ts if ts > 0 else math.inf,
            "flops_ok": sparse_flops <= dense_flops,
        })
    return rows


# --- train / eval experiments ---------------------------------------------


@dataclass
class ExperimentBundle:
    config: dict
    loss_curve: list[dict]
    retrieval: list[dict]
    sweeps: list[dict] = field(default_factory=list)
    deltas: list[dict] = field(default_factory=list)
    result: TrainResult | None = None


def retrieval_rows(model: Model, params, cfg: RunConfig, split: str, threshold: float | None = None, **tags) -> list[dict]:
    corpus = gen_corpus(cfg, split)
    thr = cfg.threshold_eval if threshold is None else threshold
    v, t = model.embed(corpus, params, thr)
    rows = []
    for direction, res in evaluate_retrieval(v, t, cfg.ks).items():
        rows.append({**tags, "split": split, "threshold": thr, "direction": direction, **res.row()})
    return rows


def training_reports(cfg: RunConfig, result: TrainResult) -> dict[str, list[dict]]:
    """Report rows for a finished training run: the loss curve and retrieval on both splits."""
    model = Model(cfg)
    rows = []
    for split in ("train", "test"):
        rows += retrieval_rows(model, result.params, cfg, split)
    return {"loss_curve": result.loss_curve, "retrieval": rows}


def run_experiment(cfg: RunConfig, corpus=None) -> ExperimentBundle:
    """gen-data -> train -> eval, plus optional threshold and gamma sweeps.

    The threshold sweep re-evaluates the trained model at each graph threshold.
    The gamma sweep retrains stage 2 from the stage-1 checkpoint once per value.
    A CSAL-off rerun (stage 2 at alpha=1) gives the delta table.
    """
    model = Model(cfg)
    corpus = gen_corpus(cfg) if corpus is None else corpus
    result = train(cfg, corpus)
    retrieval = training_reports(cfg, result)["retrieval"]
    sweeps = []
    for thr in cfg.sweep_threshold:
        for row in retrieval_rows(model, result.params, cfg, "test", thr, sweep="threshold"):
            sweeps.append(row)
    stage1 = result.checkpoints[0] if result.checkpoints else None
    for gamma in cfg.sweep_gamma:
        gcfg = cfg.replace(gamma=gamma)
        res_g = train(gcfg, corpus, start=stage1)
        for row in retrieval_rows(Model(gcfg), res_g.params, gcfg, "test", sweep="gamma", gamma=gamma):
            sweeps.append(row)
    deltas = []
    if cfg.stage2_alpha != cfg.stage1_alpha and cfg.steps_stage2 > 0 and stage1 is not None:
        off_cfg = cfg.replace(stage2_alpha=cfg.stage1_alpha)
        off = train(off_cfg, corpus, start=stage1)
        base_rows = {(r["split"], r["direction"]): r for r in retrieval}
        for split in ("train", "test"):
            for r in retrieval_rows(model, off.params, off_cfg, split):
                on = base_rows[(split, r["direction"])]
                deltas.append({
                    "split": split,
                    "direction": r["direction"],
                    "r_mean_csal_on": on["R-Mean"],
                    "r_mean_csal_off": r["R-Mean"],
                    "delta": on["R-Mean"] - r["R-Mean"],
                })
    return ExperimentBundle(cfg.to_dict(), result.loss_curve, retrieval, sweeps, deltas, result)


ABLATION_VARIANTS = {
    "full": {"local_attention": "graph", "stage2_alpha": 0.0},
    "graph_only": {"local_attention": "graph", "stage2_alpha": 1.0},
    "dense": {"local_attention": "dense", "stage2_alpha": 1.0},
}


def run_ablation(cfg: RunConfig, seeds=(0, 1, 2, 3, 4), split: str = "test", direction: str = "t2v") -> list[dict]:
    """Final R-Mean per (variant, seed) on the held-out split."""
    rows = []
    for seed in seeds:
        for name, changes in ABLATION_VARIANTS.items():
            vcfg = cfg.replace(seed=seed, **changes)
            res = train(vcfg)
            r = [x for x in retrieval_rows(Model(vcfg), res.params, vcfg, split) if x["direction"] == direction][0]
            rows.append({"variant": name, "seed": seed, **{k: r[k] for k in ("R@1", "R@5", "R@10", "MedR", "R-Mean")}})
    return rows


def ablation_summary(rows: list[dict]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r["R-Mean"])
    return {k: float(np.mean(v)) for k, v in out.items()}
