"""Acceptance criteria 1-9; each test prints one PASS/FAIL line in the run summary."""
import itertools
import math
import os
import time

import numpy as np
import pytest

from stgt.config import RunConfig
from stgt.experiments import ablation_summary, run_ablation, run_bench, run_gradcheck, training_reports
from stgt.graph import build_adjacency, build_graph, temporal_mask, token_similarity
from stgt.io import write_report
from stgt.losses import EmbeddingPair, cross_similarity_logits, csal_loss, vtc_loss
from stgt.numerics import l2_normalize_rows
from stgt.pipeline import (
    Model,
    evaluate_retrieval,
    gen_corpus,
    init_params,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    train,
)
from stgt.stgt_block import STGTParams, graph_attention, graph_attention_dense

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


@pytest.fixture(scope="module")
def default_run():
    cfg = RunConfig()
    t0 = time.perf_counter()
    result = train(cfg)
    return cfg, result, time.perf_counter() - t0


def test_criterion_1_sparse_dense_equivalence(criterion):
    g = np.random.default_rng(2024)
    worst = 0.0
    t0 = time.perf_counter()
    for trial in range(100):
        m, n, h = int(g.integers(1, 5)), int(g.integers(1, 5)), int(g.integers(1, 3))
        d = h * int(g.integers(1, 16 // h + 1))
        thr = (-1.1, 0.1, 0.5)[trial % 3]
        x = g.normal(size=(m * n * n, d))
        store = {k: g.normal(size=(d, d)) for k in ("ga.wq", "ga.wk", "ga.wv", "ga.wl")}
        graph = build_graph(x, m, thr)
        p = STGTParams(store, h)
        err = float(np.max(np.abs(graph_attention(x, graph, p) - graph_attention_dense(x, graph, p))))
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    criterion["detail"] = f"max abs err {worst:.2e} (< 1e-8), {elapsed:.1f}s"
    assert worst < 1e-8
    assert elapsed < 60


def test_criterion_2_gradient_suite(criterion):
    t0 = time.perf_counter()
    report = run_gradcheck(RunConfig(), seeds=tuple(range(20)))
    elapsed = time.perf_counter() - t0
    worst = {}
    for r in report.rows:
        worst[r["check"]] = max(worst.get(r["check"], 0.0), r["max_rel_err"])
    criterion["detail"] = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (< 1e-4), {elapsed:.0f}s"
    assert report.passed, report.failures
    assert {r["seed"] for r in report.rows} == set(range(20))
    assert elapsed < 300


def diagonal_dominant_pairs(count=20, b=8, e=16):
    """Seeded batches whose cross-similarity diagonal beats every kept off-diagonal entry by >= 0.3."""
    out = []
    for seed in itertools.count():
        g = np.random.default_rng(seed)
        v = l2_normalize_rows(g.normal(size=(b, e)))
        t = l2_normalize_rows(v + 0.3 * g.normal(size=(b, e)))
        pair = EmbeddingPair(v, t)
        logits, keep = cross_similarity_logits(v @ v.T, t @ t.T)
        off = np.where(keep & ~np.eye(b, dtype=bool), logits, -np.inf)
        if np.isfinite(off).any() and 1.0 - off.max() >= 0.3:
            out.append(pair)
        if len(out) == count:
            return out


def test_criterion_3_gamma_limit(criterion):
    worst_gap, worst_ratio = 0.0, math.inf
    for pair in diagonal_dominant_pairs():
        vtc = vtc_loss(pair).loss
        gap50 = abs(csal_loss(pair, 50.0).loss - vtc)
        gap3 = abs(csal_loss(pair, 3.0).loss - vtc)
        worst_gap = max(worst_gap, gap50)
        worst_ratio = min(worst_ratio, gap3 / gap50 if gap50 > 0 else math.inf)
        assert gap50 < 1e-3
        assert gap3 > 0 and gap3 >= 10 * gap50
    criterion["detail"] = f"max |csal50-vtc| {worst_gap:.1e}, min gap3/gap50 {worst_ratio:.0f}"


def test_criterion_4_threshold_monotonicity(criterion):
    g = np.random.default_rng(4)
    m, t = 4, 16
    x = g.normal(size=(m * t, 32))
    w = token_similarity(x)
    mask = temporal_mask(m, t)
    mask_density = mask.mean()
    sweep = np.linspace(-1.5, 1.5, 20)
    dens = [build_adjacency(w, mask, thr).mean() for thr in sweep]
    assert all(a >= b for a, b in zip(dens, dens[1:]))
    for thr, dval in zip(sweep, dens):
        if thr <= -1:
            assert dval == mask_density
        if thr > 1:
            assert dval == 0.0
    assert build_adjacency(w, mask, -1.0).mean() == mask_density
    criterion["detail"] = f"20-point sweep, densities {dens[0]:.3f} -> {dens[-1]:.3f}"


def test_criterion_5_toy_retrieval(criterion, default_run):
    cfg, result, elapsed = default_run
    model = Model(cfg)
    corpus = gen_corpus(cfg)
    v, t = model.embed(corpus, result.params, cfg.threshold_eval)
    res = evaluate_retrieval(v, t)
    v0, t0 = model.embed(corpus, init_params(cfg), cfg.threshold_eval)
    base = evaluate_retrieval(v0, t0)
    criterion["detail"] = (
        f"R@1 t2v {res['t2v'].r_at[1]:.3f} v2t {res['v2t'].r_at[1]:.3f} (>= 0.9); "
        f"untrained {base['t2v'].r_at[1]:.3f}/{base['v2t'].r_at[1]:.3f}; {elapsed:.0f}s"
    )
    assert len(corpus) == 64
    assert res["t2v"].r_at[1] >= 0.9 and res["v2t"].r_at[1] >= 0.9
    # chance is 1/64; 0.1 is more than five binomial standard deviations above it
    assert base["t2v"].r_at[1] < 0.1 and base["v2t"].r_at[1] < 0.1
    assert elapsed < 600


def test_criterion_6_ablation_ordering(criterion):
    rows = run_ablation(RunConfig(), seeds=(0, 1, 2, 3, 4))
    s = ablation_summary(rows)
    criterion["detail"] = f"mean R-Mean full {s['full']:.4f} >= graph_only {s['graph_only']:.4f} >= dense {s['dense']:.4f}"
    assert len({r["seed"] for r in rows}) >= 5
    assert s["full"] >= s["graph_only"] >= s["dense"]


def test_criterion_7_benchmark(criterion):
    cfg = RunConfig(frames=8, grid=8, width=64, precision="float32")
    rows = run_bench(cfg, repeats=5)
    assert cfg.nodes >= 256
    for r in rows:
        if r["density"] < r["mask_density"]:
            assert r["sparse_flops"] < r["dense_flops"]
        if r["density"] <= 0.3:
            assert r["sparse_s"] < r["dense_s"], r
    checked = [r for r in rows if r["density"] <= 0.3]
    assert checked
    criterion["detail"] = f"N={cfg.nodes}; speedups " + ", ".join(
        f"thr {r['threshold']}: {r['speedup']:.1f}x @ density {r['density']:.3f}" for r in rows
    )


def test_criterion_8_determinism(criterion, default_run, tmp_path):
    cfg, result, _ = default_run
    again = train(cfg)
    for name, rows in training_reports(cfg, result).items():
        write_report(str(tmp_path / "a"), name, rows, cfg.to_dict())
    for name, rows in training_reports(cfg, again).items():
        write_report(str(tmp_path / "b"), name, rows, cfg.to_dict())
    for name in ("loss_curve", "retrieval"):
        for ext in ("csv", "txt", "json"):
            a = (tmp_path / "a" / f"{name}.{ext}").read_bytes()
            assert a == (tmp_path / "b" / f"{name}.{ext}").read_bytes()
        with open(os.path.join(GOLDEN, f"{name}.csv"), "rb") as fh:
            assert (tmp_path / "a" / f"{name}.csv").read_bytes() == fh.read(), f"{name} differs from golden"

    path = str(tmp_path / "stage1.ckpt")
    save_checkpoint(result.checkpoints[0], path)
    back = load_checkpoint(path)
    model, corpus = Model(cfg), gen_corpus(cfg)
    r1 = loss_and_grad(model, result.checkpoints[0].params, corpus, cfg.stage2_alpha, cfg.gamma).report
    r2 = loss_and_grad(model, back.params, corpus, cfg.stage2_alpha, cfg.gamma).report
    assert r1.record(0) == r2.record(0)
    resumed = train(cfg, start=back)
    assert resumed.loss_curve == result.loss_curve[cfg.steps_stage1:]
    assert resumed.params.data.tobytes() == result.params.data.tobytes()
    criterion["detail"] = "two runs bitwise equal, golden match, checkpoint resume bitwise"


def brute_force(sim, ks=(1, 5, 10)):
    ranks = []
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        ranks.append(order.index(i) + 1)
    ranks.sort()
    b = len(ranks)
    med = (ranks[(b - 1) // 2] + ranks[b // 2]) / 2
    return {k: sum(r <= k for r in ranks) / b for k in ks}, med


def test_criterion_9_retrieval_metrics(criterion):
    g = np.random.default_rng(9)
    for _ in range(50):
        v, t = g.normal(size=(10, 6)), g.normal(size=(10, 6))
        res = evaluate_retrieval(v, t)
        sim = v @ t.T
        for direction, s in (("v2t", sim), ("t2v", sim.T)):
            r_at, med = brute_force(s)
            assert res[direction].r_at == r_at
            assert res[direction].med_r == med
    criterion["detail"] = "50 batches of B=10 match exactly in both directions"
