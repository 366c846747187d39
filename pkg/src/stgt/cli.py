"""Command-line front end.

Every subcommand resolves a :class:`RunConfig` from ``--config`` (JSON), the
``STGT_SEED`` / ``STGT_OUT_DIR`` environment variables and ``--set key=value``
flags, in that order, before doing any work.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 tolerance breach.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .experiments import ablation_summary, run_ablation, run_bench, run_experiment, run_gradcheck, retrieval_rows, training_reports
from .graph import dump_graph
from .io import atomic_write_text, to_table, write_report
from .numerics import ConfigError, OracleError
from .pipeline import (
    DegenerateEmbeddingError,
    Model,
    TrainingAborted,
    block_config,
    gen_corpus,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .stgt_block import STGTParams, stgt_single

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_TOLERANCE = 4


class ToleranceBreach(RuntimeError):
    """A check ran to completion but missed its tolerance."""


def resolve_config(args, env=None) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        overrides[key.strip()] = config_mod.coerce_flag(key.strip(), text.strip())
    if getattr(args, "out_dir", None):
        overrides["out_dir"] = args.out_dir
    return config_mod.load(args.config, overrides, env)


def _out_dir(cfg: RunConfig) -> str:
    return cfg.out_dir or "runs"


def _emit(cfg: RunConfig, name: str, rows: list[dict], extra: dict | None = None, quiet=False) -> dict:
    paths = write_report(_out_dir(cfg), name, rows, cfg.to_dict(), extra)
    if not quiet:
        print(to_table(rows), end="")
        print(f"wrote {paths['csv']}")
    return paths


def _params_for(cfg: RunConfig, checkpoint: str | None):
    if checkpoint:
        return load_checkpoint(checkpoint).params
    return init_params(cfg)


# --- subcommands ----------------------------------------------------------


def corpus_manifest(cfg: RunConfig) -> dict:
    """Seed + config plus a digest and shapes per split; the arrays themselves are regenerated on load."""
    splits = {}
    for split in ("train", "test"):
        c = gen_corpus(cfg, split)
        h = hashlib.sha256()
        for arr in (c.latents, c.video_patches, c.text_features):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        splits[split] = {
            "count": len(c),
            "sha256": h.hexdigest(),
            "video_patches": list(c.video_patches.shape),
            "text_features": list(c.text_features.shape),
        }
    return {"kind": "stgt-corpus", "version": 1, "seed": cfg.seed, "config": cfg.to_dict(), "splits": splits}


def cmd_gen_data(cfg: RunConfig, args) -> int:
    manifest = corpus_manifest(cfg)
    path = os.path.join(_out_dir(cfg), "corpus.json")
    atomic_write_text(path, json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    for split, info in manifest["splits"].items():
        print(f"{split}: {info['count']} items sha256={info['sha256'][:16]}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    start = load_checkpoint(args.resume) if args.resume else None
    try:
        result = train(cfg, start=start, checkpoint_dir=out)
    except TrainingAborted as exc:
        save_checkpoint(exc.checkpoint, os.path.join(out, "aborted.ckpt"))
        raise
    reports = training_reports(cfg, result)
    _emit(cfg, "loss_curve", reports["loss_curve"], quiet=True)
    _emit(cfg, "retrieval", reports["retrieval"])
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    params = _params_for(cfg, args.checkpoint)
    model = Model(cfg)
    rows = []
    for split in args.split:
        rows += retrieval_rows(model, params, cfg, split, args.threshold)
    _emit(cfg, "eval", rows)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    report = run_gradcheck(cfg, seeds=tuple(range(args.seeds)))
    _emit(cfg, "gradcheck", report.rows, {"tolerance": report.tolerance, "precision": report.precision})
    if cfg.precision != "float64":
        print(f"reduced-precision mode ({cfg.precision}): tolerance relaxed to {report.tolerance}")
    if not report.passed:
        raise ToleranceBreach("gradient check failed for " + ", ".join(report.failures))
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    rows = run_bench(cfg, repeats=args.repeats)
    _emit(cfg, "bench", rows)
    bad = [r["threshold"] for r in rows if not r["flops_ok"]]
    if bad:
        raise ToleranceBreach(f"sparse FLOPs exceed dense FLOPs at thresholds {bad}")
    return EXIT_OK


def _item_tokens(cfg: RunConfig, params, split: str, item: int):
    corpus = gen_corpus(cfg, split)
    if not 0 <= item < len(corpus):
        raise ConfigError(f"item {item} outside corpus of {len(corpus)}")
    model = Model(cfg)
    tokens = model.assemble(model.raw_tokens(corpus.video_patches[item : item + 1]), params)[0]
    return model, tokens


def _dump_single(cfg: RunConfig, args):
    params = _params_for(cfg, args.checkpoint)
    model, tokens = _item_tokens(cfg, params, args.split, args.item)
    thr = cfg.threshold_eval if args.threshold is None else args.threshold
    bcfg = block_config(cfg, thr)
    block = STGTParams(params, cfg.heads, "stgt0.")  # first block only
    return stgt_single(tokens, block, bcfg, return_records=True)


def cmd_dump_graph(cfg: RunConfig, args) -> int:
    _, g, _ = _dump_single(cfg, args)
    buf = io.StringIO()
    dump_graph(g, buf)
    path = os.path.join(_out_dir(cfg), f"graph_item{args.item}.jsonl")
    atomic_write_text(path, buf.getvalue())
    print(buf.getvalue().splitlines()[0])
    print(f"wrote {path}")
    return EXIT_OK


def cmd_dump_attention(cfg: RunConfig, args) -> int:
    _, g, records = _dump_single(cfg, args)
    header = {
        "kind": "stgt-attention",
        "version": 1,
        "item": args.item,
        "heads": cfg.heads,
        "nodes": g.node_count,
        "threshold": g.threshold,
        "config": cfg.to_dict(),
    }
    lines = [json.dumps(header)] + [json.dumps(r) for r in records]
    path = os.path.join(_out_dir(cfg), f"attention_item{args.item}.jsonl")
    atomic_write_text(path, "\n".join(lines) + "\n")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_experiment(cfg: RunConfig, args) -> int:
    bundle = run_experiment(cfg)
    _emit(cfg, "loss_curve", bundle.loss_curve, quiet=True)
    _emit(cfg, "retrieval", bundle.retrieval)
    if bundle.sweeps:
        _emit(cfg, "sweeps", bundle.sweeps)
    if bundle.deltas:
        _emit(cfg, "csal_delta", bundle.deltas)
    return EXIT_OK


def cmd_ablation(cfg: RunConfig, args) -> int:
    rows = run_ablation(cfg, seeds=tuple(range(args.seeds)))
    summary = ablation_summary(rows)
    _emit(cfg, "ablation", rows, {"mean_r_mean": summary})
    print(to_table([{"variant": k, "mean R-Mean": v} for k, v in summary.items()]), end="")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field (repeatable)")
    common.add_argument("--out-dir", help="output directory (overrides config and STGT_OUT_DIR)")

    parser = argparse.ArgumentParser(prog="stgt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "write the seeded synthetic train/test corpora")
    p = add("train", cmd_train, "two-stage training, checkpoints and retrieval report")
    p.add_argument("--resume", help="checkpoint to resume from")
    p = add("eval", cmd_eval, "retrieval metrics for a checkpoint (or the seeded init)")
    p.add_argument("--checkpoint")
    p.add_argument("--split", nargs="+", default=["train", "test"], choices=["train", "test"])
    p.add_argument("--threshold", type=float)
    p = add("gradcheck", cmd_gradcheck, "analytic vs finite-difference gradients")
    p.add_argument("--seeds", type=int, default=1)
    p = add("bench", cmd_bench, "sparse vs dense graph attention over a threshold sweep")
    p.add_argument("--repeats", type=int, default=5)
    for name, fn, help_ in (
        ("dump-graph", cmd_dump_graph, "write one item's spatio-temporal graph as JSON lines"),
        ("dump-attention", cmd_dump_attention, "write one item's per-node graph attention as JSON lines"),
    ):
        p = add(name, fn, help_)
        p.add_argument("--checkpoint")
        p.add_argument("--item", type=int, default=0)
        p.add_argument("--split", default="train", choices=["train", "test"])
        p.add_argument("--threshold", type=float)
    add("experiment", cmd_experiment, "gen-data, train, eval, sweeps and the CSAL delta table")
    p = add("ablation", cmd_ablation, "full vs graph-only vs dense over several seeds")
    p.add_argument("--seeds", type=int, default=5)
    return parser


def main(argv=None, env=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args, env)
        return args.fn(cfg, args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, OracleError, DegenerateEmbeddingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ToleranceBreach as exc:
        print(f"tolerance breach: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
