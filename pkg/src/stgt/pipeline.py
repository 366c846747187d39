"""Toy video-text aligner: synthetic corpus, stub encoders, two-stage training, retrieval.

The stub encoders are frozen random linear maps standing in for the
pretrained vision and text towers. The learnable parts are the temporal
embeddings, the [CLS] offset, the STGT block(s), the two projection heads and
the log-temperature. Everything lives in one :class:`ParamVector`.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .embeddings import build_spatial_table
from .io import atomic_write_bytes
from .layers import init_value
from .losses import LOG_TAU_BOUNDS, EmbeddingPair, LossReport, csal_weights, total_loss
from .numerics import (
    ConfigError,
    DimensionError,
    ParamVector,
    l2_normalize_backward,
    l2_normalize_forward,
)
from .stgt_block import BlockConfig, stgt_backward, stgt_forward, stgt_segments

log = logging.getLogger(__name__)

SPLITS = {"train": 1, "test": 2}


class DegenerateEmbeddingError(ValueError):
    """An encoder produced an all-zero vector, which has no direction."""


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint", step: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


# --- corpus ---------------------------------------------------------------


@dataclass(frozen=True)
class CorpusItem:
    latent: np.ndarray  # (a,)
    video_patches: np.ndarray  # (m, n, n, p)
    text_features: np.ndarray  # (q,)


@dataclass(frozen=True)
class SyntheticCorpus:
    latents: np.ndarray  # (count, a)
    video_patches: np.ndarray  # (count, m, n, n, p)
    text_features: np.ndarray  # (count, q)
    seed: int
    noise_sigma: float
    split: str = "train"

    def __len__(self) -> int:
        return self.latents.shape[0]

    def __getitem__(self, i: int) -> CorpusItem:
        return CorpusItem(self.latents[i], self.video_patches[i], self.text_features[i])

    @property
    def items(self) -> list[CorpusItem]:
        return [self[i] for i in range(len(self))]

    def subset(self, idx) -> "SyntheticCorpus":
        return SyntheticCorpus(
            self.latents[idx], self.video_patches[idx], self.text_features[idx],
            self.seed, self.noise_sigma, self.split,
        )


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def corpus_maps(cfg: RunConfig) -> dict[str, np.ndarray]:
    """Seed-derived constant maps shared by every split of a corpus."""
    rng = _rng(cfg.seed, 0)
    a, t, p, q = cfg.latent_dim, cfg.grid * cfg.grid, cfg.patch_dim, cfg.text_dim
    return {
        "cell": rng.normal(0.0, 1.0 / math.sqrt(a), size=(t, a, p)),
        "drift": rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, p)),
        "text": rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, q)),
    }


def render_corpus(cfg: RunConfig, maps: dict[str, np.ndarray], z: np.ndarray, rng: np.random.Generator):
    """Patches ``(count, m, n, n, p)`` and texts ``(count, q)`` for latents ``z``.

    Each patch is ``z @ cell_map[c] + (f / (m-1)) * (z @ drift) + noise``; the
    text is ``z @ text_map + noise``.
    """
    count = z.shape[0]
    m, n = cfg.frames, cfg.grid
    ramp = np.arange(m) / max(m - 1, 1)
    cells = np.einsum("ba,tap->btp", z, maps["cell"])
    drift = (z @ maps["drift"])[:, None, :] * ramp[None, :, None]
    patches = cells[:, None, :, :] + drift[:, :, None, :]
    patches = patches + cfg.noise_sigma * rng.normal(size=patches.shape)
    text = z @ maps["text"] + cfg.noise_sigma * rng.normal(size=(count, cfg.text_dim))
    return patches.reshape(count, m, n, n, cfg.patch_dim), text


def gen_corpus(cfg: RunConfig, split: str = "train", count: int | None = None) -> SyntheticCorpus:
    """Regenerate a corpus from ``(seed, config)``; nothing is ever stored.

    Latents are standard normal; see :func:`render_corpus` for the maps.
    """
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    count = cfg.count if count is None else count
    if count < 2:
        raise ConfigError("corpus needs at least two items")
    rng = _rng(cfg.seed, SPLITS[split])
    z = rng.normal(size=(count, cfg.latent_dim))
    patches, text = render_corpus(cfg, corpus_maps(cfg), z, rng)
    return SyntheticCorpus(z, patches, text, cfg.seed, cfg.noise_sigma, split)


# --- model ----------------------------------------------------------------


def block_config(cfg: RunConfig, threshold: float | None = None) -> BlockConfig:
    return BlockConfig(
        frames=cfg.frames,
        grid=cfg.grid,
        heads=cfg.heads,
        depth=cfg.depth,
        threshold=cfg.threshold_train if threshold is None else threshold,
        local_attention=cfg.local_attention,
        use_edge_weights=cfg.use_edge_weights,
        local_residual=cfg.local_residual,
        normalize_similarity=cfg.normalize_similarity,
    )


def param_layout(cfg: RunConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.width
    segs = [("temporal", (cfg.frames, d)), ("cls", (d,))]
    for layer in range(cfg.depth):
        segs += stgt_segments(f"stgt{layer}.", d, cfg.heads, cfg.mlp_ratio)
    segs += [
        ("proj_v.w", (d, cfg.embed_dim)),
        ("proj_v.b", (cfg.embed_dim,)),
        ("proj_t.w", (cfg.text_dim, cfg.embed_dim)),
        ("log_tau", ()),
    ]
    return segs


def init_params(cfg: RunConfig) -> ParamVector:
    rng = _rng(cfg.seed if cfg.init_seed is None else cfg.init_seed, 7)
    named = []
    for name, shape in param_layout(cfg):
        if name == "log_tau":
            value = np.array(math.log(cfg.tau_init))
        elif name in ("temporal", "cls"):
            value = rng.normal(0.0, 0.02, size=shape)
        else:
            value = init_value(name, shape, rng)
        named.append((name, value))
    return ParamVector.from_arrays(named)


@dataclass(frozen=True)
class StubEncoders:
    """Frozen patch-embedding map standing in for the vision backbone."""

    patch_map: np.ndarray  # (p, d)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "StubEncoders":
        rng = _rng(cfg.seed, 3)
        return cls(rng.normal(0.0, 1.0 / math.sqrt(cfg.patch_dim), size=(cfg.patch_dim, cfg.width)))


@dataclass
class Model:
    cfg: RunConfig
    stubs: StubEncoders = field(init=False)
    spatial: np.ndarray = field(init=False)

    def __post_init__(self):
        self.stubs = StubEncoders.from_config(self.cfg)
        self.spatial = build_spatial_table(self.cfg.grid, self.cfg.width).table

    # frozen vision stub: local tokens are patch embeddings, [CLS] is their mean
    def raw_tokens(self, patches: np.ndarray) -> np.ndarray:
        b, m, n, _, p = patches.shape
        if (m, n, p) != (self.cfg.frames, self.cfg.grid, self.cfg.patch_dim):
            raise ConfigError(f"video patches {patches.shape} do not match config")
        local = patches.reshape(b, m, n * n, p) @ self.stubs.patch_map
        cls = local.mean(axis=2, keepdims=True)
        return np.concatenate([cls, local], axis=2)

    def assemble(self, raw: np.ndarray, params: ParamVector) -> np.ndarray:
        tokens = raw + params["temporal"][None, :, None, :]
        tokens[:, :, 0] += params["cls"]
        tokens[:, :, 1:] += self.spatial
        return tokens

    def encode_video(self, patches, params, threshold=None, adjacency=None):
        """Unit-norm video embeddings ``(B, e)`` plus a cache for :meth:`video_backward`."""
        tokens = self.assemble(self.raw_tokens(patches), params)
        bcfg = block_config(self.cfg, threshold)
        out = stgt_forward(tokens, params, bcfg, adjacency=adjacency)
        pooled = out.fused_tokens.mean(axis=(1, 2))
        h = pooled @ params["proj_v.w"] + params["proj_v.b"]
        _check_nonzero(h, "video")
        v, ncache = l2_normalize_forward(h)
        return v, (out, pooled, ncache, bcfg)

    def video_backward(self, dv, cache, params) -> dict[str, np.ndarray]:
        out, pooled, ncache, bcfg = cache
        dh = l2_normalize_backward(dv, ncache)
        grads = {"proj_v.w": pooled.T @ dh, "proj_v.b": dh.sum(axis=0)}
        dpooled = dh @ params["proj_v.w"].T
        shape = out.fused_tokens.shape
        dsampled = np.broadcast_to(dpooled[:, None, None, :] / (shape[1] * shape[2]), shape)
        dtokens, g = stgt_backward(np.ascontiguousarray(dsampled), out, params, bcfg)
        grads.update(g)
        grads["temporal"] = dtokens.sum(axis=(0, 2))
        grads["cls"] = dtokens[:, :, 0].sum(axis=(0, 1))
        return grads

    def encode_text(self, text, params):
        if text.shape[-1] != self.cfg.text_dim:
            raise ConfigError(f"text features {text.shape} do not match text_dim")
        u = text @ params["proj_t.w"]
        _check_nonzero(u, "text")
        t, ncache = l2_normalize_forward(u)
        return t, (text, ncache)

    def text_backward(self, dt, cache):
        text, ncache = cache
        return {"proj_t.w": text.T @ l2_normalize_backward(dt, ncache)}

    def embed(self, corpus: SyntheticCorpus, params: ParamVector, threshold=None):
        v, _ = self.encode_video(corpus.video_patches, params, threshold)
        t, _ = self.encode_text(corpus.text_features, params)
        return v, t


def _check_nonzero(x, which):
    if np.any(~np.any(x != 0, axis=-1)):
        raise DegenerateEmbeddingError(f"{which} encoder produced an all-zero embedding")


def encode_video(item: CorpusItem, model: Model, params: ParamVector, threshold=None) -> np.ndarray:
    return model.encode_video(item.video_patches[None], params, threshold)[0][0]


def encode_text(item: CorpusItem, model: Model, params: ParamVector) -> np.ndarray:
    return model.encode_text(item.text_features[None], params)[0][0]


@dataclass
class StepResult:
    report: LossReport
    grad: np.ndarray
    weights: np.ndarray
    adjacency: list[np.ndarray]


def loss_and_grad(
    model: Model,
    params: ParamVector,
    batch: SyntheticCorpus,
    alpha: float,
    gamma: float,
    weights: np.ndarray | None = None,
    adjacency: list[np.ndarray] | None = None,
) -> StepResult:
    """Full encode -> total loss composition with its analytic gradient.

    ``weights`` pins the cross-similarity targets and ``adjacency`` pins the
    graph topology; by default both are computed from ``params``.
    """
    cfg = model.cfg
    v, vcache = model.encode_video(batch.video_patches, params, adjacency=adjacency)
    t, tcache = model.encode_text(batch.text_features, params)
    pair = EmbeddingPair(v, t, float(params["log_tau"]))
    if weights is None:
        weights = csal_weights(pair, gamma)
    report = total_loss(pair, alpha, gamma, cfg.allow_fractional_alpha, weights=weights)
    g = report.grads
    grads = model.video_backward(g.video, vcache, params)
    grads.update(model.text_backward(g.text, tcache))
    grads["log_tau"] = np.array(g.log_tau)
    flat = params.flatten_grads(grads)
    report.grad_norms = _grouped_norms(params, flat)
    return StepResult(report, flat, weights, vcache[0].adjacency)


def _grouped_norms(params: ParamVector, flat: np.ndarray) -> dict[str, float]:
    groups: dict[str, float] = {}
    for seg in params.segments:
        key = seg.name.split(".")[0]
        chunk = flat[seg.offset : seg.offset + seg.length]
        groups[key] = groups.get(key, 0.0) + float(chunk @ chunk)
    return {k: math.sqrt(v) for k, v in groups.items()}


# --- checkpoints --------------------------------------------------------

MAGIC = b"STGTCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: ParamVector
    step: int
    stage: int
    config: dict
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write ``MAGIC | u32 version | u64 header_len | JSON header | f64 LE data``."""
    extra = sorted(ckpt.optimizer_state)
    segments = [
        {"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in ckpt.params.segments
    ]
    offset = ckpt.params.data.size
    for name in extra:
        arr = ckpt.optimizer_state[name]
        segments.append({"name": "opt:" + name, "offset": offset, "shape": list(arr.shape)})
        offset += arr.size
    header = json.dumps(
        {"segments": segments, "step": ckpt.step, "stage": ckpt.stage, "config": ckpt.config},
        sort_keys=True,
    ).encode()
    body = np.concatenate(
        [ckpt.params.data.astype("<f8")] + [ckpt.optimizer_state[n].astype("<f8").ravel() for n in extra]
    )
    atomic_write_bytes(
        path, MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + body.tobytes()
    )


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20 : 20 + hlen])
    data = np.frombuffer(blob[20 + hlen :], dtype="<f8").astype(np.float64)
    named, opt = [], {}
    for seg in header["segments"]:
        size = math.prod(seg["shape"])
        arr = data[seg["offset"] : seg["offset"] + size].reshape(seg["shape"])
        if seg["name"].startswith("opt:"):
            opt[seg["name"][4:]] = arr.copy()
        else:
            named.append((seg["name"], arr))
    return Checkpoint(
        ParamVector.from_arrays(named), header["step"], header["stage"], header["config"], opt
    )


# --- training -----------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamVector
    loss_curve: list[dict]
    checkpoints: list[Checkpoint]


def stage_schedule(cfg: RunConfig) -> list[tuple[int, float, float, int]]:
    """``(stage, alpha, base_lr, steps)`` for each stage."""
    return [
        (1, cfg.stage1_alpha, cfg.lr, cfg.steps_stage1),
        (2, cfg.stage2_alpha, cfg.stage2_lr, cfg.steps_stage2),
    ]


def cosine_lr(base: float, t: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * t / total)) if total > 0 else base


def batch_indices(cfg: RunConfig, step: int) -> np.ndarray:
    if cfg.batch_size is None or cfg.batch_size >= cfg.count:
        return np.arange(cfg.count)
    per_epoch = cfg.count // cfg.batch_size
    epoch, slot = divmod(step, per_epoch)
    order = _rng(cfg.seed, 11, epoch).permutation(cfg.count)
    return np.sort(order[slot * cfg.batch_size : (slot + 1) * cfg.batch_size])


class Optimizer:
    """Plain gradient descent, or AdamW when ``cfg.optimizer == 'adamw'``."""

    def __init__(self, cfg: RunConfig, size: int, state: dict | None = None):
        self.cfg = cfg
        self.state = state or {}
        if cfg.optimizer == "adamw" and not self.state:
            self.state = {"m": np.zeros(size), "v": np.zeros(size), "t": np.zeros(1)}

    def update(self, theta: np.ndarray, grad: np.ndarray, lr: float, decay_mask: np.ndarray) -> np.ndarray:
        if self.cfg.optimizer == "gd":
            return theta - lr * grad
        c, s = self.cfg, self.state
        s["t"] = s["t"] + 1
        t = float(s["t"][0])
        s["m"] = c.beta1 * s["m"] + (1 - c.beta1) * grad
        s["v"] = c.beta2 * s["v"] + (1 - c.beta2) * grad * grad
        mhat = s["m"] / (1 - c.beta1**t)
        vhat = s["v"] / (1 - c.beta2**t)
        theta = theta - lr * c.weight_decay * decay_mask * theta
        return theta - lr * mhat / (np.sqrt(vhat) + 1e-8)


def decay_mask(params: ParamVector) -> np.ndarray:
    mask = np.zeros_like(params.data)
    for seg in params.segments:
        if len(seg.shape) == 2 and seg.name != "temporal":
            mask[seg.offset : seg.offset + seg.length] = 1.0
    return mask


def train_step(model, params, corpus, step, alpha, lr, optimizer):
    batch = corpus.subset(batch_indices(model.cfg, step))
    res = loss_and_grad(model, params, batch, alpha, model.cfg.gamma)
    new = optimizer.update(params.data, res.grad, lr, decay_mask(params))
    tau_at = params.segment("log_tau").offset
    new[tau_at] = min(max(new[tau_at], LOG_TAU_BOUNDS[0]), LOG_TAU_BOUNDS[1])
    return params.with_data(new), res


def train(
    cfg: RunConfig,
    corpus: SyntheticCorpus | None = None,
    params: ParamVector | None = None,
    start: Checkpoint | None = None,
    checkpoint_dir: str | None = None,
) -> TrainResult:
    """Stage 1 at ``stage1_alpha`` then stage 2 at ``stage2_alpha``, cosine-decayed per stage.

    ``start`` resumes from a checkpoint (global step and optimizer state
    included). A non-finite loss raises :class:`TrainingAborted` carrying the
    last good checkpoint.
    """
    model = Model(cfg)
    corpus = gen_corpus(cfg) if corpus is None else corpus
    begin = 0
    if start is not None:
        params, begin = start.params, start.step
    elif params is None:
        params = init_params(cfg)
    opt = Optimizer(cfg, params.data.size, dict(start.optimizer_state) if start else None)
    curve: list[dict] = []
    ckpts: list[Checkpoint] = []
    step = 0
    for stage, alpha, base_lr, steps in stage_schedule(cfg):
        for t in range(steps):
            if step >= begin:
                lr = cosine_lr(base_lr, t, steps)
                new, res = train_step(model, params, corpus, step, alpha, lr, opt)
                rep = res.report
                if not (math.isfinite(rep.total) and np.all(np.isfinite(new.data))):
                    good = Checkpoint(params.copy(), step, stage, cfg.to_dict(), _copy_state(opt))
                    raise TrainingAborted(
                        f"non-finite loss at step {step} (stage {stage}): "
                        f"vtc={rep.vtc} csal={rep.csal} total={rep.total}",
                        good,
                        step,
                    )
                rec = rep.record(step)
                rec["stage"] = stage
                rec["lr"] = lr
                curve.append(rec)
                params = new
            step += 1
        if step >= begin:
            ck = Checkpoint(params.copy(), step, stage, cfg.to_dict(), _copy_state(opt))
            ckpts.append(ck)
            if curve:
                log.info("stage %d done at step %d: total=%.6g tau=%.4g", stage, step, curve[-1]["total"], curve[-1]["tau"])
            if checkpoint_dir:
                save_checkpoint(ck, f"{checkpoint_dir}/stage{stage}.ckpt")
    return TrainResult(params, curve, ckpts)


def _copy_state(opt: Optimizer) -> dict[str, np.ndarray]:
    return {k: np.array(v, copy=True) for k, v in opt.state.items()}


# --- retrieval ------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalResult:
    r_at: dict[int, float]
    med_r: float
    r_mean: float
    ranks: np.ndarray

    def row(self) -> dict:
        out = {f"R@{k}": v for k, v in sorted(self.r_at.items())}
        out.update({"MedR": self.med_r, "R-Mean": self.r_mean})
        return out


def ground_truth_ranks(sim: np.ndarray) -> np.ndarray:
    """1-based rank of candidate ``i`` for query row ``i``; ties go to the lower index."""
    b = sim.shape[0]
    target = np.diag(sim)[:, None]
    better = sim > target
    cols = np.arange(b)
    tied_before = (sim == target) & (cols[None, :] < cols[:, None])
    return 1 + better.sum(axis=1) + tied_before.sum(axis=1)


def summarize_ranks(ranks: np.ndarray, ks=(1, 5, 10)) -> RetrievalResult:
    r_at = {int(k): float(np.mean(ranks <= k)) for k in ks}
    headline = [r_at[k] if k in r_at else float(np.mean(ranks <= k)) for k in (1, 5, 10)]
    return RetrievalResult(r_at, float(np.median(ranks)), float(np.mean(headline)), ranks)


def evaluate_retrieval(video_emb, text_emb, ks=(1, 5, 10)) -> dict[str, RetrievalResult]:
    """Retrieval in both directions: ``t2v`` (text queries) and ``v2t`` (video queries)."""
    video_emb, text_emb = np.asarray(video_emb), np.asarray(text_emb)
    if video_emb.shape[0] != text_emb.shape[0]:
        raise DimensionError(f"{video_emb.shape[0]} videos vs {text_emb.shape[0]} texts")
    sim = video_emb @ text_emb.T
    return {
        "t2v": summarize_ranks(ground_truth_ranks(sim.T), ks),
        "v2t": summarize_ranks(ground_truth_ranks(sim), ks),
    }
