"""Video-text contrastive loss, cross-similarity alignment loss, and their mix.

Embeddings are assumed L2-normalised; all similarities are plain dot
products of those rows (cosine). Temperature is carried as ``log_tau`` and
clamped to ``[TAU_MIN, TAU_MAX]``; the gradient w.r.t. ``log_tau`` is zero
only strictly outside that range (training projects ``log_tau`` back onto it).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError, DimensionError, log_softmax, masked_softmax

TAU_INIT = 0.07
TAU_MIN = 0.001
TAU_MAX = 0.5
DEFAULT_GAMMA = 5.0
LOG_TAU_BOUNDS = (math.log(TAU_MIN), math.log(TAU_MAX))


@dataclass(frozen=True)
class EmbeddingPair:
    video: np.ndarray  # (B, e)
    text: np.ndarray  # (B, e)
    log_tau: float = math.log(TAU_INIT)

    def __post_init__(self):
        if self.video.ndim != 2 or self.video.shape != self.text.shape:
            raise DimensionError(f"video {self.video.shape} vs text {self.text.shape}")
        if self.video.shape[0] < 1:
            raise DimensionError("batch must hold at least one pair")

    @property
    def tau(self) -> float:
        return clamp_tau(self.log_tau)[0]

    @classmethod
    def from_tau(cls, video, text, tau: float) -> "EmbeddingPair":
        if not tau > 0:
            raise ConfigError(f"temperature must be positive, got {tau}")
        return cls(np.asarray(video), np.asarray(text), math.log(tau))


@dataclass
class LossGrads:
    loss: float
    video: np.ndarray
    text: np.ndarray
    log_tau: float


@dataclass
class LossReport:
    vtc: float
    csal: float
    total: float
    alpha: float
    gamma: float
    tau: float
    p_v2t: np.ndarray
    p_t2v: np.ndarray
    csal_weights: np.ndarray
    grads: LossGrads | None = None
    grad_norms: dict[str, float] = field(default_factory=dict)
    omitted_terms: tuple[str, ...] = ("vtm", "vtg")

    def record(self, step: int) -> dict:
        rec = {
            "step": step,
            "vtc": self.vtc,
            "csal": self.csal,
            "total": self.total,
            "alpha": self.alpha,
            "tau": self.tau,
        }
        rec.update({f"grad_norm.{k}": v for k, v in self.grad_norms.items()})
        return rec


def clamp_tau(log_tau: float) -> tuple[float, bool]:
    """Return ``(tau, free)`` where ``free`` is False outside the allowed range."""
    lo, hi = LOG_TAU_BOUNDS
    clipped = min(max(log_tau, lo), hi)
    return math.exp(clipped), lo <= log_tau <= hi


def _directional_log_probs(pair: EmbeddingPair):
    tau, _ = clamp_tau(pair.log_tau)
    s = pair.video @ pair.text.T
    z_v2t = s / tau
    z_t2v = s.T / tau
    return s, z_v2t, z_t2v, log_softmax(z_v2t), log_softmax(z_t2v)


def _soft_target_loss(pair: EmbeddingPair, targets: np.ndarray) -> tuple[LossGrads, np.ndarray, np.ndarray]:
    """``-(1/2B) sum_ij y_ij [log P_v2t(i,j) + log P_t2v(i,j)]`` and its gradients.

    ``targets`` rows must sum to one; they are constants for differentiation.
    """
    b = pair.video.shape[0]
    _, z1, z2, lp1, lp2 = _directional_log_probs(pair)
    loss = -float(np.sum(targets * (lp1 + lp2))) / (2 * b)
    p1, p2 = np.exp(lp1), np.exp(lp2)
    dz1 = (p1 - targets) / (2 * b)
    dz2 = (p2 - targets) / (2 * b)
    tau, free = clamp_tau(pair.log_tau)
    ds = (dz1 + dz2.T) / tau
    dlog_tau = -float(np.sum(dz1 * z1) + np.sum(dz2 * z2)) if free else 0.0
    grads = LossGrads(loss, ds @ pair.text, ds.T @ pair.video, dlog_tau)
    return grads, p1, p2


def vtc_loss(pair: EmbeddingPair) -> LossGrads:
    return _soft_target_loss(pair, np.eye(pair.video.shape[0]))[0]


def cross_similarity_logits(s_vv: np.ndarray, s_tt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Products of same-modality similarities and the mask of pairs that survive.

    A pair is excluded when either similarity is <= 0. Excluded entries hold
    ``-inf``. The diagonal is always 1.
    """
    s_vv = np.asarray(s_vv, dtype=np.float64)
    s_tt = np.asarray(s_tt, dtype=np.float64)
    if s_vv.shape != s_tt.shape or s_vv.ndim != 2:
        raise DimensionError(f"s_vv {s_vv.shape} vs s_tt {s_tt.shape}")
    keep = np.minimum(s_vv, s_tt) > 0
    logits = np.where(keep, s_vv * s_tt, -np.inf)
    diag = np.arange(s_vv.shape[0])
    logits[diag, diag] = 1.0
    keep[diag, diag] = True
    return logits, keep


def csal_weights(pair: EmbeddingPair, gamma: float) -> np.ndarray:
    """Row-softmax of ``gamma * S_vt`` over the surviving pairs."""
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    logits, keep = cross_similarity_logits(pair.video @ pair.video.T, pair.text @ pair.text.T)
    return masked_softmax(np.where(keep, gamma * logits, 0.0), keep)


def csal_loss(pair: EmbeddingPair, gamma: float, weights: np.ndarray | None = None) -> LossGrads:
    """Soft-target alignment loss; pass ``weights`` to pin the targets explicitly."""
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    w = csal_weights(pair, gamma) if weights is None else weights
    return _soft_target_loss(pair, w)[0]


def total_loss(
    pair: EmbeddingPair,
    alpha: float,
    gamma: float = DEFAULT_GAMMA,
    allow_fractional_alpha: bool = False,
    weights: np.ndarray | None = None,
) -> LossReport:
    """``alpha * vtc + (1 - alpha) * csal`` with gradients in ``report.grads``.

    Only the stage values 0 and 1 are accepted unless ``allow_fractional_alpha``.
    """
    if alpha not in (0, 1) and not (allow_fractional_alpha and 0 <= alpha <= 1):
        raise ConfigError(f"alpha must be 0 or 1 (got {alpha})")
    b = pair.video.shape[0]
    w = csal_weights(pair, gamma) if weights is None else weights
    vtc, p1, p2 = _soft_target_loss(pair, np.eye(b))
    csal = _soft_target_loss(pair, w)[0]
    if alpha == 1:
        grads = vtc
    elif alpha == 0:
        grads = csal
    else:
        grads = LossGrads(
            alpha * vtc.loss + (1 - alpha) * csal.loss,
            alpha * vtc.video + (1 - alpha) * csal.video,
            alpha * vtc.text + (1 - alpha) * csal.text,
            alpha * vtc.log_tau + (1 - alpha) * csal.log_tau,
        )
    return LossReport(
        vtc=vtc.loss,
        csal=csal.loss,
        total=grads.loss,
        alpha=float(alpha),
        gamma=float(gamma),
        tau=pair.tau,
        p_v2t=p1,
        p_t2v=p2,
        csal_weights=w,
        grads=grads,
    )


def csal_gap_bound(pair: EmbeddingPair, gamma: float) -> float:
    """Upper bound on ``|csal - vtc|`` from the diagonal margin of ``S_vt``.

    With margin ``delta`` (diagonal minus largest surviving off-diagonal entry),
    each row puts at most ``(B-1) exp(-gamma delta)`` weight off the diagonal.
    That gives ``B exp(-gamma delta) C`` with
    ``C = (B-1)/(2B) * max_ij |l_ij - l_ii|``, where ``l`` sums the two
    directional log-probabilities.
    """
    b = pair.video.shape[0]
    if b == 1:
        return 0.0
    logits, keep = cross_similarity_logits(pair.video @ pair.video.T, pair.text @ pair.text.T)
    off = np.where(keep & ~np.eye(b, dtype=bool), logits, -np.inf)
    if not np.isfinite(off).any():
        return 0.0
    delta = 1.0 - float(off.max())
    _, _, _, lp1, lp2 = _directional_log_probs(pair)
    ell = lp1 + lp2
    spread = float(np.max(np.abs(ell - np.diag(ell)[:, None])))
    c = (b - 1) / (2 * b) * spread
    return b * math.exp(-gamma * delta) * c
