"""Small deterministic tensor kernel shared by every other module.

Activations are plain ``numpy.ndarray`` values. Learnable weights live in a
:class:`ParamVector`, a flat array carved into named segments, so that the
finite-difference oracle can walk every coordinate of a model.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class OracleError(RuntimeError):
    """Raised when the finite-difference oracle hits a non-finite value."""

    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite objective ({value}) at coordinate {index}")
        self.index = index
        self.value = value


def dtype_for(precision: str) -> type:
    if precision == "float64":
        return np.float64
    if precision == "float32":
        return np.float32
    raise ConfigError(f"unknown precision mode {precision!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def masked_softmax(logits: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``keep``.

    Dropped entries come back as exactly 0; rows with nothing kept are all 0.
    """
    logits = np.asarray(logits)
    keep = np.asarray(keep, dtype=bool)
    if logits.shape != keep.shape:
        raise DimensionError(f"logits {logits.shape} vs keep {keep.shape}")
    z = np.where(keep, logits, -np.inf)
    top = np.max(z, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(keep, np.exp(np.where(keep, logits, top) - top), 0.0)
    total = np.sum(e, axis=-1, keepdims=True)
    return e / np.where(total > 0, total, 1.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    top = np.max(logits, axis=-1, keepdims=True)
    z = logits - top
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def layer_norm(x, gain, bias, eps: float = 1e-5):
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_forward(x, gain, bias, eps: float = 1e-5):
    x = np.asarray(x)
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = np.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    lead = dy.reshape(-1, d)
    dgain = np.sum(lead * xhat.reshape(-1, d), axis=0)
    dbias = np.sum(lead, axis=0)
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - np.mean(dxhat, axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    return l2_normalize_forward(x)[0]


def l2_normalize_forward(x):
    x = np.asarray(x)
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    y = x / safe
    return y, (y, safe)


def l2_normalize_backward(dy, cache):
    y, safe = cache
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / safe


def gelu_forward(x):
    inner = GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def linear_weight_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient of ``y = x @ w`` w.r.t. ``w``, summed over all leading axes."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return math.prod(self.shape)


@dataclass
class ParamVector:
    """Flat parameter array with ordered, contiguous named segments."""

    segments: tuple[Segment, ...]
    data: np.ndarray
    _index: dict[str, Segment] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offset = 0
        for seg in self.segments:
            if seg.offset != offset:
                raise DimensionError(f"segment {seg.name} is not contiguous")
            offset += seg.length
        if offset != self.data.size or self.data.ndim != 1:
            raise DimensionError(
                f"segments cover {offset} entries but data has shape {self.data.shape}"
            )
        self._index = {s.name: s for s in self.segments}
        if len(self._index) != len(self.segments):
            raise DimensionError("duplicate segment names")

    @classmethod
    def from_arrays(cls, named: Iterable[tuple[str, np.ndarray]], dtype=np.float64):
        segs, chunks, offset = [], [], 0
        for name, arr in named:
            arr = np.asarray(arr, dtype=dtype)
            segs.append(Segment(name, offset, tuple(arr.shape)))
            chunks.append(arr.ravel())
            offset += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0, dtype=dtype)
        return cls(tuple(segs), data)

    def __getitem__(self, name: str) -> np.ndarray:
        seg = self._index[name]
        return self.data[seg.offset : seg.offset + seg.length].reshape(seg.shape)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def segment(self, name: str) -> Segment:
        return self._index[name]

    def with_data(self, data: np.ndarray) -> "ParamVector":
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise DimensionError(f"expected {self.data.shape}, got {data.shape}")
        return ParamVector(self.segments, data)

    def copy(self) -> "ParamVector":
        return self.with_data(self.data.copy())

    def zeros_like(self) -> "ParamVector":
        return self.with_data(np.zeros_like(self.data))

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Pack a name -> gradient mapping into this vector's layout (missing = 0)."""
        out = np.zeros_like(self.data)
        for name, g in grads.items():
            seg = self._index[name]
            g = np.asarray(g)
            if g.shape != seg.shape:
                raise DimensionError(f"gradient for {name}: {g.shape} != {seg.shape}")
            out[seg.offset : seg.offset + seg.length] = g.ravel()
        return out

    def segment_norms(self, flat: np.ndarray) -> dict[str, float]:
        return {
            s.name: float(np.linalg.norm(flat[s.offset : s.offset + s.length]))
            for s in self.segments
        }


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of ``f`` at ``theta``.

    ``theta`` may be a flat array or a :class:`ParamVector`; ``f`` receives
    the same kind. With ``coords`` only those coordinates are probed and the
    rest of the result is left at zero.
    """
    if eps <= 0:
        raise ConfigError("finite-difference step must be positive")
    as_vector = isinstance(theta, ParamVector)
    base = theta.data if as_vector else np.asarray(theta, dtype=np.float64)
    work = base.astype(np.float64, copy=True)
    wrap = (lambda a: theta.with_data(a)) if as_vector else (lambda a: a)
    grad = np.zeros_like(work)
    idx = range(work.size) if coords is None else coords
    for i in idx:
        keep = work[i]
        work[i] = keep + eps
        hi = float(f(wrap(work.copy())))
        work[i] = keep - eps
        lo = float(f(wrap(work.copy())))
        work[i] = keep
        if not math.isfinite(hi):
            raise OracleError(i, hi)
        if not math.isfinite(lo):
            raise OracleError(i, lo)
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
