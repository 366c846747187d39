"""Run configuration: one flat dataclass, JSON on disk, CLI flags on top."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any

from .numerics import ConfigError

ENV_SEED = "STGT_SEED"
ENV_OUT_DIR = "STGT_OUT_DIR"


@dataclass(frozen=True)
class RunConfig:
    # corpus
    count: int = 64
    latent_dim: int = 8
    frames: int = 4
    grid: int = 4
    patch_dim: int = 12
    text_dim: int = 12
    noise_sigma: float = 0.1
    seed: int = 7
    # model
    width: int = 32
    embed_dim: int = 16
    heads: int = 2
    depth: int = 1
    mlp_ratio: int = 2
    threshold_train: float = 0.1
    threshold_eval: float = 0.5
    local_attention: str = "graph"
    use_edge_weights: bool = True
    local_residual: bool = True
    normalize_similarity: bool = True
    init_seed: int | None = None
    # loss schedule
    gamma: float = 5.0
    tau_init: float = 0.07
    stage1_alpha: float = 1.0
    stage2_alpha: float = 0.0
    allow_fractional_alpha: bool = False
    # optimisation
    steps_stage1: int = 200
    steps_stage2: int = 100
    lr: float = 0.3
    lr_stage2: float | None = None
    batch_size: int | None = None
    optimizer: str = "gd"
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    # evaluation / reporting
    ks: tuple[int, ...] = (1, 5, 10)
    sweep_threshold: tuple[float, ...] = ()
    sweep_gamma: tuple[float, ...] = ()
    precision: str = "float64"
    out_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.count >= 2, "count must be >= 2")
        for name in ("latent_dim", "frames", "grid", "patch_dim", "text_dim", "width", "embed_dim", "heads", "depth", "mlp_ratio"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.width % 4 == 0, "width must be divisible by 4 (2D sinusoidal table)")
        need(self.width % self.heads == 0, "width must be divisible by heads")
        need(self.noise_sigma >= 0, "noise_sigma must be >= 0")
        need(self.gamma > 0, "gamma must be > 0")
        need(self.tau_init > 0, "tau_init must be > 0")
        for a in (self.stage1_alpha, self.stage2_alpha):
            need(a in (0, 1) or (self.allow_fractional_alpha and 0 <= a <= 1),
                 "stage alphas must be 0 or 1 unless allow_fractional_alpha")
        need(self.steps_stage1 >= 0 and self.steps_stage2 >= 0, "stage lengths must be >= 0")
        need(self.lr >= 0, "lr must be >= 0")
        need(self.lr_stage2 is None or self.lr_stage2 >= 0, "lr_stage2 must be >= 0")
        need(self.batch_size is None or 1 <= self.batch_size <= self.count, "batch_size must be in 1..count")
        need(self.optimizer in ("gd", "adamw"), "optimizer must be 'gd' or 'adamw'")
        need(self.local_attention in ("graph", "dense"), "local_attention must be 'graph' or 'dense'")
        need(self.precision in ("float64", "float32"), "precision must be float64 or float32")
        need(len(self.ks) >= 1 and all(k >= 1 for k in self.ks), "ks must be positive")
        need(all(g > 0 for g in self.sweep_gamma), "sweep_gamma values must be > 0")

    @property
    def nodes(self) -> int:
        return self.frames * self.grid * self.grid

    @property
    def stage2_lr(self) -> float:
        return self.lr / 2 if self.lr_stage2 is None else self.lr_stage2

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TUPLE_FIELDS = {"ks": int, "sweep_threshold": float, "sweep_gamma": float}


def from_dict(raw: dict[str, Any]) -> RunConfig:
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    clean = {}
    for key, value in raw.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key} must be a list")
            try:
                clean[key] = tuple(_TUPLE_FIELDS[key](v) for v in value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        else:
            clean[key] = _check_type(key, value)
    try:
        return RunConfig(**clean)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_OPTIONAL = {"lr_stage2": float, "batch_size": int, "init_seed": int, "out_dir": str}


def _check_type(key: str, value: Any) -> Any:
    if value is None and key in _OPTIONAL:
        return None
    default = _FIELDS[key].default
    want = _OPTIONAL.get(key, type(default))
    if want is bool:
        ok = isinstance(value, bool)
    elif want is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif want is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, want)
    if not ok:
        raise ConfigError(f"{key} expects {want.__name__}, got {value!r}")
    return value


def load(path: str | None = None, overrides: dict[str, Any] | None = None, env=None) -> RunConfig:
    """File values, then environment overrides, then explicit overrides (flags win)."""
    env = os.environ if env is None else env
    raw: dict[str, Any] = {}
    if path:
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    if ENV_SEED in env:
        try:
            raw["seed"] = int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer") from exc
    if ENV_OUT_DIR in env:
        raw["out_dir"] = env[ENV_OUT_DIR]
    raw.update(overrides or {})
    return from_dict(raw)


def coerce_flag(name: str, text: str) -> Any:
    """Parse a ``--set key=value`` string using the field's declared type."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    if name in _TUPLE_FIELDS:
        return [v for v in text.split(",") if v.strip()]
    default = _FIELDS[name].default
    if text.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name} expects a boolean, got {text!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{name} expects an integer, got {text!r}") from exc
    if isinstance(default, float) or name in ("lr_stage2",):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{name} expects a number, got {text!r}") from exc
    if name in ("batch_size", "init_seed"):
        return int(text)
    return text

