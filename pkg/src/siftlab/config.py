"""Flat ``key = value`` run configuration with a closed key set."""
from __future__ import annotations

from typing import Any, Iterable

DEFAULTS: dict[str, Any] = {
    "model.kind": "tiny-transformer",
    "model.hidden": 64,
    "model.layers": 2,
    "model.heads": 4,
    "model.mlp_ratio": 4,
    "model.attn_bias": False,
    "model.dtype": "float64",
    "model.seed": 0,
    "task.kind": "seq-classify",
    "task.seed": 0,
    "task.pretrain_size": 2048,
    "task.finetune_train_size": 512,
    "task.finetune_eval_size": 512,
    "task.vocab": 8,
    "task.seq_len": 6,
    "task.modulus": 97,
    "task.source_pos": 1,
    "task.target_pos": 3,
    "pretrain.steps": 600,
    "pretrain.lr": 3e-3,
    "pretrain.batch_size": 64,
    "pretrain.weight_decay": 0.0,
    "pretrain.order_seed": 0,
    "train.method": "sift",
    "train.filter": "QKVO",
    "train.rate": 0.01,
    "train.granularity": "per-tensor",
    "train.calibration_batches": 1,
    "train.train_head": True,
    "train.lr": 1e-2,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.weight_decay": 0.0,
    "train.schedule": "constant",
    "train.batch_size": 32,
    "train.epochs": 20,
    "train.micro_batches": 1,
    "train.order_seed": 0,
    "train.mask_seed": 0,
    "train.reselect_every": 0,
    "scan.alpha_points": 41,
    "scan.beta_points": 41,
    "scan.direction_seed": 0,
    "scan.eval_size": 256,
    "analysis.grad_batches": 1,
    "analysis.capture_batches": 8,
    "analysis.batch_size": 32,
    "analysis.rate": 0.01,
    "analysis.fractions": "0.001,0.005,0.01,0.05,0.1,0.25,0.5,1.0",
    "analysis.bins": 60,
    "compare.methods": "sift,random,head-only",
    "compare.rates": "0.01",
    "compare.seeds": "0,1,2,3,4",
    "run.threads": 1,
}

SEED_KEYS = tuple(k for k in DEFAULTS if k.endswith("seed"))


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        if isinstance(default, bool) and not isinstance(raw, bool):
            raise ConfigError(f"{key}: expected bool, got {raw!r}")
        if isinstance(default, float) and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if type(raw) is not type(default):
            raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}")
        return raw
    s = raw.strip()
    try:
        if isinstance(default, bool):
            if s.lower() in ("true", "1", "yes"):
                return True
            if s.lower() in ("false", "0", "no"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return s


class RunConfig(dict):
    """Every key of :data:`DEFAULTS`, nothing else."""

    def __init__(self, values: dict[str, Any] | None = None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self[k] = v

    def __setitem__(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        super().__setitem__(key, _coerce(key, value))

    def update(self, other=(), **kw) -> None:
        for k, v in dict(other, **kw).items():
            self[k] = v

    def list_of(self, key: str, cast=float) -> list:
        return [cast(x) for x in str(self[key]).split(",") if x.strip()]

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in sorted(self))


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = (p.strip() for p in line.split("=", 1))
        cfg[k] = v
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg[k.strip()] = v
    return cfg
