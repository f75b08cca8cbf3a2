"""Toy model zoo: an MLP classifier and a tiny pre-LN decoder transformer.

Parameters live in a :class:`ParamSet` (ordered name -> ndarray).  Names
follow ``layer.<i>.attn.{q,k,v,o}`` for attention projections (optional
``.bias`` companions), ``layer.<i>.mlp.*``, ``layer.<i>.ln{1,2}.*``,
``embed.*``, ``ln_f.*`` and ``head.*``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class ModelConfigError(ValueError):
    pass


class ParamSet(dict):
    """Ordered mapping ``name -> ndarray``."""

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self.items())

    def n_elements(self, names: Iterable[str] | None = None) -> int:
        names = self.keys() if names is None else names
        return int(sum(self[n].size for n in names))

    def astype(self, dtype) -> "ParamSet":
        return ParamSet((k, v.astype(dtype)) for k, v in self.items())


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "tiny-transformer"
    hidden: int = 32
    layers: int = 2
    heads: int = 4
    vocab: int = 16
    seq_len: int = 8
    n_out: int = 16
    mlp_ratio: int = 4
    attn_bias: bool = False
    sizes: tuple[int, ...] = (4, 8, 2)
    seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        if self.kind == "mlp":
            if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
                raise ModelConfigError(f"mlp sizes must be >= 1 and at least two layers, got {self.sizes}")
        elif self.kind == "tiny-transformer":
            dims = (self.hidden, self.layers, self.heads, self.vocab, self.seq_len, self.n_out, self.mlp_ratio)
            if any(d < 1 for d in dims):
                raise ModelConfigError("all transformer dims must be >= 1")
            if self.hidden % self.heads:
                raise ModelConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        else:
            raise ModelConfigError(f"unknown model kind {self.kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ModelConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class MLP:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config

    def init_params(self) -> ParamSet:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        p = ParamSet()
        sizes = cfg.sizes
        for i, (a, b) in enumerate(zip(sizes[:-2], sizes[1:-1])):
            p[f"layer.{i}.mlp.weight"] = _normal(rng, (a, b), 1 / math.sqrt(a), dt)
            p[f"layer.{i}.mlp.bias"] = np.zeros(b, dtype=dt)
        a, b = sizes[-2], sizes[-1]
        p["head.weight"] = _normal(rng, (a, b), 1 / math.sqrt(a), dt)
        p["head.bias"] = np.zeros(b, dtype=dt)
        return p

    def logits(self, tape: Tape, params: Mapping[str, np.ndarray], x: np.ndarray) -> Tensor:
        w = tape.bind(params)
        if x.ndim != 2 or x.shape[1] != self.config.sizes[0]:
            raise ad.ShapeError(f"mlp expects inputs (B, {self.config.sizes[0]}), got {x.shape}")
        h = tape.constant(x)
        for i in range(len(self.config.sizes) - 2):
            h = ad.relu(ad.add(ad.matmul(h, w[f"layer.{i}.mlp.weight"]), w[f"layer.{i}.mlp.bias"]))
        return ad.add(ad.matmul(h, w["head.weight"]), w["head.bias"])

    def forward(self, tape: Tape, params, batch) -> Tensor:
        x, y = batch
        return ad.check_finite_loss(ad.cross_entropy(self.logits(tape, params, x), y))


class TinyTransformer:
    """Pre-LN causal transformer; reads the last position for (B,) targets,
    every position for (B, T) targets."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config

    def init_params(self) -> ParamSet:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        d, ff = cfg.hidden, cfg.hidden * cfg.mlp_ratio
        p = ParamSet()
        p["embed.tok"] = _normal(rng, (cfg.vocab, d), 1.0, dt)
        p["embed.pos"] = _normal(rng, (cfg.seq_len, d), 1.0, dt)
        for i in range(cfg.layers):
            pre = f"layer.{i}"
            p[f"{pre}.ln1.gain"] = np.ones(d, dtype=dt)
            p[f"{pre}.ln1.bias"] = np.zeros(d, dtype=dt)
            for proj in "qkvo":
                p[f"{pre}.attn.{proj}"] = _normal(rng, (d, d), 1 / math.sqrt(d), dt)
                if cfg.attn_bias:
                    p[f"{pre}.attn.{proj}.bias"] = np.zeros(d, dtype=dt)
            p[f"{pre}.ln2.gain"] = np.ones(d, dtype=dt)
            p[f"{pre}.ln2.bias"] = np.zeros(d, dtype=dt)
            p[f"{pre}.mlp.fc1"] = _normal(rng, (d, ff), 1 / math.sqrt(d), dt)
            p[f"{pre}.mlp.fc1.bias"] = np.zeros(ff, dtype=dt)
            p[f"{pre}.mlp.fc2"] = _normal(rng, (ff, d), 1 / math.sqrt(ff), dt)
            p[f"{pre}.mlp.fc2.bias"] = np.zeros(d, dtype=dt)
        p["ln_f.gain"] = np.ones(d, dtype=dt)
        p["ln_f.bias"] = np.zeros(d, dtype=dt)
        p["head.weight"] = _normal(rng, (d, cfg.n_out), 1 / math.sqrt(d), dt)
        p["head.bias"] = np.zeros(cfg.n_out, dtype=dt)
        return p

    def _proj(self, w, pre: str, proj: str, h: Tensor) -> Tensor:
        out = ad.matmul(h, w[f"{pre}.attn.{proj}"])
        bias = w.get(f"{pre}.attn.{proj}.bias")
        return out if bias is None else ad.add(out, bias)

    def hidden_states(self, tape: Tape, params, tokens: np.ndarray) -> Tensor:
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] > cfg.seq_len:
            raise ad.ShapeError(f"tokens must be (B, T<= {cfg.seq_len}), got {tokens.shape}")
        B, T = tokens.shape
        d, H = cfg.hidden, cfg.heads
        dh = d // H
        w = tape.bind(params)
        x = ad.add(ad.embedding(w["embed.tok"], tokens), ad.embedding(w["embed.pos"], np.arange(T)))
        causal = np.tril(np.ones((T, T), dtype=bool))
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.layers):
            pre = f"layer.{i}"
            h = ad.layer_norm(x, w[f"{pre}.ln1.gain"], w[f"{pre}.ln1.bias"])
            h = ad.reshape(h, (B * T, d))

            def heads(t: Tensor) -> Tensor:
                return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

            q = heads(self._proj(w, pre, "q", h))
            k = heads(self._proj(w, pre, "k", h))
            v = heads(self._proj(w, pre, "v", h))
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
            att = ad.softmax(scores, mask=causal)
            ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B * T, d))
            x = ad.add(x, ad.reshape(self._proj(w, pre, "o", ctx), (B, T, d)))

            h = ad.reshape(ad.layer_norm(x, w[f"{pre}.ln2.gain"], w[f"{pre}.ln2.bias"]), (B * T, d))
            h = ad.gelu(ad.add(ad.matmul(h, w[f"{pre}.mlp.fc1"]), w[f"{pre}.mlp.fc1.bias"]))
            h = ad.add(ad.matmul(h, w[f"{pre}.mlp.fc2"]), w[f"{pre}.mlp.fc2.bias"])
            x = ad.add(x, ad.reshape(h, (B, T, d)))
        return ad.layer_norm(x, w["ln_f.gain"], w["ln_f.bias"])

    def logits(self, tape: Tape, params, tokens: np.ndarray, last_only: bool = False) -> Tensor:
        x = self.hidden_states(tape, params, tokens)
        B, T, d = x.shape
        w = tape.bind({k: params[k] for k in ("head.weight", "head.bias")})
        if last_only:
            x = ad.take(x, (slice(None), T - 1, slice(None)))
            return ad.add(ad.matmul(x, w["head.weight"]), w["head.bias"])
        out = ad.add(ad.matmul(ad.reshape(x, (B * T, d)), w["head.weight"]), w["head.bias"])
        return ad.reshape(out, (B, T, self.config.n_out))

    def forward(self, tape: Tape, params, batch) -> Tensor:
        tokens, targets = batch
        targets = np.asarray(targets)
        if targets.ndim == 1:
            logits = self.logits(tape, params, tokens, last_only=True)
            loss = ad.cross_entropy(logits, targets)
        else:
            logits = self.logits(tape, params, tokens)
            B, T, C = logits.shape
            if targets.shape != (B, T):
                raise ad.ShapeError(f"targets {targets.shape} do not match tokens {(B, T)}")
            loss = ad.cross_entropy(ad.reshape(logits, (B * T, C)), targets.reshape(-1))
        return ad.check_finite_loss(loss)


def make_model(config: ModelConfig):
    config.validate()
    return MLP(config) if config.kind == "mlp" else TinyTransformer(config)


def build_model(config: ModelConfig) -> ParamSet:
    """Deterministically initialized parameters for ``config``."""
    return make_model(config).init_params()


def transformer_param_count(config: ModelConfig) -> int:
    d, L, V, T, C = config.hidden, config.layers, config.vocab, config.seq_len, config.n_out
    ff = d * config.mlp_ratio
    attn = 4 * d * d + (4 * d if config.attn_bias else 0)
    per_layer = attn + 4 * d + (d * ff + ff) + (ff * d + d)
    return V * d + T * d + L * per_layer + 2 * d + d * C + C


# ----------------------------------------------------------------------
# evaluation helpers (forward-only, nothing recorded)

def _frozen_tape(params) -> Tape:
    first = next(iter(params.values()))
    return Tape(first.dtype, trainable=())


def eval_loss(model, params, batch) -> float:
    """Mean loss of ``batch`` with nothing differentiable recorded."""
    tape = _frozen_tape(params)
    x, y = batch
    if isinstance(model, MLP):
        logits = model.logits(tape, params, x)
        return float(ad.cross_entropy(logits, y).data)
    y = np.asarray(y)
    if y.ndim == 1:
        return float(ad.cross_entropy(model.logits(tape, params, x, last_only=True), y).data)
    logits = model.logits(tape, params, x)
    B, T, C = logits.shape
    return float(ad.cross_entropy(ad.reshape(logits, (B * T, C)), y.reshape(-1)).data)


def predict(model, params, x) -> np.ndarray:
    tape = _frozen_tape(params)
    if isinstance(model, MLP):
        return model.logits(tape, params, x).data.argmax(axis=-1)
    return model.logits(tape, params, x, last_only=True).data.argmax(axis=-1)


# ----------------------------------------------------------------------
# module filters

FILTERS = ("V", "QV", "QKV", "QKVO", "ALL-ATTN", "ALL", "HEAD-ONLY")
_PROJ = {"V": "v", "QV": "qv", "QKV": "qkv", "QKVO": "qkvo"}
_ATTN_RE = re.compile(r"^layer\.\d+\.attn\.([qkvo])(\.bias)?$")


def select_trainable(params: Mapping[str, np.ndarray], module_filter: str) -> list[str]:
    """Sorted parameter names picked by ``module_filter``.

    ``ALL`` is every non-head tensor (layer norms included; they are trained
    dense, see :func:`is_dense_only`).  ``HEAD-ONLY`` is the classifier.
    """
    f = module_filter.upper()
    if f not in FILTERS:
        raise ValueError(f"unknown module filter {module_filter!r}; expected one of {FILTERS}")
    names = list(params)
    if f in _PROJ:
        keep = [n for n in names if (m := _ATTN_RE.match(n)) and m.group(1) in _PROJ[f]]
    elif f == "ALL-ATTN":
        keep = [n for n in names if ".attn." in n]
    elif f == "ALL":
        keep = [n for n in names if not n.startswith("head.")]
    else:
        keep = [n for n in names if n.startswith("head.")]
    return sorted(keep)


def is_dense_only(name: str) -> bool:
    """Classifier and layer-norm tensors are never masked."""
    return name.startswith("head.") or name.startswith("ln_f.") or ".ln1." in name or ".ln2." in name
