"""Experiment recipes: pre-train, fine-tune (full / sift / random / head-only),
compare methods over seeds, and gradient/landscape studies at init vs trained."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis, landscape
from .autodiff import NonFiniteLossError, Tape
from .config import RunConfig
from .dense import AdamWConfig, DenseAdamW
from .models import ModelConfig, ParamSet, eval_loss, is_dense_only, make_model, predict, select_trainable
from .sift import (MaskSelection, NonFiniteGradientError, SparseAdamW, accumulate_gradients,
                   calibrate_mask, memory_report, random_mask, run_sparse_step, select_topk)
from .tasks import Dataset, batches, fixed_batches, make_task

log = logging.getLogger(__name__)

METHODS = ("full", "sift", "random", "head-only")


class DivergenceError(ArithmeticError):
    pass


def task_from_config(cfg: RunConfig) -> Dataset:
    sizes = {"pretrain": cfg["task.pretrain_size"], "finetune-train": cfg["task.finetune_train_size"],
             "finetune-eval": cfg["task.finetune_eval_size"]}
    kind = cfg["task.kind"]
    if kind == "modular-arith":
        opts = {"modulus": cfg["task.modulus"]}
    elif kind == "seq-classify":
        opts = {"vocab": cfg["task.vocab"], "seq_len": cfg["task.seq_len"],
                "source_pos": cfg["task.source_pos"], "target_pos": cfg["task.target_pos"]}
    else:
        opts = {"vocab": cfg["task.vocab"], "seq_len": cfg["task.seq_len"]}
    return make_task(kind, cfg["task.seed"], sizes, **opts)


def model_config(cfg: RunConfig, ds: Dataset) -> ModelConfig:
    return ModelConfig(kind="tiny-transformer", hidden=cfg["model.hidden"], layers=cfg["model.layers"],
                       heads=cfg["model.heads"], vocab=ds.vocab, seq_len=ds.seq_len, n_out=ds.n_out,
                       mlp_ratio=cfg["model.mlp_ratio"], attn_bias=cfg["model.attn_bias"],
                       seed=cfg["model.seed"], dtype=cfg["model.dtype"])


def accuracy(model, params, ds: Dataset, split: str = "finetune-eval", batch_size: int = 256) -> float:
    hits = total = 0
    for x, y in fixed_batches(ds, split, batch_size):
        pred = predict(model, params, x)
        y = np.asarray(y)
        if y.ndim == 2:
            y = y[:, -1]
        hits += int(np.sum(pred == y))
        total += len(y)
    return hits / total


def mean_loss(model, params, ds: Dataset, split: str, batch_size: int = 256, limit: int | None = None) -> float:
    fb = fixed_batches(ds, split, batch_size)
    fn = landscape.dataset_loss_fn(model, fb if limit is None else _limit(fb, limit))
    return fn(params)


def _limit(fb, limit):
    out, n = [], 0
    for x, y in fb:
        if n >= limit:
            break
        out.append((x[: limit - n], y[: limit - n]))
        n += len(out[-1][1])
    return out


@dataclass
class PretrainResult:
    model: object
    theta0: ParamSet
    theta1: ParamSet
    dataset: Dataset
    history: list[dict]


def pretrain(cfg: RunConfig, ds: Dataset | None = None) -> PretrainResult:
    """Train every parameter with dense AdamW on the pretrain split; returns (init, trained)."""
    ds = ds or task_from_config(cfg)
    model = make_model(model_config(cfg, ds))
    theta0 = model.init_params()
    params = theta0.copy()
    tape = Tape(params["head.weight"].dtype)
    opt = DenseAdamW(params, list(params), AdamWConfig(lr=cfg["pretrain.lr"],
                                                       weight_decay=cfg["pretrain.weight_decay"]))
    steps = cfg["pretrain.steps"]
    bs = cfg["pretrain.batch_size"]
    history = []
    epoch_stream = batches(ds, "pretrain", bs, cfg["pretrain.order_seed"], epochs=10 ** 6)
    it = iter(epoch_stream)
    running = 0.0
    for step in range(1, steps + 1):
        batch = next(it)
        loss = model.forward(tape, params, batch)
        tape.backward(loss)
        running += float(loss.data)
        opt.step({n: tape.grad(tape.named(n)) for n in params})
        if step % max(1, steps // 10) == 0 or step == steps:
            history.append({"step": step, "train_loss": running / max(1, step - (history[-1]["step"] if history else 0))})
            running = 0.0
    return PretrainResult(model, theta0, params, ds, history)


@dataclass
class FinetuneResult:
    method: str
    params: ParamSet
    metrics: list[dict]
    mask: MaskSelection | None
    optimizer: object
    memory: object
    trainable: int
    masked_names: list[str]
    dense_names: list[str]
    diverged: bool = False
    calibration_grads: dict | None = None

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1]["eval_acc"]

    def increment(self):
        return self.optimizer.increment() if isinstance(self.optimizer, SparseAdamW) else None


def lr_schedule(kind: str, lr: float, total_steps: int):
    """``constant`` or ``linear`` decay to zero over ``total_steps``."""
    if kind == "constant":
        return lambda step: lr
    if kind == "linear":
        return lambda step: lr * (1.0 - step / max(1, total_steps))
    raise ValueError(f"unknown schedule {kind!r}; expected constant or linear")


def _method_names(cfg: RunConfig, params, method: str) -> tuple[list[str], list[str]]:
    """(masked tensor names, dense tensor names) for a method."""
    head = select_trainable(params, "HEAD-ONLY") if cfg["train.train_head"] else []
    if method == "full":
        return [], sorted(set(select_trainable(params, "ALL")) | set(select_trainable(params, "HEAD-ONLY")))
    if method == "head-only":
        return [], select_trainable(params, "HEAD-ONLY")
    chosen = select_trainable(params, cfg["train.filter"])
    masked = [n for n in chosen if not is_dense_only(n)]
    dense = sorted(set(n for n in chosen if is_dense_only(n)) | set(head))
    return masked, dense


def finetune(cfg: RunConfig, model, theta1: ParamSet, ds: Dataset, method: str | None = None,
             rate: float | None = None, eval_every_epoch: bool = True) -> FinetuneResult:
    method = method or cfg["train.method"]
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    rate = cfg["train.rate"] if rate is None else rate
    params = theta1.copy()
    hp = AdamWConfig(cfg["train.lr"], cfg["train.beta1"], cfg["train.beta2"], cfg["train.eps"],
                     cfg["train.weight_decay"])
    masked, dense = _method_names(cfg, params, method)
    bs, order_seed = cfg["train.batch_size"], cfg["train.order_seed"]
    micro = cfg["train.micro_batches"]
    dtype = params["head.weight"].dtype

    mask = None
    calib = None
    if method == "sift":
        calib = accumulate_gradients(model, params, masked, batches(ds, "finetune-train", bs, order_seed),
                                     cfg["train.calibration_batches"])
        mask = MaskSelection(select_topk(calib, rate, cfg["train.granularity"]),
                             {n: params[n].shape for n in masked}, rate, cfg["train.granularity"],
                             "gradient-topk", cfg["train.calibration_batches"])
    elif method == "random":
        mask = random_mask({n: params[n].shape for n in masked}, rate, cfg["train.mask_seed"])
    elif method == "head-only":
        mask = MaskSelection({}, {}, rate, "per-tensor", "none", 0)

    metrics: list[dict] = []
    diverged = False
    if method == "full":
        tape = Tape(dtype, trainable=dense)
        opt = DenseAdamW(params, dense, hp)
        mem = None
    else:
        tape = Tape(dtype, trainable=sorted(set(masked) | set(dense)) if mask.indices else dense)
        opt = SparseAdamW(params, mask, hp, dense_names=dense, reselect_every=cfg["train.reselect_every"])
        opt.attach(tape)
        mem = memory_report(mask, params) if mask.indices else None

    train_stream = batches(ds, "finetune-train", bs, order_seed)
    steps_per_epoch = -(-len(train_stream.epoch(0)) // micro)
    schedule = lr_schedule(cfg["train.schedule"], hp.lr, steps_per_epoch * cfg["train.epochs"])
    step = 0
    for epoch in range(cfg["train.epochs"]):
        stream = train_stream.epoch(epoch)
        losses = []
        try:
            for i in range(0, len(stream), micro):
                group = stream[i:i + micro]
                lr = schedule(step)
                step += 1
                if method == "full":
                    total = 0.0
                    acc = None
                    for b in group:
                        loss = model.forward(tape, params, b)
                        total += float(loss.data)
                        tape.backward(loss)
                        g = {n: tape.grad(tape.named(n)) for n in dense}
                        acc = g if acc is None else {n: acc[n] + g[n] for n in dense}
                    if len(group) > 1:
                        acc = {n: a / len(group) for n, a in acc.items()}
                    for n, a in acc.items():
                        if not np.all(np.isfinite(a)):
                            raise NonFiniteGradientError(f"{n}: non-finite gradient")
                    opt.step(acc, lr)
                    losses.append(total / len(group))
                else:
                    losses.append(run_sparse_step(model, params, tape, opt, group, lr))
        except (NonFiniteLossError, NonFiniteGradientError) as e:
            log.warning("divergence in epoch %d: %s", epoch, e)
            diverged = True
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if eval_every_epoch or epoch == cfg["train.epochs"] - 1 or diverged:
            row["eval_loss"] = mean_loss(model, params, ds, "finetune-eval")
            row["eval_acc"] = accuracy(model, params, ds)
        metrics.append(row)
        if diverged:
            break

    trainable = (sum(params[n].size for n in dense) if method == "full"
                 else (mask.size() if mask is not None else 0))
    return FinetuneResult(method, params, metrics, mask, opt, mem, trainable, masked, dense,
                          diverged, calib)


# ----------------------------------------------------------------------
# comparisons

def seeded(cfg: RunConfig, seed: int) -> RunConfig:
    c = RunConfig(dict(cfg))
    for k in ("model.seed", "train.order_seed", "train.mask_seed", "pretrain.order_seed"):
        c[k] = seed
    return c


@dataclass
class CompareRow:
    method: str
    rate: float
    seed: int
    eval_acc: float
    eval_loss: float
    trainable: int


def compare(cfg: RunConfig, methods, rates, seeds, pretrained: dict | None = None) -> dict:
    """Fine-tune every (method, rate) from one pre-trained model per seed."""
    if len(methods) < 2:
        raise ValueError("compare needs at least two methods")
    ds = task_from_config(cfg)
    rows: list[CompareRow] = []
    pretrained = {} if pretrained is None else pretrained
    for seed in seeds:
        c = seeded(cfg, seed)
        if seed not in pretrained:
            pretrained[seed] = pretrain(c, ds)
        pre = pretrained[seed]
        for method in methods:
            for rate in (rates if method in ("sift", "random") else rates[:1]):
                r = finetune(c, pre.model, pre.theta1, ds, method, rate, eval_every_epoch=False)
                rows.append(CompareRow(method, rate if method in ("sift", "random") else float("nan"),
                                       seed, r.final_accuracy, r.metrics[-1]["eval_loss"], r.trainable))
    return summarize(rows)


def summarize(rows: list[CompareRow]) -> dict:
    groups: dict[tuple, list[CompareRow]] = {}
    for r in rows:
        key = (r.method, None if math.isnan(r.rate) else r.rate)
        groups.setdefault(key, []).append(r)
    table = []
    for (method, rate), rs in groups.items():
        accs = np.array([r.eval_acc for r in rs])
        table.append({"method": method, "rate": rate, "n_seeds": len(rs),
                      "mean_acc": float(accs.mean()), "std_acc": float(accs.std()),
                      "trainable": int(rs[0].trainable)})
    audit = {}
    rates = sorted({t["rate"] for t in table if t["rate"] is not None})
    mean = {(t["method"], t["rate"]): t["mean_acc"] for t in table}
    head = mean.get(("head-only", None))
    for rate in rates:
        s, r = mean.get(("sift", rate)), mean.get(("random", rate))
        entry = {}
        if s is not None and r is not None:
            entry["sift_minus_random"] = s - r
            entry["sift_ge_random"] = s >= r
        if r is not None and head is not None:
            entry["random_ge_head_only"] = r >= head
        if s is not None and head is not None:
            entry["sift_ge_head_only"] = s >= head
        audit[repr(rate)] = entry
    return {"rows": [r.__dict__ for r in rows], "table": table, "ordering": audit}


# ----------------------------------------------------------------------
# gradient studies at init vs trained

def finetune_gradients(cfg: RunConfig, model, params, ds: Dataset, names, num_batches: int = 1, seed: int = 0):
    return accumulate_gradients(model, params, names,
                                batches(ds, "finetune-train", cfg["analysis.batch_size"], seed), num_batches)


def concentration(cfg: RunConfig, pre: PretrainResult, fraction: float = 0.01, names=None) -> dict:
    """Top-``fraction`` gradient share on fine-tune data at init and at the trained point."""
    names = names or select_trainable(pre.theta0, cfg["train.filter"])
    out = {}
    for label, params in (("theta0", pre.theta0), ("theta1", pre.theta1)):
        g = analysis.flatten_grads(finetune_gradients(cfg, pre.model, params, pre.dataset, names,
                                                      cfg["analysis.grad_batches"], cfg["train.order_seed"]))
        prof = analysis.sparsity_profile(g, [fraction])
        out[label] = {"energy": prof.energy_fraction[0], "abs": prof.abs_fraction[0]}
    return out


def verify_bound_rows(cfg: RunConfig, pre: PretrainResult, taus=(0.005, 0.01, 0.05)) -> dict:
    names = select_trainable(pre.theta0, cfg["train.filter"])
    rows = []
    profiles = {}
    fractions = [float(f) for f in cfg.list_of("analysis.fractions")]
    for label, params in (("theta0", pre.theta0), ("theta1", pre.theta1)):
        grads = finetune_gradients(cfg, pre.model, params, pre.dataset, names, cfg["analysis.grad_batches"],
                                   cfg["train.order_seed"])
        pooled = analysis.flatten_grads(grads)
        targets = [("pooled", pooled)] + [(n, grads[n].reshape(-1)) for n in names]
        for scope, g in targets:
            for f in taus:
                tau = min(g.size - 1, max(1, math.ceil(f * g.size)))
                rep = analysis.verify_descent_bound(g, tau)
                rows.append({"point": label, "scope": scope, "tau_fraction": f, **rep.as_dict()})
        prof = analysis.sparsity_profile(pooled, fractions)
        profiles[label] = {"fractions": prof.fractions, "energy_fraction": prof.energy_fraction,
                           "abs_fraction": prof.abs_fraction, "n": prof.n}
    return {"rows": rows, "profiles": profiles, "all_hold": all(r["holds"] for r in rows)}


def capture_study(cfg: RunConfig, pre: PretrainResult, k_batches: int | None = None) -> dict:
    """Fixed first-batch mask vs each batch's own top-k, at init and at the trained point."""
    names = select_trainable(pre.theta0, cfg["train.filter"])
    names = [n for n in names if not is_dense_only(n)]
    k = k_batches or cfg["analysis.capture_batches"]
    out = {}
    for label, params in (("theta0", pre.theta0), ("theta1", pre.theta1)):
        stream = list(batches(pre.dataset, "finetune-train", cfg["analysis.batch_size"], cfg["train.order_seed"]))
        mask = calibrate_mask(pre.model, params, names, stream[:1], cfg["analysis.rate"], 1)
        series = analysis.mask_capture_series(pre.model, params, names, mask, stream, k)
        gaps = [own - fixed for own, fixed in series]
        out[label] = {"series": series, "mean_gap": float(np.mean(gaps)),
                      "fixed_le_own": all(f <= o for o, f in series)}
    return out
