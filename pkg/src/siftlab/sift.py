"""Sparse increment fine-tuning.

Fine-tuned weights are kept as ``x_ft = x_pt + dx`` where ``dx`` is nonzero
only on a fixed set of flat indices per tensor (the mask).  The mask is the
top-``m`` entries of ``|g|`` of an early (accumulated) gradient, with
``m = max(1, floor(rate * n))``.  During training each masked parameter gets
a gradient hook that gathers the masked components straight out of the dense
gradient, so neither dense gradients nor dense optimizer moments are kept.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from . import kernels
from .autodiff import GradHookReceipt, Tape
from .dense import AdamWConfig

GRANULARITIES = ("per-tensor", "global-pool")


class MaskError(ValueError):
    pass


class IncrementMismatchError(ValueError):
    pass


class NonFiniteGradientError(ArithmeticError):
    pass


def mask_size(n: int, rate: float) -> int:
    """``max(1, floor(rate * n))``; the product is rounded to 1e-9 first so
    that e.g. ``0.29 * 100`` counts as 29, not 28."""
    _check_rate(rate)
    return max(1, min(n, math.floor(round(rate * n, 9))))


def _check_rate(rate: float) -> None:
    if not (0.0 < rate <= 1.0) or math.isnan(rate):
        raise MaskError(f"rate must lie in (0, 1], got {rate!r}")


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Sorted flat indices of the ``k`` largest ``|values|``; ties go to the lower index."""
    mag = np.abs(np.asarray(values).reshape(-1))
    if not np.all(np.isfinite(mag)):
        raise NonFiniteGradientError("cannot rank non-finite gradient entries")
    order = np.argsort(-mag, kind="stable")[:k]
    return np.sort(order).astype(np.int64)


@dataclass
class MaskSelection:
    indices: dict[str, np.ndarray]
    shapes: dict[str, tuple[int, ...]]
    rate: float
    granularity: str = "per-tensor"
    provenance: str = "gradient-topk"
    calibration_batches: int = 1

    def __post_init__(self):
        for name, idx in self.indices.items():
            n = int(np.prod(self.shapes[name]))
            if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= n):
                raise MaskError(f"mask for {name!r} must be strictly increasing in [0, {n})")

    @property
    def names(self) -> list[str]:
        return sorted(self.indices)

    def size(self, name: str | None = None) -> int:
        if name is not None:
            return int(self.indices[name].size)
        return int(sum(i.size for i in self.indices.values()))

    def dense_mask(self, name: str) -> np.ndarray:
        out = np.zeros(int(np.prod(self.shapes[name])), dtype=bool)
        out[self.indices[name]] = True
        return out.reshape(self.shapes[name])


def select_topk(grads: Mapping[str, np.ndarray], rate: float, granularity: str = "per-tensor") -> dict[str, np.ndarray]:
    """Per-tensor or pooled top-``|g|`` selection."""
    _check_rate(rate)
    names = sorted(grads)
    if granularity == "per-tensor":
        return {n: topk_indices(grads[n], mask_size(grads[n].size, rate)) for n in names}
    if granularity != "global-pool":
        raise MaskError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")
    sizes = [grads[n].size for n in names]
    pooled = np.concatenate([np.asarray(grads[n]).reshape(-1) for n in names])
    chosen = topk_indices(pooled, mask_size(pooled.size, rate))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = {}
    for n, lo, hi in zip(names, offsets[:-1], offsets[1:]):
        sel = chosen[(chosen >= lo) & (chosen < hi)]
        out[n] = (sel - lo).astype(np.int64)
    return out


def accumulate_gradients(model, params, names: Iterable[str], stream, num_batches: int,
                         dtype=None) -> dict[str, np.ndarray]:
    """Mean dense gradient of the first ``num_batches`` batches of ``stream``."""
    names = sorted(names)
    dtype = dtype or next(iter(params.values())).dtype
    tape = Tape(dtype, trainable=names)
    acc = {n: np.zeros(params[n].size, dtype=np.float64) for n in names}
    seen = 0
    for batch in stream:
        loss = model.forward(tape, params, batch)
        tape.backward(loss)
        for n in names:
            acc[n] += tape.grad(tape.named(n)).reshape(-1)
        seen += 1
        if seen == num_batches:
            break
    if seen == 0:
        raise MaskError("calibration data stream is empty")
    return {n: (a / seen).reshape(params[n].shape) for n, a in acc.items()}


def calibrate_mask(model, params, trainable_names, data_stream, rate: float, num_batches: int = 1,
                   granularity: str = "per-tensor") -> MaskSelection:
    """Fix the update mask from the averaged gradient of the first batches."""
    _check_rate(rate)
    if num_batches < 1:
        raise MaskError("num_batches must be >= 1")
    grads = accumulate_gradients(model, params, trainable_names, data_stream, num_batches)
    return MaskSelection(select_topk(grads, rate, granularity),
                         {n: params[n].shape for n in grads}, rate, granularity,
                         "gradient-topk", num_batches)


def random_mask(param_shapes: Mapping[str, tuple[int, ...] | int], rate: float, seed: int) -> MaskSelection:
    """Uniform mask with the same per-tensor cardinality as :func:`calibrate_mask`."""
    _check_rate(rate)
    rng = np.random.default_rng(seed)
    shapes = {n: (s,) if isinstance(s, (int, np.integer)) else tuple(s) for n, s in param_shapes.items()}
    idx = {}
    for n in sorted(shapes):
        size = int(np.prod(shapes[n]))
        idx[n] = np.sort(rng.choice(size, mask_size(size, rate), replace=False)).astype(np.int64)
    return MaskSelection(idx, shapes, rate, "per-tensor", f"random({seed})", 0)


def full_mask(params: Mapping[str, np.ndarray], names: Iterable[str]) -> MaskSelection:
    names = list(names)
    return MaskSelection({n: np.arange(params[n].size, dtype=np.int64) for n in names},
                         {n: params[n].shape for n in names}, 1.0, "per-tensor", "dense", 0)


def gather_sparse_grad(dense_grad_view: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """``out[j] = g[indices[j]]``."""
    flat = dense_grad_view.reshape(-1)
    out = np.zeros(indices.size, dtype=flat.dtype)
    kernels.gather_add(out, np.ascontiguousarray(flat), np.ascontiguousarray(indices, dtype=np.int64))
    return out


@dataclass
class IncrementEntry:
    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray


@dataclass
class SparseIncrement:
    entries: dict[str, IncrementEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> IncrementEntry:
        return self.entries[name]

    def n_values(self) -> int:
        return sum(e.indices.size for e in self.entries.values())

    def equals(self, other: "SparseIncrement") -> bool:
        """Bitwise equality, dtype included."""
        if self.entries.keys() != other.entries.keys():
            return False
        for k, a in self.entries.items():
            b = other.entries[k]
            if (tuple(a.shape) != tuple(b.shape) or a.values.dtype != b.values.dtype
                    or not np.array_equal(a.indices, b.indices)
                    or a.values.tobytes() != b.values.tobytes()):
                return False
        return True


@dataclass
class SparseGradAccumulator:
    values: dict[str, np.ndarray]
    micro_batch_count: int = 0

    def reset(self) -> None:
        for a in self.values.values():
            a[...] = 0
        self.micro_batch_count = 0


@dataclass
class SparseOptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    hp: AdamWConfig
    t: int = 0

    def n_elements(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())


def merge_increment(params_pt: Mapping[str, np.ndarray], increment: SparseIncrement):
    """Scatter-add ``increment`` into a copy of ``params_pt``; untouched entries are bit-identical."""
    from .models import ParamSet

    out = ParamSet((k, v.copy()) for k, v in params_pt.items())
    for name, e in increment.entries.items():
        if name not in out:
            raise IncrementMismatchError(f"increment names unknown parameter {name!r}")
        if tuple(out[name].shape) != tuple(e.shape):
            raise IncrementMismatchError(f"{name!r}: increment shape {tuple(e.shape)} != parameter shape {out[name].shape}")
        flat = out[name].reshape(-1)
        idx = np.ascontiguousarray(e.indices, dtype=np.int64)
        base = flat[idx].copy()
        kernels.scatter_merge(flat, idx, base, np.ascontiguousarray(e.values, dtype=flat.dtype))
    return out


class SparseAdamW:
    """AdamW over the masked entries of each tensor, fed by gradient hooks.

    ``params`` is updated in place after every step (masked entries become
    ``base + dx``), so a plain forward pass always sees the fine-tuned model.
    Tensors listed in ``dense_names`` are trained on every entry but kept out
    of the sparse budget (classifier, layer norms).
    """

    def __init__(self, params, mask: MaskSelection, hp: AdamWConfig, dense_names: Iterable[str] = (),
                 reselect_every: int = 0):
        self.params = params
        self.hp = hp
        self.mask = mask
        self.dense_names = sorted(set(dense_names) - set(mask.indices))
        self.reselect_every = reselect_every
        dt = next(iter(params.values())).dtype
        self._idx: dict[str, np.ndarray] = {}
        self._base: dict[str, np.ndarray] = {}
        self._delta: dict[str, np.ndarray] = {}
        self._frozen: dict[str, dict[int, float]] = {}
        for n in mask.names:
            self._install(n, mask.indices[n])
        for n in self.dense_names:
            self._install(n, np.arange(params[n].size, dtype=np.int64))
        self.state = SparseOptimState({n: np.zeros(i.size, dt) for n, i in self._idx.items()},
                                      {n: np.zeros(i.size, dt) for n, i in self._idx.items()}, hp)
        self.acc = SparseGradAccumulator({n: np.zeros(i.size, dt) for n, i in self._idx.items()})
        self._seen: set[str] = set()
        self._reselect_due = False

    def _install(self, name: str, idx: np.ndarray) -> None:
        flat = self.params[name].reshape(-1)
        self._idx[name] = np.ascontiguousarray(idx, dtype=np.int64)
        self._base[name] = flat[idx].copy()
        self._delta[name] = np.zeros(idx.size, dtype=flat.dtype)

    @property
    def names(self) -> list[str]:
        return sorted(self._idx)

    @property
    def step_count(self) -> int:
        return self.state.t

    # -- hook side ----------------------------------------------------
    def attach(self, tape: Tape) -> None:
        """Register one gather hook per trained tensor on ``tape``."""
        bound = tape.bind({n: self.params[n] for n in self.names})
        for n in self.names:
            tape.register_grad_hook(bound[n], self._make_hook(n))

    def _make_hook(self, name: str) -> Callable[[GradHookReceipt], None]:
        def hook(receipt: GradHookReceipt) -> None:
            g = receipt.grad.reshape(-1)
            if self._reselect_due and name in self.mask.indices:
                self._reselect(name, g)
            kernels.gather_add(self.acc.values[name], np.ascontiguousarray(g), self._idx[name])
            self._seen.add(name)
        return hook

    def end_micro_batch(self) -> None:
        self.acc.micro_batch_count += 1
        self._seen.clear()
        self._reselect_due = False

    def begin_step(self) -> None:
        """Call before the first backward of a step (arms periodic re-selection)."""
        t = self.state.t
        self._reselect_due = bool(self.reselect_every) and t > 0 and t % self.reselect_every == 0

    def _reselect(self, name: str, g: np.ndarray) -> None:
        new_idx = topk_indices(g, self._idx[name].size)
        old_idx = self._idx[name]
        if np.array_equal(new_idx, old_idx):
            return
        frozen = self._frozen.setdefault(name, {})
        leaving = ~np.isin(old_idx, new_idx)
        for i, d in zip(old_idx[leaving], self._delta[name][leaving]):
            frozen[int(i)] = frozen.get(int(i), 0.0) + float(d)
        keep_old = np.isin(old_idx, new_idx)
        pos_new = np.searchsorted(new_idx, old_idx[keep_old])
        flat = self.params[name].reshape(-1)
        dt = flat.dtype
        m, v, delta, acc = (np.zeros(new_idx.size, dt) for _ in range(4))
        m[pos_new] = self.state.m[name][keep_old]
        v[pos_new] = self.state.v[name][keep_old]
        delta[pos_new] = self._delta[name][keep_old]
        acc[pos_new] = self.acc.values[name][keep_old]
        base = flat[new_idx].copy()
        base[pos_new] = self._base[name][keep_old]
        self._idx[name], self._base[name], self._delta[name] = new_idx, base, delta
        self.state.m[name], self.state.v[name], self.acc.values[name] = m, v, acc
        self.mask.indices[name] = new_idx

    # -- optimizer side -----------------------------------------------
    def step(self, lr: float | None = None) -> None:
        count = self.acc.micro_batch_count
        if count == 0:
            raise RuntimeError("step() without any accumulated micro-batch")
        hp = self.hp
        lr = hp.lr if lr is None else lr
        for n in self.names:
            g = self.acc.values[n]
            if count > 1:
                g /= count
            bad = ~np.isfinite(g)
            if bad.any():
                raise NonFiniteGradientError(
                    f"{n}: {int(bad.sum())} non-finite sparse gradient values at step {self.state.t + 1}")
        self.state.t += 1
        for n in self.names:
            kernels.sparse_adamw(self._delta[n], self._base[n], self.state.m[n], self.state.v[n],
                                 self.acc.values[n], lr=lr, beta1=hp.beta1, beta2=hp.beta2,
                                 eps=hp.eps, weight_decay=hp.weight_decay, step=self.state.t)
            kernels.scatter_merge(self.params[n].reshape(-1), self._idx[n], self._base[n], self._delta[n])
        self.acc.reset()

    def increment(self, include_dense: bool = False) -> SparseIncrement:
        """Current ``dx`` as index/value pairs (masked tensors only by default)."""
        names = self.names if include_dense else [n for n in self.names if n not in self.dense_names]
        out = {}
        for n in names:
            idx, vals = self._idx[n], self._delta[n]
            frozen = self._frozen.get(n)
            if frozen:
                extra = {k: v for k, v in frozen.items()}
                for i, d in zip(idx, vals):
                    extra[int(i)] = extra.get(int(i), 0.0) + float(d)
                keys = np.array(sorted(extra), dtype=np.int64)
                vals = np.array([extra[k] for k in keys], dtype=vals.dtype)
                idx = keys
            out[n] = IncrementEntry(tuple(self.params[n].shape), idx.copy(), vals.copy())
        return SparseIncrement(out)

    def instrumented_counts(self) -> dict[str, int]:
        """Element counts actually allocated for the masked tensors."""
        masked = [n for n in self.names if n not in self.dense_names]
        grad = sum(self.acc.values[n].size for n in masked)
        optim = sum(self.state.m[n].size + self.state.v[n].size for n in masked)
        return {"grad": grad, "optim": optim, "params": sum(self.params[n].size for n in masked)}


def run_sparse_step(model, params, tape: Tape, opt: SparseAdamW, micro_batches, lr=None) -> float:
    """Forward/backward over ``micro_batches`` then one optimizer step; returns the mean loss."""
    opt.begin_step()
    total = 0.0
    for batch in micro_batches:
        loss = model.forward(tape, params, batch)
        total += float(loss.data)
        tape.backward(loss)
        opt.end_micro_batch()
    opt.step(lr)
    return total / max(1, len(micro_batches))


@dataclass
class MemoryReport:
    param_elements: int
    grad_elements: int
    optim_elements: int
    dense_grad_elements: int
    dense_optim_elements: int
    grad_ratio: float
    optim_ratio: float
    rate: float
    per_tensor: dict[str, dict[str, int]]

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def memory_report(mask: MaskSelection, params: Mapping[str, np.ndarray] | None = None) -> MemoryReport:
    """Element counts of sparse gradient and AdamW state vs their dense equivalents."""
    per = {}
    for n in mask.names:
        size = int(np.prod(mask.shapes[n]))
        if params is not None and params[n].size != size:
            raise MaskError(f"mask shape for {n!r} does not match parameter")
        k = mask.size(n)
        per[n] = {"params": size, "grad": k, "optim": 2 * k}
    n_tot = sum(p["params"] for p in per.values())
    k_tot = sum(p["grad"] for p in per.values())
    return MemoryReport(n_tot, k_tot, 2 * k_tot, n_tot, 2 * n_tot,
                        k_tot / n_tot if n_tot else 0.0, (2 * k_tot) / (2 * n_tot) if n_tot else 0.0,
                        mask.rate, per)
