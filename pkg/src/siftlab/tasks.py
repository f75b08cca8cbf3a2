"""Synthetic pre-train / fine-tune task pairs and deterministic batching.

Each task has three disjoint splits: ``pretrain`` (source rule),
``finetune-train`` and ``finetune-eval`` (shifted rule).

* ``modular-arith``: tokens ``[a, b, =]``; pretrain labels ``(a + b) mod p``,
  fine-tune labels ``(a - b) mod p``.
* ``seq-classify``: random token strings; pretrain label is the token at one
  position, fine-tune label the token at another, so adapting means moving
  attention rather than relearning the read-out.
* ``char-lm``: next-token prediction on strings sampled from two different
  sparse Markov chains over the same alphabet.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

SPLITS = ("pretrain", "finetune-train", "finetune-eval")
KINDS = ("modular-arith", "seq-classify", "char-lm")


class TaskError(ValueError):
    pass


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Dataset:
    kind: str
    seed: int
    vocab: int
    seq_len: int
    n_out: int
    splits: dict[str, Split]
    params: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> Split:
        if split not in self.splits:
            raise TaskError(f"unknown split {split!r}")
        return self.splits[split]


DEFAULT_SIZES = {"pretrain": 2048, "finetune-train": 512, "finetune-eval": 512}


def _sizes(sizes) -> dict[str, int]:
    out = dict(DEFAULT_SIZES)
    out.update(sizes or {})
    if any(int(out[s]) < 1 for s in SPLITS):
        raise TaskError(f"split sizes must be positive, got {out}")
    return {s: int(out[s]) for s in SPLITS}


def _modular(seed: int, sizes: dict[str, int], modulus: int = 97) -> Dataset:
    p = modulus
    need = sum(sizes.values())
    if need > p * p:
        raise TaskError(f"modulus {p} has only {p * p} distinct pairs, {need} requested")
    rng = np.random.default_rng(seed)
    ids = rng.permutation(p * p)[:need]
    splits, start = {}, 0
    for s in SPLITS:
        sid = np.sort(ids[start:start + sizes[s]])
        start += sizes[s]
        a, b = sid // p, sid % p
        x = np.stack([a, b, np.full_like(a, p)], axis=1)
        y = (a + b) % p if s == "pretrain" else (a - b) % p
        splits[s] = Split(x.astype(np.int64), y.astype(np.int64), sid.astype(np.int64))
    return Dataset("modular-arith", seed, p + 1, 3, p, splits, {"modulus": p})


def _unique_strings(rng, n: int, vocab: int, length: int, sampler=None) -> np.ndarray:
    seen: dict[bytes, None] = {}
    rows = []
    while len(rows) < n:
        batch = sampler(max(64, n)) if sampler else rng.integers(0, vocab, size=(max(64, n), length))
        for r in batch:
            key = r.astype(np.int64).tobytes()
            if key not in seen:
                seen[key] = None
                rows.append(r)
                if len(rows) == n:
                    break
    return np.array(rows, dtype=np.int64)


def _seq_classify(seed: int, sizes: dict[str, int], vocab: int = 8, seq_len: int = 6,
                  source_pos: int = 1, target_pos: int = 3) -> Dataset:
    if not (0 <= source_pos < seq_len and 0 <= target_pos < seq_len):
        raise TaskError("label positions must lie inside the sequence")
    rng = np.random.default_rng(seed)
    x = _unique_strings(rng, sum(sizes.values()), vocab, seq_len)
    splits, start = {}, 0
    for s in SPLITS:
        xs = x[start:start + sizes[s]]
        pos = source_pos if s == "pretrain" else target_pos
        splits[s] = Split(xs, xs[:, pos].copy(), np.arange(start, start + sizes[s], dtype=np.int64))
        start += sizes[s]
    return Dataset("seq-classify", seed, vocab, seq_len, vocab, splits,
                   {"source_pos": source_pos, "target_pos": target_pos})


def _markov_chain(rng, vocab: int, fanout: int) -> np.ndarray:
    trans = np.zeros((vocab, vocab))
    for i in range(vocab):
        nxt = rng.choice(vocab, size=fanout, replace=False)
        trans[i, nxt] = rng.dirichlet(np.ones(fanout))
    return trans


def _sample_chain(rng, trans: np.ndarray, n: int, length: int) -> np.ndarray:
    vocab = trans.shape[0]
    cdf = np.cumsum(trans, axis=1)
    out = np.empty((n, length), dtype=np.int64)
    out[:, 0] = rng.integers(0, vocab, size=n)
    for t in range(1, length):
        u = rng.random(n)
        out[:, t] = np.minimum((u[:, None] > cdf[out[:, t - 1]]).sum(axis=1), vocab - 1)
    return out


def _char_lm(seed: int, sizes: dict[str, int], vocab: int = 12, seq_len: int = 8, fanout: int = 3) -> Dataset:
    rng = np.random.default_rng(seed)
    src, dst = _markov_chain(rng, vocab, fanout), _markov_chain(rng, vocab, fanout)
    # one extra position: inputs are x[:, :-1], targets x[:, 1:]
    pre = _unique_strings(rng, sizes["pretrain"], vocab, seq_len + 1,
                          lambda k: _sample_chain(rng, src, k, seq_len + 1))
    ft = _unique_strings(rng, sizes["finetune-train"] + sizes["finetune-eval"], vocab, seq_len + 1,
                         lambda k: _sample_chain(rng, dst, k, seq_len + 1))
    pre_keys = {r.tobytes() for r in pre}
    ft = np.array([r for r in ft if r.tobytes() not in pre_keys], dtype=np.int64)
    if len(ft) < sizes["finetune-train"] + sizes["finetune-eval"]:
        raise TaskError("fine-tune chain too close to the pretrain chain to fill disjoint splits")
    chunks = {"pretrain": pre, "finetune-train": ft[:sizes["finetune-train"]],
              "finetune-eval": ft[sizes["finetune-train"]:sizes["finetune-train"] + sizes["finetune-eval"]]}
    splits, start = {}, 0
    for s in SPLITS:
        c = chunks[s]
        splits[s] = Split(c[:, :-1].copy(), c[:, 1:].copy(), np.arange(start, start + len(c), dtype=np.int64))
        start += len(c)
    return Dataset("char-lm", seed, vocab, seq_len, vocab, splits, {"fanout": fanout})


def make_task(kind: str, seed: int, sizes: dict[str, int] | None = None, **options) -> Dataset:
    """Generate a task deterministically from ``seed``."""
    sizes = _sizes(sizes)
    if kind == "modular-arith":
        return _modular(seed, sizes, **options)
    if kind == "seq-classify":
        return _seq_classify(seed, sizes, **options)
    if kind == "char-lm":
        return _char_lm(seed, sizes, **options)
    raise TaskError(f"unknown task kind {kind!r}; expected one of {KINDS}")


class BatchStream:
    """Seeded shuffled minibatches over one split; the last partial batch is kept.

    Iterating restarts at epoch 0, so two iterations yield identical batches.
    """

    def __init__(self, split: Split, batch_size: int, seed: int, epochs: int = 1):
        if len(split) == 0:
            raise TaskError("split is empty")
        if batch_size < 1:
            raise TaskError("batch_size must be >= 1")
        self.split = split
        self.batch_size = batch_size
        self.seed = seed
        self.epochs = epochs
        self.cursor = 0

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.split))

    def epoch(self, epoch: int) -> list[tuple[np.ndarray, np.ndarray]]:
        perm = self.order(epoch)
        return [(self.split.x[perm[lo:lo + self.batch_size]], self.split.y[perm[lo:lo + self.batch_size]])
                for lo in range(0, len(perm), self.batch_size)]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        self.cursor = 0
        for epoch in range(self.epochs):
            perm = self.order(epoch)
            for lo in range(0, len(perm), self.batch_size):
                idx = perm[lo:lo + self.batch_size]
                self.cursor += 1
                yield self.split.x[idx], self.split.y[idx]

    def __len__(self) -> int:
        per_epoch = -(-len(self.split) // self.batch_size)
        return per_epoch * self.epochs


def batches(dataset: Dataset, split: str, batch_size: int, seed: int, epochs: int = 1) -> BatchStream:
    return BatchStream(dataset[split], batch_size, seed, epochs)


def fixed_batches(dataset: Dataset, split: str, batch_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Unshuffled batches over a split, for evaluation."""
    s = dataset[split]
    return [(s.x[i:i + batch_size], s.y[i:i + batch_size]) for i in range(0, len(s), batch_size)]


def gaussian_blobs(seed: int, n: int, dim: int, classes: int, spread: float = 1.0) -> Split:
    """Float-feature classification data for the MLP."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim)) * 2.0
    y = rng.integers(0, classes, size=n)
    x = centers[y] + spread * rng.standard_normal((n, dim))
    return Split(x, y.astype(np.int64), np.arange(n, dtype=np.int64))


def write_dataset(path, dataset: Dataset) -> None:
    """One example per line: ``split<TAB>id<TAB>tokens<TAB>target(s)``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# kind={dataset.kind} seed={dataset.seed} vocab={dataset.vocab} "
                 f"seq_len={dataset.seq_len} n_out={dataset.n_out}\n")
        for s in SPLITS:
            sp = dataset.splits[s]
            for i, x, y in zip(sp.ids, sp.x, sp.y):
                tgt = " ".join(map(str, np.atleast_1d(y)))
                fh.write(f"{s}\t{i}\t{' '.join(map(str, x))}\t{tgt}\n")
