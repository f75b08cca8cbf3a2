"""1-D and 2-D loss-landscape scans between a random init and a trained point.

``f(a) = L(theta0 + a * (theta1 - theta0))`` and
``f(a, b) = L(theta0 + a * d1 + b * d2)`` where ``d2`` is ``d1`` multiplied
entrywise by standard-normal draws (so per-component scale is preserved).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .models import ParamSet


class LandscapeError(ValueError):
    pass


def default_alpha_grid(points: int = 41) -> np.ndarray:
    return np.linspace(-0.5, 1.5, points)


def default_beta_grid(points: int = 41) -> np.ndarray:
    return np.linspace(-1.0, 1.0, points)


def _check_aligned(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> None:
    if list(a) != list(b):
        raise LandscapeError("parameter sets have different names")
    for k in a:
        if a[k].shape != b[k].shape:
            raise LandscapeError(f"{k!r}: shape {a[k].shape} vs {b[k].shape}")


@dataclass
class DirectionVector:
    tensors: dict[str, np.ndarray]
    label: str
    # theta1 itself, so that alpha == 1 lands on it exactly rather than up to rounding
    endpoint: Mapping[str, np.ndarray] | None = None


def direction(theta0, theta1) -> DirectionVector:
    _check_aligned(theta0, theta1)
    return DirectionVector({k: theta1[k] - theta0[k] for k in theta0}, "delta1", theta1)


def interpolate_params(theta0, theta1, alpha: float) -> ParamSet:
    """``theta0 + alpha * (theta1 - theta0)``; ``alpha == 0`` returns an exact copy of ``theta0``."""
    _check_aligned(theta0, theta1)
    return offset_params(theta0, direction(theta0, theta1), alpha)


def offset_params(theta0, d1: DirectionVector, alpha: float, d2: DirectionVector | None = None,
                  beta: float = 0.0) -> ParamSet:
    out = ParamSet()
    for k, base in theta0.items():
        if alpha == 0:
            p = base.copy()
        elif alpha == 1 and d1.endpoint is not None:
            p = d1.endpoint[k].copy()
        else:
            p = base + alpha * d1.tensors[k]
        if d2 is not None and beta != 0:
            p = p + beta * d2.tensors[k]
        out[k] = p
    return out


def gen_second_direction(delta1: DirectionVector, seed: int) -> DirectionVector:
    """Entrywise ``d_i * delta1_i`` with ``d_i ~ N(0, 1)`` from a seeded generator."""
    if all(not np.any(t) for t in delta1.tensors.values()):
        raise LandscapeError("first direction is identically zero")
    rng = np.random.default_rng(seed)
    out = {}
    for k in sorted(delta1.tensors):
        t = delta1.tensors[k]
        out[k] = (rng.standard_normal(t.shape) * t).astype(t.dtype)
    return DirectionVector({k: out[k] for k in delta1.tensors}, "delta2")


@dataclass
class LandscapeScan:
    alphas: list[float]
    losses: np.ndarray
    betas: list[float] | None = None
    nonfinite: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def is_2d(self) -> bool:
        return self.betas is not None


LossFn = Callable[[Mapping[str, np.ndarray]], float]


def _evaluate(points: Sequence, make_params: Callable, loss_fn: LossFn, threads: int) -> np.ndarray:
    def one(pt):
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                return float(loss_fn(make_params(pt)))
            except (FloatingPointError, ArithmeticError):
                return float("nan")

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return np.array(list(pool.map(one, points)), dtype=np.float64)
    return np.array([one(p) for p in points], dtype=np.float64)


def scan_1d(loss_fn: LossFn, theta0, theta1, alphas, threads: int = 1, meta: dict | None = None) -> LandscapeScan:
    """Loss along the segment; non-finite values are kept and flagged."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise LandscapeError("alpha grid is empty")
    d1 = direction(theta0, theta1)

    losses = _evaluate(alphas, lambda a: offset_params(theta0, d1, a), loss_fn, threads)
    return LandscapeScan(alphas, losses, None, ~np.isfinite(losses), dict(meta or {}))


def scan_2d(loss_fn: LossFn, theta0, d1: DirectionVector, d2: DirectionVector, alphas, betas,
            threads: int = 1, meta: dict | None = None) -> LandscapeScan:
    """Loss on the plane ``theta0 + a d1 + b d2``; ``losses[i, j]`` is at ``(alphas[i], betas[j])``."""
    alphas = [float(a) for a in alphas]
    betas = [float(b) for b in betas]
    if not alphas or not betas:
        raise LandscapeError("grids must be nonempty")
    pts = [(a, b) for a in alphas for b in betas]
    losses = _evaluate(pts, lambda ab: offset_params(theta0, d1, ab[0], d2, ab[1]), loss_fn, threads)
    losses = losses.reshape(len(alphas), len(betas))
    return LandscapeScan(alphas, losses, betas, ~np.isfinite(losses), dict(meta or {}))


def dataset_loss_fn(model, eval_batches) -> LossFn:
    """Mean loss over a fixed list of batches, weighted by batch size."""
    from .models import eval_loss

    batches = list(eval_batches)
    sizes = [len(b[1]) for b in batches]
    total = float(sum(sizes))

    def fn(params):
        return sum(eval_loss(model, params, b) * s for b, s in zip(batches, sizes)) / total

    return fn
