"""Gradient concentration diagnostics and the steepest-coordinates descent bound.

Sort components by ``|g|`` descending.  For a coordinate subspace ``S`` the
best attainable cosine between a direction in ``S`` and ``g`` is
``-||P_S g|| / ||g||`` (attained at ``d = -P_S g``).  If ``S`` spans the
``tau`` largest components and ``g_(tau+1)^2 <= eps * sum_{j<=tau} g_(j)^2``
then that cosine is at most ``-1 / sqrt(1 + eps * (n - tau))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .sift import MaskSelection, select_topk, topk_indices, accumulate_gradients


class AnalysisError(ValueError):
    pass


BOUND_SLACK = 1e-12


def _flat64(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if g.size == 0:
        raise AnalysisError("empty gradient")
    return g


def _sorted_mag(g: np.ndarray) -> np.ndarray:
    return np.sort(np.abs(g))[::-1]


@dataclass
class SparsityProfile:
    fractions: list[float]
    energy_fraction: list[float]
    abs_fraction: list[float]
    n: int

    def at(self, f: float, norm: str = "energy") -> float:
        curve = self.energy_fraction if norm == "energy" else self.abs_fraction
        return curve[self.fractions.index(f)]


def sparsity_profile(g_flat, fractions: Sequence[float]) -> SparsityProfile:
    """Share of ``sum g^2`` (and of ``sum |g|``) held by the top ``ceil(f*n)`` components."""
    g = _flat64(g_flat)
    fr = [float(f) for f in fractions]
    if any(not (0.0 < f <= 1.0) for f in fr) or fr != sorted(fr):
        raise AnalysisError("fractions must be ascending values in (0, 1]")
    mag = _sorted_mag(g)
    if mag[0] == 0.0:
        raise AnalysisError("all-zero gradient: concentration fractions are undefined")
    # scale by the max magnitude first so squares cannot overflow or underflow to zero
    mag = mag / mag[0]
    sq = np.cumsum(mag * mag)
    ab = np.cumsum(mag)
    n = g.size
    ks = [min(n, max(1, math.ceil(round(f * n, 9)))) for f in fr]
    return SparsityProfile(fr, [float(sq[k - 1] / sq[-1]) for k in ks],
                           [float(ab[k - 1] / ab[-1]) for k in ks], n)


def epsilon_for_tau(g_flat, tau: int) -> float:
    """Smallest ``eps`` with ``g_(tau+1)^2 <= eps * sum_{j<=tau} g_(j)^2``."""
    g = _flat64(g_flat)
    n = g.size
    if not (1 <= tau < n):
        raise AnalysisError(f"tau must satisfy 1 <= tau < n={n}, got {tau}")
    mag = _sorted_mag(g)
    if mag[0] == 0.0:
        raise AnalysisError("top-tau energy is zero")
    mag = mag / mag[0]
    top = float(np.sum(mag[:tau] ** 2))
    return float(mag[tau] ** 2 / top)


def min_subspace_cosine(g_flat, mask_indices) -> float:
    """``min_{d in S} d.g / (|d| |g|)`` for ``S`` spanned by the masked coordinates."""
    g = _flat64(g_flat)
    idx = np.asarray(mask_indices, dtype=np.int64)
    if idx.size == 0:
        raise AnalysisError("empty mask")
    if idx.min() < 0 or idx.max() >= g.size:
        raise IndexError("mask index out of bounds")
    scale = np.max(np.abs(g))
    if scale == 0.0:
        raise AnalysisError("zero gradient")
    g = g / scale
    sel = g[np.unique(idx)]
    return -math.sqrt(float(np.dot(sel, sel))) / math.sqrt(float(np.dot(g, g)))


@dataclass
class DescentBoundReport:
    tau: int
    n: int
    epsilon: float
    cosine_min: float
    bound: float
    tau_over_n_bound: float
    holds: bool
    sufficient: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def verify_descent_bound(g_flat, tau: int) -> DescentBoundReport:
    """Check the cosine of the top-``tau`` subspace against the epsilon bound."""
    g = _flat64(g_flat)
    n = g.size
    eps = epsilon_for_tau(g, tau)
    cos = min_subspace_cosine(g, topk_indices(g, tau))
    bound = -1.0 / math.sqrt(1.0 + eps * (n - tau))
    return DescentBoundReport(tau, n, eps, cos, bound, -tau / n,
                              holds=cos <= bound + BOUND_SLACK, sufficient=cos <= -tau / n)


def energy_captured(g_flat, indices) -> float:
    """Fraction of ``sum g^2`` lying on ``indices``."""
    g = _flat64(g_flat)
    total = float(np.dot(g, g))
    if total == 0.0:
        raise AnalysisError("zero gradient")
    sel = g[np.asarray(indices, dtype=np.int64)]
    return float(np.dot(sel, sel)) / total


def mask_capture_series(model, params, trainable_names, mask_first: MaskSelection, data_stream,
                        k_batches: int) -> list[tuple[float, float]]:
    """Per batch: (energy captured by its own top-k, energy captured by the fixed first-batch mask).

    Energies are pooled over all masked tensors; the own top-k is chosen with
    the same rate and granularity as ``mask_first``.
    """
    names = sorted(trainable_names)
    out = []
    it = iter(data_stream)
    for _ in range(k_batches):
        try:
            batch = next(it)
        except StopIteration:
            break
        grads = accumulate_gradients(model, params, names, [batch], 1)
        own = select_topk(grads, mask_first.rate, mask_first.granularity)
        total = sum(float(np.sum(grads[n].astype(np.float64) ** 2)) for n in names)
        if total == 0.0:
            raise AnalysisError("zero gradient batch")

        def captured(masks):
            return sum(float(np.sum(grads[n].reshape(-1)[masks[n]].astype(np.float64) ** 2)) for n in names) / total

        out.append((captured(own), captured(mask_first.indices)))
    if not out:
        raise AnalysisError("empty data stream")
    return out


@dataclass
class GradHistogram:
    edges: np.ndarray
    counts: np.ndarray
    log_scale: bool
    min: float
    max: float
    mean: float
    std: float


def grad_histogram(g_flat, bins: int = 50, log_scale: bool = False,
                   value_range: tuple[float, float] | None = None) -> GradHistogram:
    """Histogram with half-open bins ``[e_i, e_{i+1})`` except the last, which is closed.

    With ``log_scale`` the counts are of ``log10|g|`` over nonzero entries
    (zeros are counted in the first bin).
    """
    if bins < 2:
        raise AnalysisError("bins must be >= 2")
    g = _flat64(g_flat)
    vals = g
    if log_scale:
        nz = np.abs(g) > 0
        vals = np.where(nz, np.log10(np.where(nz, np.abs(g), 1.0)), -np.inf)
        finite = vals[np.isfinite(vals)]
        lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
        if value_range is not None:
            lo, hi = value_range
        vals = np.where(np.isfinite(vals), vals, lo)
    else:
        lo, hi = value_range if value_range is not None else (g.min(), g.max())
    if hi == lo:
        hi = lo + 1.0
    counts, edges = np.histogram(vals, bins=bins, range=(lo, hi))
    return GradHistogram(edges, counts, log_scale, float(g.min()), float(g.max()),
                         float(g.mean()), float(g.std()))


def flatten_grads(grads: dict[str, np.ndarray], names: Iterable[str] | None = None) -> np.ndarray:
    names = sorted(grads) if names is None else list(names)
    return np.concatenate([np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in names])
