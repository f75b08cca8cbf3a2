"""Hot kernels of the sparse update path.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``SIFTLAB_PURE_PYTHON=1`` to force the fallback.  Both
backends perform the same IEEE operations in the same order, so results
agree bitwise.
"""
from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _pykernels

try:
    if os.environ.get("SIFTLAB_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _ckernels
except ImportError:
    _ckernels = None

_impl: ModuleType = _ckernels if _ckernels is not None else _pykernels
BACKEND = "cython" if _impl is _ckernels else "python"


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def backend_module(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "cython" and _ckernels is not None:
        return _ckernels
    raise ValueError(f"kernel backend {name!r} not available")


def set_backend(name: str) -> None:
    global _impl, BACKEND
    _impl = backend_module(name)
    BACKEND = name


def _check_idx(idx: np.ndarray, n: int) -> None:
    if idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise IndexError(f"mask index out of bounds for tensor of {n} elements")


def gather_add(acc: np.ndarray, grad_flat: np.ndarray, idx: np.ndarray) -> None:
    """``acc[j] += grad_flat[idx[j]]``; ``idx`` sorted ascending."""
    _check_idx(idx, grad_flat.size)
    _impl.gather_add(acc, grad_flat, idx)


def sparse_adamw(delta, base, m, v, g, *, lr, beta1, beta2, eps, weight_decay, step) -> None:
    """One AdamW step on masked entries, in place on ``delta``, ``m`` and ``v``.

    ``base`` holds the pre-trained values at the masked entries, so decay acts
    on ``base + delta``.  ``step`` is the 1-based optimizer step.
    """
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    _impl.sparse_adamw(delta, base, m, v, g, lr, beta1, beta2, eps, weight_decay, bc1, bc2)


def scatter_merge(flat_param: np.ndarray, idx: np.ndarray, base: np.ndarray, delta: np.ndarray) -> None:
    """``flat_param[idx[j]] = base[j] + delta[j]``."""
    _check_idx(idx, flat_param.size)
    _impl.scatter_merge(flat_param, idx, base, delta)
