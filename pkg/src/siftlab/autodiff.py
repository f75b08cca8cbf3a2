"""Dense reverse-mode autodiff over numpy arrays, with per-parameter gradient hooks.

A :class:`Tape` owns the trainable parameters and records every operation
applied to them.  ``tape.backward(loss)`` walks the record in reverse and
finalizes each parameter gradient as soon as its last contribution has been
accumulated.  A parameter with a registered hook never keeps its dense
gradient: the buffer is handed to the hook through a read-only
:class:`GradHookReceipt` and released the moment the hook returns, so with
hooks on every parameter at most one dense parameter gradient is alive at a
time.  Parameters without a hook retain their gradient on ``tape.grads``.

Storage dtype is a per-tape choice (float32 or float64); reductions and
matmuls accumulate in float64 and are cast back to the storage dtype.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

_ids = itertools.count()
ACC = np.float64


class AutodiffError(RuntimeError):
    pass


class BackwardError(AutodiffError):
    """backward() called on a consumed tape or on a foreign/non-scalar loss."""


class HookError(AutodiffError):
    pass


class StaleGradientError(AutodiffError):
    """A hook receipt was read after its hook returned."""


class ShapeError(ValueError):
    pass


class NonFiniteLossError(ArithmeticError):
    pass


class Tensor:
    """Array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "id", "tape", "name", "requires_grad", "_gen")

    def __init__(self, data, tape: Optional["Tape"] = None, name: str | None = None,
                 requires_grad: bool = False):
        self.data = data
        self.id = next(_ids)
        self.tape = tape
        self.name = name
        self.requires_grad = requires_grad
        self._gen = tape.generation if tape is not None else -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar; every operator maps onto a primitive below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class GradHookReceipt:
    """What a gradient hook gets: the parameter id and a read-only gradient view.

    ``grad`` is valid only while the hook runs; afterwards the underlying
    buffer is dropped by the tape and reading ``grad`` raises
    :class:`StaleGradientError`.
    """

    __slots__ = ("param_id", "name", "step_index", "_view")

    def __init__(self, param_id: int, name: str | None, step_index: int, view: np.ndarray):
        self.param_id = param_id
        self.name = name
        self.step_index = step_index
        self._view = view

    @property
    def grad(self) -> np.ndarray:
        if self._view is None:
            raise StaleGradientError(
                f"gradient of {self.name or self.param_id} was released after its hook returned")
        return self._view

    def _release(self) -> None:
        self._view = None


@dataclass
class GradBufferStats:
    """Instrumentation for dense parameter-gradient buffers."""

    live: int = 0
    peak: int = 0
    allocations: int = 0

    def alloc(self) -> None:
        self.live += 1
        self.allocations += 1
        self.peak = max(self.peak, self.live)

    def free(self) -> None:
        self.live -= 1

    def reset_peak(self) -> None:
        self.peak = self.live


class Tape:
    """Record of one forward pass plus the persistent parameter/hook registry."""

    def __init__(self, dtype=np.float64, trainable: Iterable[str] | None = None):
        self.dtype = np.dtype(dtype)
        self.trainable = None if trainable is None else frozenset(trainable)
        self._by_name: dict[str, Tensor] = {}
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise TypeError(f"unsupported element type {self.dtype}")
        self.nodes: list[Node] = []
        self.params: dict[int, Tensor] = {}
        self.hooks: dict[int, Callable[[GradHookReceipt], None]] = {}
        self.grads: dict[int, np.ndarray] = {}
        self.generation = 0
        self.step_index = 0
        self.stats = GradBufferStats()
        self._spent = False

    # -- registration -------------------------------------------------
    def param(self, array: np.ndarray, name: str | None = None) -> Tensor:
        """Wrap ``array`` (no copy) as a trainable tensor on this tape."""
        if array.dtype != self.dtype:
            raise TypeError(f"param {name!r} has dtype {array.dtype}, tape uses {self.dtype}")
        t = Tensor(array, tape=self, name=name, requires_grad=True)
        self.params[t.id] = t
        return t

    def bind(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        """Map a named parameter set onto tensors of this tape.

        Trainable names get one stable tensor per name (hooks stay attached
        across passes); everything else is wrapped as a constant.
        """
        bound = {}
        for name, arr in params.items():
            if self.trainable is not None and name not in self.trainable:
                bound[name] = self.constant(arr, name)
                continue
            t = self._by_name.get(name)
            if t is None:
                t = self._by_name[name] = self.param(arr, name)
            elif t.data is not arr:
                if arr.shape != t.data.shape or arr.dtype != self.dtype:
                    raise ShapeError(f"rebinding {name!r} with shape {arr.shape}, expected {t.shape}")
                t.data = arr
            bound[name] = t
        return bound

    def named(self, name: str) -> Tensor:
        return self._by_name[name]

    def discard(self) -> None:
        """Drop the current record without differentiating it."""
        self.nodes = []
        self._spent = False
        self.generation += 1

    def constant(self, array, name: str | None = None) -> Tensor:
        arr = np.asarray(array)
        if arr.dtype.kind == "f":
            arr = arr.astype(self.dtype, copy=False)
        return Tensor(arr, tape=self, name=name, requires_grad=False)

    def register_grad_hook(self, param: Tensor | int, consumer: Callable[[GradHookReceipt], None]) -> None:
        pid = param if isinstance(param, int) else param.id
        if pid not in self.params:
            raise HookError(f"tensor {pid} is not a trainable parameter of this tape")
        if pid in self.hooks:
            raise HookError(f"parameter {self.params[pid].name or pid} already has a hook")
        self.hooks[pid] = consumer
        if pid in self.grads:
            del self.grads[pid]
            self.stats.free()

    def grad(self, param: Tensor | int) -> np.ndarray:
        pid = param if isinstance(param, int) else param.id
        return self.grads[pid]

    def zero_grad(self) -> None:
        for _ in self.grads:
            self.stats.free()
        self.grads.clear()

    # -- recording ----------------------------------------------------
    def _begin_pass_if_needed(self) -> None:
        if self._spent:
            self._spent = False
            self.nodes = []

    def _record(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
        self._begin_pass_if_needed()
        out = Tensor(data, tape=self, requires_grad=True)
        self.nodes.append(Node(out, inputs, backward, op))
        return out

    # -- backward -----------------------------------------------------
    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(param) to every parameter.

        Hooked parameters receive exactly one hook call each; the others keep
        their gradient in ``self.grads`` (previous values are replaced).
        """
        if loss.tape is not self:
            raise BackwardError("loss was not produced on this tape")
        if self._spent or loss._gen != self.generation:
            raise BackwardError("tape already consumed by backward(); run forward again")
        if loss.size != 1:
            raise BackwardError(f"loss must be scalar, got shape {loss.shape}")

        self.zero_grad()
        first_use: dict[int, int] = {}
        for i, node in enumerate(self.nodes):
            for t in node.inputs:
                if t.id in self.params and t.id not in first_use:
                    first_use[t.id] = i
        finalize_at: dict[int, list[int]] = {}
        for pid, i in first_use.items():
            finalize_at.setdefault(i, []).append(pid)

        flowing: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        pending: dict[int, np.ndarray] = {}
        done: set[int] = set()

        for i in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[i]
            g = flowing.pop(node.out.id, None)
            due = finalize_at.get(i, ())
            if g is not None:
                grads = node.backward(g)
                last = {t.id: k for k, t in enumerate(node.inputs)}
                for k, (inp, gi) in enumerate(zip(node.inputs, grads)):
                    if gi is None or not inp.requires_grad:
                        continue
                    if inp.id in self.params:
                        buf = pending.get(inp.id)
                        if buf is None:
                            self.stats.alloc()
                            pending[inp.id] = np.array(gi, dtype=self.dtype, copy=True)
                        else:
                            buf += gi
                        # release as soon as the last contribution lands
                        if inp.id in due and last[inp.id] == k:
                            self._finalize(inp.id, pending.pop(inp.id))
                            done.add(inp.id)
                    else:
                        prev = flowing.get(inp.id)
                        flowing[inp.id] = gi if prev is None else prev + gi
                del grads
            for pid in due:
                if pid not in done:
                    self._finalize(pid, pending.pop(pid, None))

        for pid in self.params:
            if pid not in first_use:
                self._finalize(pid, None)

        self.nodes = []
        self._spent = True
        self.generation += 1
        self.step_index += 1

    def _finalize(self, pid: int, buf: Optional[np.ndarray]) -> None:
        if buf is None:
            self.stats.alloc()
            buf = np.zeros_like(self.params[pid].data)
        hook = self.hooks.get(pid)
        if hook is None:
            self.grads[pid] = buf
            return
        view = buf.view()
        view.flags.writeable = False
        receipt = GradHookReceipt(pid, self.params[pid].name, self.step_index, view)
        try:
            hook(receipt)
        finally:
            receipt._release()
            del view, buf
            self.stats.free()


# ----------------------------------------------------------------------
# primitives

def _tape_of(*xs) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _as_tensor(x, tape: Optional[Tape]) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if tape is not None:
        return tape.constant(x)
    return Tensor(np.asarray(x, dtype=np.float64))


def _needs_grad(*xs: Tensor) -> bool:
    return any(x.requires_grad for x in xs)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None or not _needs_grad(*inputs):
        return Tensor(data, tape=tape)
    return tape._record(data, inputs, backward, op)


def _dtype_of(*xs: Tensor):
    for x in xs:
        if x.data.dtype.kind == "f":
            return x.data.dtype
    return np.dtype(np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)), dtype=ACC)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=ACC)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    dt = _dtype_of(a, b)
    out = np.add(a.data, b.data).astype(dt, copy=False)

    def backward(g):
        return (_unbroadcast(g, a.shape).astype(dt, copy=False),
                _unbroadcast(g, b.shape).astype(dt, copy=False))

    return _emit(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    dt = _dtype_of(a, b)
    out = np.multiply(a.data, b.data).astype(dt, copy=False)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape).astype(dt, copy=False) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape).astype(dt, copy=False) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward, "mul")


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    return add(a, mul(_as_tensor(b, tape), -1.0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching rules; accumulates in float64."""
    dt = _dtype_of(a, b)
    a64, b64 = a.data.astype(ACC, copy=False), b.data.astype(ACC, copy=False)
    if a64.ndim < 2 or b64.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a64.shape[-1] != b64.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a64, b64).astype(dt, copy=False)

    def backward(g):
        g64 = g.astype(ACC, copy=False)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g64, np.swapaxes(b64, -1, -2)), a.shape).astype(dt, copy=False)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a64, -1, -2), g64), b.shape).astype(dt, copy=False)
        return ga, gb

    return _emit(out, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0).astype(x.data.dtype, copy=False)

    def backward(g):
        return (g * (x.data > 0),)

    return _emit(out, (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = (0.5 * xd * (1.0 + t)).astype(xd.dtype, copy=False)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return ((g * d).astype(xd.dtype, copy=False),)

    return _emit(out, (x,), backward, "gelu")


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis. Positions where ``mask`` is False get probability 0."""
    z = x.data.astype(ACC)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = y.astype(x.data.dtype, copy=False)

    def backward(g):
        g64 = g.astype(ACC, copy=False)
        gx = y * (g64 - (g64 * y).sum(axis=-1, keepdims=True))
        return (gx.astype(x.data.dtype, copy=False),)

    return _emit(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    dt = x.data.dtype
    x64 = x.data.astype(ACC)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gain.data + bias.data).astype(dt, copy=False)

    def backward(g):
        g64 = g.astype(ACC, copy=False)
        gxhat = g64 * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g64 * xhat, gain.shape)
        gbias = _unbroadcast(g64, bias.shape)
        return (gx.astype(dt, copy=False), ggain.astype(dt, copy=False), gbias.astype(dt, copy=False))

    return _emit(out, (x, gain, bias), backward, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros(table.shape, dtype=ACC)
        np.add.at(gt, ids, g)
        return (gt.astype(table.data.dtype, copy=False),)

    return _emit(out, (table,), backward, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N, C) against integer ``targets`` (N,)."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy wants (N,C) logits and (N,) targets, got "
                         f"{logits.shape} and {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError("target class out of range")
    n = logits.shape[0]
    z = logits.data.astype(ACC)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, targets]).sum() / n
    out = np.asarray(loss, dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return ((p * (float(g) / n)).astype(logits.data.dtype, copy=False),)

    return _emit(out, (logits,), backward, "cross_entropy")


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(dtype=ACC), dtype=x.data.dtype)

    def backward(g):
        return (np.full(x.shape, float(g) / x.size, dtype=x.data.dtype),)

    return _emit(out, (x,), backward, "mean")


# structural views: no arithmetic, only index bookkeeping

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _emit(out, (x,), backward, "transpose")


def take(x: Tensor, index) -> Tensor:
    """Basic-slicing read ``x[index]``."""
    out = x.data[index]

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        gx[index] = g
        return (gx,)

    return _emit(out, (x,), backward, "take")


def check_finite_loss(loss: Tensor) -> Tensor:
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLossError(f"non-finite loss {loss.item()!r}")
    return loss
