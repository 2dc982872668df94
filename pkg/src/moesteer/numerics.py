"""Float64 arrays with a small tape-based reverse-mode autodiff, plus Adam.

Only the primitives needed by the surrogate, the steering optimizer and the
toy MoE trainer are provided. Every value is a ``numpy.float64`` array.

Usage::

    tape = Tape()
    w = tape.param(np.ones((3, 2)), "w")
    x = tape.const(np.arange(6.0).reshape(2, 3))
    loss = (x @ w).square().sum()
    grads = backward(tape, loss)
    grads["w"]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, OptimizerError

__all__ = [
    "Tape",
    "Var",
    "Gradients",
    "backward",
    "matmul",
    "concat",
    "stack",
    "softmax",
    "log_softmax",
    "bce_with_logits",
    "AdamState",
    "adam_step",
    "finite_difference_grad",
    "relative_error",
]


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64, copy=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Records primitive operations in execution order.

    A tape is single-threaded; independent tapes share nothing.
    """

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.names: list[str | None] = []
        # (output id, parent ids, vjp) in recording order
        self.records: list[tuple[int, tuple[int, ...], Callable]] = []

    def _new(self, value: np.ndarray, name: str | None = None) -> "Var":
        self.values.append(value)
        self.names.append(name)
        return Var(self, len(self.values) - 1)

    def param(self, value, name: str) -> "Var":
        """Leaf whose gradient is reported by :func:`backward`."""
        if name in self.names:
            raise ContractError(f"duplicate parameter name {name!r}")
        return self._new(_as_array(value), name)

    def const(self, value) -> "Var":
        return self._new(_as_array(value))

    def _record(self, value: np.ndarray, parents: Sequence["Var"], vjp: Callable) -> "Var":
        out = self._new(value)
        self.records.append((out.id, tuple(p.id for p in parents), vjp))
        return out

    def lift(self, value) -> "Var":
        if isinstance(value, Var):
            if value.tape is not self:
                raise ContractError("cannot mix nodes from different tapes")
            return value
        return self.const(value)

    def __len__(self) -> int:
        return len(self.values)


class Var:
    """Handle to one node on a :class:`Tape`."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, node_id: int) -> None:
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"

    # -- elementwise binary -------------------------------------------------
    def __add__(self, other) -> "Var":
        o = self.tape.lift(other)
        a, b = self.value, o.value
        return self.tape._record(
            a + b, (self, o), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Var":
        o = self.tape.lift(other)
        a, b = self.value, o.value
        return self.tape._record(
            a - b, (self, o), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
        )

    def __rsub__(self, other) -> "Var":
        return self.tape.lift(other) - self

    def __mul__(self, other) -> "Var":
        o = self.tape.lift(other)
        a, b = self.value, o.value
        return self.tape._record(
            a * b,
            (self, o),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Var":
        o = self.tape.lift(other)
        a, b = self.value, o.value
        return self.tape._record(
            a / b,
            (self, o),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other) -> "Var":
        return self.tape.lift(other) / self

    def __neg__(self) -> "Var":
        return self.tape._record(-self.value, (self,), lambda g: (-g,))

    def __matmul__(self, other) -> "Var":
        return matmul(self, other)

    def __getitem__(self, index) -> "Var":
        a = self.value
        shape = a.shape
        basic = all(
            isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
            for i in (index if isinstance(index, tuple) else (index,))
        )
        return self.tape._record(
            np.array(a[index], dtype=np.float64),
            (self,),
            lambda g: (_IndexedGrad(shape, index, g, basic),),
        )

    # -- elementwise unary --------------------------------------------------
    def square(self) -> "Var":
        a = self.value
        return self.tape._record(a * a, (self,), lambda g: (2.0 * a * g,))

    def sqrt(self) -> "Var":
        out = np.sqrt(self.value)
        return self.tape._record(out, (self,), lambda g: (0.5 * g / out,))

    def exp(self) -> "Var":
        out = np.exp(self.value)
        return self.tape._record(out, (self,), lambda g: (g * out,))

    def log(self) -> "Var":
        a = self.value
        return self.tape._record(np.log(a), (self,), lambda g: (g / a,))

    def abs(self) -> "Var":
        # subgradient 0 at exactly 0
        a = self.value
        return self.tape._record(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def sigmoid(self) -> "Var":
        out = _sigmoid(self.value)
        return self.tape._record(out, (self,), lambda g: (g * out * (1.0 - out),))

    def tanh(self) -> "Var":
        out = np.tanh(self.value)
        return self.tape._record(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self) -> "Var":
        a = self.value
        return self.tape._record(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0.0),))

    # -- reductions / shape ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Var":
        a = self.value
        out = np.asarray(a.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self.tape._record(out, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Var":
        a = self.value
        n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Var":
        a = self.value
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape._record(a.reshape(shape), (self,), lambda g: (g.reshape(a.shape),))

    def swapaxes(self, i: int, j: int) -> "Var":
        a = self.value
        return self.tape._record(
            np.ascontiguousarray(a.swapaxes(i, j)), (self,), lambda g: (g.swapaxes(i, j),)
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _IndexedGrad:
    """Gradient that is zero except at ``index``; scattered lazily by :func:`backward`."""

    __slots__ = ("shape", "index", "g", "basic")

    def __init__(self, shape, index, g, basic):
        self.shape, self.index, self.g, self.basic = shape, index, g, basic

    def scatter_into(self, buf: np.ndarray) -> None:
        if self.basic:
            buf[self.index] += self.g
        else:
            np.add.at(buf, self.index, self.g)


def matmul(a, b) -> Var:
    """Matrix product ``a @ b`` with numpy batching rules (both at least 2-d)."""
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(f"matmul needs 2-d operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            # fold batch dims into rows instead of forming per-batch outer products
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return _unbroadcast(ga, av.shape), gb

    return tape._record(av @ bv, (a, b), vjp)


def concat(items: Sequence[Var], axis: int = 0) -> Var:
    tape = items[0].tape
    vals = [tape.lift(v) for v in items]
    sizes = [v.value.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([v.value for v in vals], axis=axis)
    return tape._record(out, vals, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(items: Sequence[Var], axis: int = 0) -> Var:
    tape = items[0].tape
    vals = [tape.lift(v) for v in items]
    out = np.stack([v.value for v in vals], axis=axis)
    n = len(vals)
    return tape._record(
        out, vals, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


def softmax(x: Var, axis: int = -1) -> Var:
    a = x.value
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return x.tape._record(out, (x,), vjp)


def log_softmax(x: Var, axis: int = -1) -> Var:
    a = x.value
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return x.tape._record(out, (x,), vjp)


def bce_with_logits(logits: Var, targets) -> Var:
    """Elementwise binary cross-entropy on logits, stable for any magnitude.

    ``max(x, 0) - x*y + log1p(exp(-|x|))``. Reduce with ``.mean()`` for a batch loss.
    """
    x = logits.value
    y = np.broadcast_to(np.asarray(targets, dtype=np.float64), x.shape)
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return logits.tape._record(out, (logits,), lambda g: (g * (_sigmoid(x) - y),))


class Gradients(dict):
    """Parameter name -> gradient array. ``of(var)`` reads any node's gradient."""

    def __init__(self, named: dict, per_node: list):
        super().__init__(named)
        self._per_node = per_node

    def of(self, var: Var) -> np.ndarray:
        g = self._per_node[var.id]
        return np.zeros_like(var.value) if g is None else g


def backward(tape: Tape, loss: Var) -> Gradients:
    """Reverse pass from a scalar ``loss``; visits records in exact reverse order."""
    if loss.tape is not tape:
        raise ContractError("loss node belongs to a different tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    n = len(tape.values)
    grads: list[np.ndarray | None] = [None] * n
    # owned[i]: grads[i] is a private buffer that may be updated in place
    owned = [False] * n
    grads[loss.id] = np.ones_like(loss.value)
    for out_id, parent_ids, vjp in reversed(tape.records):
        g = grads[out_id]
        if g is None:
            continue
        for pid, contrib in zip(parent_ids, vjp(g)):
            if isinstance(contrib, _IndexedGrad):
                if grads[pid] is None:
                    grads[pid] = np.zeros(contrib.shape)
                elif not owned[pid]:
                    grads[pid] = grads[pid].copy()
                owned[pid] = True
                contrib.scatter_into(grads[pid])
            elif grads[pid] is None:
                grads[pid] = contrib
            elif owned[pid]:
                grads[pid] += contrib
            else:
                grads[pid] = grads[pid] + contrib
                owned[pid] = True
    named = {}
    for i, name in enumerate(tape.names):
        if name is not None:
            named[name] = grads[i] if grads[i] is not None else np.zeros_like(tape.values[i])
    return Gradients(named, grads)


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise DimensionError(
                f"gradient shape {np.shape(g)} != parameter shape {params[name].shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}", param=name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# -- finite-difference oracle -------------------------------------------------


def finite_difference_grad(
    fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``x``; independent of the tape."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(x))
        flat[i] = orig - step
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); 0 when both vanish."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)

