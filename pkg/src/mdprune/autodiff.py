"""Minimal dense tensors with reverse-mode automatic differentiation.

Everything is float64. A ``Tape`` records primitive ops in execution order
(which is already topological), and ``backward`` walks it once in reverse.
No broadcasting beyond scalar-times-tensor; shapes must match exactly.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable dense float64 array. Rejects NaN/Inf at construction."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite entries")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self):
        return self.data.shape

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    def __reduce__(self):
        return (Tensor, (np.asarray(self.data),))

    def __deepcopy__(self, memo):
        return Tensor(self.data)


class Var:
    """A node on the tape: a value plus vector-Jacobian callbacks."""

    __slots__ = ("value", "grad", "_vjps")

    def __init__(self, value, vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._vjps = vjps


class Tape:
    """Ordered op record; confined to one thread of execution."""

    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value) -> Var:
        if isinstance(value, Tensor):
            value = value.data
        v = Var(value)
        self.nodes.append(v)
        return v

    def _emit(self, value, vjps) -> Var:
        v = Var(value, tuple(vjps))
        self.nodes.append(v)
        return v


def _same_shape(a: Var, b: Var, op: str):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def add(tape: Tape, a: Var, b: Var) -> Var:
    _same_shape(a, b, "add")
    return tape._emit(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(tape: Tape, a: Var, b: Var) -> Var:
    _same_shape(a, b, "sub")
    return tape._emit(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(tape: Tape, a: Var, b: Var) -> Var:
    _same_shape(a, b, "mul")
    return tape._emit(a.value * b.value,
                      [(a, lambda g: g * b.value), (b, lambda g: g * a.value)])


def smul(tape: Tape, c: float, a: Var) -> Var:
    c = float(c)
    return tape._emit(c * a.value, [(a, lambda g: c * g)])


def matmul(tape: Tape, a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.value.shape} vs {b.value.shape}")
    return tape._emit(a.value @ b.value,
                      [(a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)])


def transpose(tape: Tape, a: Var) -> Var:
    return tape._emit(a.value.T, [(a, lambda g: g.T)])


def absval(tape: Tape, a: Var) -> Var:
    # subgradient 0 at 0
    s = np.sign(a.value)
    return tape._emit(np.abs(a.value), [(a, lambda g: g * s)])


def relu(tape: Tape, a: Var) -> Var:
    m = (a.value > 0).astype(np.float64)
    return tape._emit(np.maximum(a.value, 0.0), [(a, lambda g: g * m)])


def row_softmax(tape: Tape, a: Var) -> Var:
    if a.value.ndim != 2:
        raise ShapeError(f"row-softmax: expected 2-d input, got {a.value.shape}")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return tape._emit(y, [(a, vjp)])


def frobenius_sq(tape: Tape, a: Var) -> Var:
    return tape._emit(np.sum(a.value * a.value), [(a, lambda g: 2.0 * g * a.value)])


def take_rows(tape: Tape, a: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return tape._emit(a.value[idx], [(a, vjp)])


def cross_entropy_logits(tape: Tape, logits: Var, labels: np.ndarray) -> Var:
    """Mean next-token cross entropy over rows, from raw logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.value.shape[0],):
        raise ShapeError(
            f"cross-entropy-with-logits: shape mismatch {logits.value.shape} vs {labels.shape}")
    n = logits.value.shape[0]
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1)) + logits.value.max(axis=1)
    nll = lse - logits.value[np.arange(n), labels]
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return float(g) * d / n

    return tape._emit(np.float64(nll.mean()), [(logits, vjp)])


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": smul,
    "abs": absval,
    "relu": relu,
    "row-softmax": row_softmax,
    "cross-entropy-with-logits": cross_entropy_logits,
    "frobenius-norm-squared": frobenius_sq,
    "transpose": transpose,
}


def forward_primitive(tape: Tape, kind: str, *inputs) -> Var:
    """Dispatch a primitive by name. ``inputs`` are Vars (plus raw scalars
    or index/label arrays where the op calls for them)."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind {kind!r}")
    return _PRIMITIVES[kind](tape, *inputs)


def backward(tape: Tape, output: Var, seed=None) -> None:
    """Reverse sweep. Fills ``.grad`` on every node; unreached leaves get
    zeros. Visits each node exactly once."""
    if not tape.nodes:
        raise ValueError("backward before forward: tape is empty")
    if output not in tape.nodes:
        raise ValueError("output is not on this tape")
    if seed is None:
        seed = np.ones_like(output.value)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.value.shape:
            raise ShapeError(
                f"seed shape {seed.shape} does not match output shape {output.value.shape}")
    for node in tape.nodes:
        node.grad = np.zeros_like(node.value)
    output.grad = np.array(seed, dtype=np.float64)
    for node in reversed(tape.nodes):
        g = node.grad
        for parent, vjp in node._vjps:
            parent.grad = parent.grad + vjp(g)
