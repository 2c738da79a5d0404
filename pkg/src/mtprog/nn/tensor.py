"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one input requires a gradient. Outside a tape everything runs as
plain numpy, which is what inference and evaluation use.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array plus optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    """One recorded operation. ``backward`` maps the output gradient to a
    tuple of input gradients (``None`` where an input needs none)."""

    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]
    name: Optional[str] = None
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, so the list is already topological.
    ``backward`` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._keep: dict[int, Tensor] = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, op, inputs, output, backward, name=None, **ctx) -> Node:
        node = Node(op, tuple(inputs), output, backward, name, ctx)
        self.nodes.append(node)
        return node

    def nodes_of(self, op: str) -> list[Node]:
        return [n for n in self.nodes if n.op == op]

    def backward(
        self,
        loss: Tensor,
        overrides: Optional[dict] = None,
        accumulate: bool = True,
        seed_grad: Optional[np.ndarray] = None,
    ) -> dict[int, np.ndarray]:
        """Reverse pass from ``loss``.

        ``overrides`` maps an op name to ``fn(node, grad) -> tuple`` used
        instead of the node's own rule (guided backprop swaps the ReLU rule).
        With ``accumulate`` the gradients of leaf tensors that require grad
        are added into their ``.grad``; otherwise they are only available
        through :meth:`grad`.
        """
        if seed_grad is None:
            if loss.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed_grad = np.ones_like(loss.data)
        elif seed_grad.shape != loss.shape:
            raise ValueError("seed gradient shape must match the output")
        overrides = overrides or {}
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed_grad, dtype=np.float64)}
        keep: dict[int, Tensor] = {id(loss): loss}
        produced = set()
        for node in reversed(self.nodes):
            produced.add(id(node.output))
            g = grads.get(id(node.output))
            if g is None:
                continue
            rule = overrides.get(node.op)
            in_grads = rule(node, g) if rule is not None else node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    keep[key] = t
        if accumulate:
            for key, t in keep.items():
                if key in produced or key == id(loss):
                    continue
                g = grads[key]
                t.grad = g.copy() if t.grad is None else t.grad + g
        self._grads = grads
        self._keep = keep
        return grads

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        """Gradient of the last backward target w.r.t. any tensor on the tape."""
        return self._grads.get(id(t))


def backward(loss: Tensor, tape: Optional[Tape] = None, **kwargs) -> dict[int, np.ndarray]:
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("no tape recorded this computation")
    return tape.backward(loss, **kwargs)


def _needs_record(*inputs) -> Optional[Tape]:
    tape = active_tape()
    if tape is None:
        return None
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return tape
    return None


def make_op(op, inputs, out_data, backward, name=None, **ctx) -> Tensor:
    """Wrap ``out_data`` as a tensor and record it when a tape is listening."""
    tape = _needs_record(*inputs)
    out = Tensor(out_data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(op, inputs, out, backward, name=name, **ctx)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return make_op(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return make_op("scale", (a,), a.data * c, lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    return make_op("sum", (a,), a.data.sum(), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    return make_op(
        "mean", (a,), a.data.mean(), lambda g: (np.full(a.shape, float(g) / n),)
    )


def reshape(a: Tensor, shape) -> Tensor:
    return make_op("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), bw)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[:, start:stop]``."""

    def bw(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return make_op("columns", (a,), a.data[:, start:stop].copy(), bw)


def relu(a: Tensor, name: Optional[str] = None) -> Tensor:
    """max(0, x). The backward passes gradient only where x > 0 (zero at 0).

    Each call records its own node tagged ``op="relu"`` so a caller can swap
    the rule through ``Tape.backward(overrides=...)``.
    """
    mask = a.data > 0
    return make_op("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,), name=name)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = stable_sigmoid(a.data)
    return make_op("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))
