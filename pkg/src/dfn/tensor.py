"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation (see :mod:`dfn.ops`) records a :class:`Node`
holding its inputs and a closure that maps the output gradient to input
gradients. Nodes carry a monotonically increasing id, so creation order is a
valid topological order; :func:`backward` walks the reachable nodes in reverse
id order and visits each exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import UsageError

NARROW = np.float32
WIDE = np.float64

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class Node:
    """One recorded operation of the differentiation graph."""

    kind: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    """N-dimensional array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(NARROW)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep ``grad`` on this non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # thin operator sugar; the real work lives in dfn.ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other if isinstance(other, Tensor) else Tensor(np.asarray(other, self.dtype)))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__


def make_result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    kind: str,
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op's output, recording a graph node when any input needs grad."""
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.node = Node(kind, tuple(inputs), backward_fn)
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Non-leaf tensors reachable from ``root``, ordered so inputs precede outputs."""
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or n.id in seen:
            continue
        seen.add(n.id)
        order.append(t)
        stack.extend(n.inputs)
    order.sort(key=lambda t: t.node.id)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf needing grad.

    Gradients add into any existing ``grad`` buffer, so tensors used by several
    consumers (or across several backward calls) receive the sum.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out_t in reversed(topological_order(loss)):
        g_out = grads.pop(id(out_t), None)
        if g_out is None:
            continue
        if out_t._retain:
            _accumulate(out_t, g_out)
        node = out_t.node
        for t, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                raise UsageError(f"{node.kind} produced grad of shape {g.shape} for input {t.shape}")
            if t.node is None:
                _accumulate(t, g)
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = g if prev is None else prev + g


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g
