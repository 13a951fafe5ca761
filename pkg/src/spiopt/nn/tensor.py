"""Tape-style reverse-mode differentiation over float64 numpy arrays.

Every primitive returns a :class:`Tensor` that remembers its inputs and a
closure mapping the output gradient to input gradients. ``backward`` sorts the
graph topologically (the computation record) and replays it in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class GradientError(RuntimeError):
    """Raised on misuse of the backward pass."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    """Wrap a primitive's output, attaching graph edges only when needed."""
    parents = tuple(parents)
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def record(loss: Tensor) -> list[Tensor]:
    """Return the nodes reachable from ``loss`` in topological order.

    Every node's inputs precede it; the last entry is ``loss`` itself.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, accumulate: bool = False) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaves listed in ``params`` that the loss does not reach get exact zeros.
    Existing leaf gradients raise unless ``accumulate`` is set, so a forgotten
    optimizer step cannot silently double-count.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed and not accumulate:
        raise GradientError("backward already ran on this graph; rebuild it or pass accumulate=True")
    params = list(params) if params is not None else []
    nodes = record(loss) if loss.requires_grad else []
    leaves = [n for n in nodes if n.is_leaf] + params
    if not accumulate:
        for leaf in leaves:
            if leaf.grad is not None:
                raise GradientError(
                    f"gradient of {leaf.name or leaf!r} already populated; clear it or pass accumulate=True"
                )

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GradientError(f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    loss._consumed = True
