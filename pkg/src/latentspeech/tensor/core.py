"""Tensor type, graph tracing, reverse-mode backward and forward-mode jvp.

Values are float64 numpy arrays. Every differentiable op is created through
:func:`apply`, which records a backward rule (vector-Jacobian product) when any
input requires a gradient and eagerly propagates tangents when any input
carries one. Tangents are plain arrays and never enter the graph, so anything
computed from them is implicitly gradient-detached.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError, ValueError):
    pass


class ConfigurationError(TensorError, ValueError):
    pass


class UnsupportedOpError(TensorError, NotImplementedError):
    """Raised when a tangent reaches an op that has no forward-mode rule."""


_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("op", "parents", "vjp", "live")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        # which parents required grad when the op ran; later toggles do not reopen the edge
        self.live = tuple(p.requires_grad for p in parents)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tangent", "_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tangent: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator overloads live in ops.py to keep this module dependency-free
    def zero_grad(self) -> None:
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable, jvp: Callable | None) -> Tensor:
    """Wrap ``out`` as the result of ``op`` applied to ``parents``.

    ``vjp(g)`` returns one gradient (or None) per parent. ``jvp(*tangents)``
    receives one tangent array (or None) per parent and returns the output
    tangent.
    """
    res = Tensor(out)
    if grad_enabled() and any(p.requires_grad for p in parents):
        res.requires_grad = True
        res._node = Node(op, tuple(parents), vjp)
    tangents = [p.tangent for p in parents]
    if any(t is not None for t in tangents):
        if jvp is None:
            raise UnsupportedOpError(f"op {op!r} has no tangent rule")
        res.tangent = jvp(*tangents)
    return res


@dataclass(frozen=True)
class OpRecord:
    op: str
    input_ids: tuple
    output_id: int


class Graph:
    """Topologically ordered view of the computation that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p, live in zip(reversed(t._node.parents), reversed(t._node.live)):
                    if live and id(p) not in seen:
                        stack.append((p, False))
        self.tensors = order
        ids = {id(t): i for i, t in enumerate(order)}
        self.records = [
            OpRecord(t._node.op, tuple(ids[id(p)] for p in t._node.parents if id(p) in ids), ids[id(t)])
            for t in order
            if t._node is not None
        ]

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.tensors if t._node is None]

    def backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Return gradients keyed by ``id(tensor)`` for every leaf on the graph."""
        out = self.output
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data) if seed is None else seed}
        leaf_grads: dict[int, np.ndarray] = {}
        for t in reversed(self.tensors):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                leaf_grads[id(t)] = g
                continue
            for p, live, pg in zip(t._node.parents, t._node.live, t._node.vjp(g)):
                if pg is None or not live:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        return leaf_grads


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, accumulate: bool = True):
    """Reverse-mode gradient of a scalar ``loss``.

    With ``wrt`` given, returns a list of gradient arrays in that order (zeros
    for tensors the loss does not depend on). Otherwise returns a dict mapping
    each reachable requires-grad leaf to its gradient. When ``accumulate`` is
    true, gradients are also summed into ``leaf.grad``.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: list[Tensor] = []
    else:
        graph = Graph(loss)
        leaf_grads = graph.backward()
        leaves = graph.leaves
    if accumulate:
        for leaf in leaves:
            g = leaf_grads.get(id(leaf))
            if g is not None:
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if wrt is not None:
        return [leaf_grads.get(id(t), np.zeros_like(t.data)) for t in wrt]
    return {leaf: leaf_grads[id(leaf)] for leaf in leaves if id(leaf) in leaf_grads}


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no gradient path and no tangent. Shares the array."""
    return Tensor(as_tensor(x).data)


def _seed(x: Tensor, direction) -> Tensor:
    direction = np.asarray(direction.data if isinstance(direction, Tensor) else direction, dtype=np.float64)
    if direction.shape != x.shape:
        direction = np.broadcast_to(direction, x.shape).copy() if direction.size == 1 else direction
    if direction.shape != x.shape:
        raise ShapeError(f"tangent shape {direction.shape} != primal shape {x.shape}")
    if x.requires_grad:
        out = apply("seed", x.data, (x,), lambda g: (g,), lambda t: t)
    else:
        out = Tensor(x.data)
    out.tangent = direction
    return out


@dataclass
class DualTensor:
    primal: Tensor
    tangent: Tensor

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise ShapeError("primal and tangent shapes differ")


def jvp(f: Callable, at, direction) -> DualTensor:
    """Evaluate ``f`` at ``at`` together with ``J_f(at) @ direction``.

    ``at`` and ``direction`` may be single tensors or matching tuples. The
    returned primal keeps its backward graph (if any input or closed-over
    parameter requires grad); the tangent is detached.
    """
    single = not isinstance(at, (tuple, list))
    ats = (at,) if single else tuple(at)
    dirs = (direction,) if single else tuple(direction)
    if len(ats) != len(dirs):
        raise ShapeError("need one direction per primal input")
    seeded = [_seed(as_tensor(a), d) for a, d in zip(ats, dirs)]
    out = f(*seeded)
    tan = out.tangent if out.tangent is not None else np.zeros_like(out.data)
    out.tangent = None
    return DualTensor(out, Tensor(tan))
