"""Dense tensors with tape-based reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    return np.ascontiguousarray(arr, dtype=dtype)


class DTensor:
    """N-d float array that can take part in reverse-mode differentiation.

    Storage is float32 unless constructed from float64 data (used by the
    finite-difference oracle). ``grad`` is filled on leaves by ``backward``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[DTensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._id = next(_counter)
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> DTensor:
        return DTensor(self.data.copy())

    def astype(self, dtype) -> DTensor:
        return DTensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self._op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators (implemented in ops) ----------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, DTensor):
            return ops.div(self, other)
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: DTensor | None = None) -> DTensor:
    if isinstance(x, DTensor):
        return x
    dtype = like.dtype if like is not None else None
    return DTensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def result_dtype(*tensors: DTensor):
    return np.float64 if any(t.dtype == np.float64 for t in tensors) else np.float32


def make_node(data: np.ndarray, parents: Sequence[DTensor], backward_fn, op: str) -> DTensor:
    """Wrap an op result, recording it on the tape when any parent needs grad."""
    dtype = result_dtype(*parents) if parents else None
    out = DTensor(data, dtype=dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


@dataclass
class ComputeGraph:
    """Reachable nodes of one forward pass in topological (creation) order."""

    nodes: list[DTensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: DTensor) -> ComputeGraph:
        seen: dict[int, DTensor] = {}
        stack = [out]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        # ids are handed out at creation, so parents always precede children
        return cls(nodes=sorted(seen.values(), key=lambda n: n._id))


def backward(loss: DTensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    graph = ComputeGraph.from_output(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data, dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = g.astype(node.dtype)
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"op {node._op} produced grad of shape {pg.shape} for operand {parent.shape}"
                )
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = np.asarray(pg, dtype=np.float64)
    for node in graph.nodes:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True
