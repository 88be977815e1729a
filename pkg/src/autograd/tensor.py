"""
Dense float64 tensors with reverse-mode gradients.

A Tensor records the op that produced it and the tensors it was computed from.
``Graph.from_output`` orders that record topologically and ``Graph.backward``
walks it in reverse, accumulating gradients per node. Tensors created while
``no_grad()`` is active carry no history, which is how teacher outputs are
kept out of every loss graph.
"""
import contextlib
import logging
import threading
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_GRAD_STATE = threading.local()


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible dimensions."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (per thread)."""
    previous = is_grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


def is_grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


class Tensor:
    """An immutable float64 array plus the record of how it was computed."""

    __slots__ = ("data", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"expected a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # Arithmetic with other tensors of identical shape or with Python scalars.
    def __add__(self, other):
        from src.autograd import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from src.autograd import ops
        return ops.add(self, ops.scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        from src.autograd import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from src.autograd import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from src.autograd import ops
        return ops.gather(self, index)

    def reshape(self, *shape):
        from src.autograd import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from src.autograd import ops
        return ops.total(self)


def make_node(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result, attaching history when any parent requires gradients."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Graph:
    """Topologically ordered record of the computation that produced ``output``."""

    def __init__(self, nodes: List[Tensor], output: Tensor):
        self.nodes = nodes
        self.output = output

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        # Iterative post-order so deep graphs do not hit the recursion limit.
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order, output)

    def backward(self) -> Dict[int, np.ndarray]:
        """Return gradients of the scalar output keyed by ``id`` of each node."""
        if self.output.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {self.output.shape}")
        grads: Dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        for node in reversed(self.nodes):
            grad = grads.get(id(node))
            if grad is None or node._backward is None:
                continue
            parent_grads = node._backward(grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if pgrad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pgrad
                else:
                    grads[key] = pgrad
        return grads


def backward(loss: Tensor, params) -> Dict[str, np.ndarray]:
    """
    Gradients of a scalar loss for every entry of a ParamSet.

    Parameters that do not take part in the graph get an all-zero gradient.
    """
    if loss.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    grads = Graph.from_output(loss).backward() if loss.requires_grad else {}
    result: Dict[str, np.ndarray] = {}
    for name, tensor in params.items():
        g = grads.get(id(tensor))
        result[name] = np.zeros_like(tensor.data) if g is None else g
    return result
