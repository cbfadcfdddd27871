"""
Dense 4-D tensors with define-by-run reverse-mode differentiation.

Tensors are (n, c, h, w) float64 arrays. Operations executed while a
``Graph`` is active are recorded together with a backward rule, and
``Graph.backward`` walks those records in reverse order, accumulating
gradients into the leaf tensors that asked for them.

Outside of any active graph the same operations simply compute values.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from app.errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

Dims = tuple[int, int, int, int]
BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]

# One graph stack per thread: a Graph is driven by a single thread.
_state = threading.local()


class Tensor4:
    """A (batch, channel, height, width) array with an optional gradient slot."""

    def __init__(
        self,
        data: np.ndarray | Sequence,
        requires_grad: bool = False,
        name: str = "",
        copy: bool = True,
    ):
        array = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if array.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dimensions, got shape {array.shape}")
        if min(array.shape) < 1:
            raise ShapeError(f"Tensor4 dimensions must all be >= 1, got {array.shape}")
        self.data = np.ascontiguousarray(array)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def zeros(cls, dims: Dims, requires_grad: bool = False, name: str = "") -> "Tensor4":
        return cls(np.zeros(dims), requires_grad=requires_grad, name=name, copy=False)

    @classmethod
    def ones(cls, dims: Dims, requires_grad: bool = False, name: str = "") -> "Tensor4":
        return cls(np.ones(dims), requires_grad=requires_grad, name=name, copy=False)

    @classmethod
    def full(cls, dims: Dims, value: float, name: str = "") -> "Tensor4":
        return cls(np.full(dims, float(value)), name=name, copy=False)

    @classmethod
    def scalar(cls, value: float, requires_grad: bool = False, name: str = "") -> "Tensor4":
        return cls(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad, name=name, copy=False)

    @classmethod
    def from_values(cls, values: Iterable[float], dims: Dims, requires_grad: bool = False) -> "Tensor4":
        """Build a tensor from a flat row-major sequence of values."""
        flat = np.asarray(list(values), dtype=np.float64)
        expected = int(np.prod(dims))
        if flat.size != expected:
            raise ShapeError(f"{flat.size} values cannot fill dims {dims} ({expected} entries)")
        return cls(flat.reshape(dims), requires_grad=requires_grad, copy=False)

    @classmethod
    def uniform(
        cls,
        dims: Dims,
        rng: np.random.Generator,
        low: float = -1.0,
        high: float = 1.0,
        requires_grad: bool = False,
    ) -> "Tensor4":
        return cls(rng.uniform(low, high, size=dims), requires_grad=requires_grad, copy=False)

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor dims {self.dims}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def detach(self) -> "Tensor4":
        return Tensor4(self.data, name=self.name)

    def __add__(self, other: "Tensor4 | float") -> "Tensor4":
        return add(self, _as_tensor(other, self.dims))

    def __sub__(self, other: "Tensor4 | float") -> "Tensor4":
        return subtract(self, _as_tensor(other, self.dims))

    def __mul__(self, other: "Tensor4 | float") -> "Tensor4":
        if isinstance(other, Tensor4):
            return elementwise_mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor4 | float") -> "Tensor4":
        return divide(self, _as_tensor(other, self.dims))

    def __neg__(self) -> "Tensor4":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor4(dims={self.dims}{label}, requires_grad={self.requires_grad})"


def _as_tensor(value: "Tensor4 | float", dims: Dims) -> Tensor4:
    return value if isinstance(value, Tensor4) else Tensor4.full(dims, value)


@dataclass
class Node:
    """One recorded operation: inputs, output and how to push gradients back."""
    op: str
    inputs: tuple[Tensor4, ...]
    output: Tensor4
    rule: BackwardRule


class Graph:
    """
    Ordered record of the operations executed while the graph is active.

    Use as a context manager; operations whose inputs require gradients
    are appended in execution order, which is a topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._producers: dict[int, int] = {}

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _graph_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, tensor: Tensor4) -> bool:
        return id(tensor) in self._producers

    def record(self, node: Node) -> None:
        self._producers[id(node.output)] = len(self.nodes)
        self.nodes.append(node)

    def backward(self, root: Tensor4) -> None:
        """
        Accumulate d(root)/d(leaf) into every leaf that requires gradients.

        Intermediate gradients live only for the duration of the call, so
        running backward twice without zeroing doubles the leaf gradients.

        Args:
            root: Single-element tensor produced by this graph
        """
        if root.size != 1:
            raise GraphError(f"backward needs a scalar root, got dims {root.dims}")
        position = self._producers.get(id(root))
        if position is None:
            raise GraphError("root tensor was not produced by this graph")

        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes[: position + 1]):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.rule(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in self._producers:
                    pending[key] = pending[key] + grad if key in pending else grad
                else:
                    tensor.accumulate_grad(grad)

        logger.debug(f"Backward pass visited {position + 1} recorded operations")


def _graph_stack() -> list[Graph]:
    stack = getattr(_state, "graphs", None)
    if stack is None:
        stack = []
        _state.graphs = stack
    return stack


def current_graph() -> Graph | None:
    """Return the innermost active graph of the calling thread, if any."""
    stack = _graph_stack()
    return stack[-1] if stack else None


def backward(graph: Graph, root: Tensor4) -> None:
    graph.backward(root)


def zero_grad(tensors: Iterable[Tensor4]) -> None:
    for tensor in tensors:
        tensor.zero_grad()


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor4], rule: BackwardRule) -> Tensor4:
    """
    Wrap a freshly computed array as a tensor and record it when needed.

    The node is recorded only inside an active graph and only when at
    least one input requires gradients.

    Args:
        op: Operation name, used for debugging and gradient reports
        data: Output values (taken over without copying)
        inputs: Tensors the output was computed from
        rule: Maps the output gradient to one gradient (or None) per input

    Returns:
        The output tensor
    """
    out = Tensor4(data, name=op, copy=False)
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(Node(op, tuple(inputs), out, rule))
    return out


def _check_same_dims(a: Tensor4, b: Tensor4, op: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{op}: shape mismatch {a.dims} vs {b.dims}")


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_dims(a, b, "add")
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_dims(a, b, "subtract")
    return record_op("subtract", a.data - b.data, (a, b), lambda g: (g, -g))


def elementwise_mul(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_dims(a, b, "elementwise_mul")
    return record_op(
        "elementwise_mul",
        a.data * b.data,
        (a, b),
        lambda g: (g * b.data, g * a.data),
    )


def divide(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_dims(a, b, "divide")
    return record_op(
        "divide",
        a.data / b.data,
        (a, b),
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)),
    )


def scale(a: Tensor4, factor: float) -> Tensor4:
    factor = float(factor)
    return record_op("scale", a.data * factor, (a,), lambda g: (g * factor,))


def sqrt(a: Tensor4) -> Tensor4:
    """Square root; the gradient at 0 is fixed to 0 instead of infinity."""
    out = np.sqrt(a.data)

    def rule(g: np.ndarray):
        return (np.divide(0.5 * g, out, out=np.zeros_like(out), where=out > 0),)

    return record_op("sqrt", out, (a,), rule)


def absolute(a: Tensor4) -> Tensor4:
    """Absolute value; subgradient 0 at 0."""
    return record_op("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor4) -> Tensor4:
    """max(x, 0); gradient 1 strictly above zero and 0 elsewhere, including at 0."""
    return record_op("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def softplus(a: Tensor4) -> Tensor4:
    """log(1 + exp(x)), computed without overflow."""
    return record_op("softplus", np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def sum_all(a: Tensor4) -> Tensor4:
    total = np.full((1, 1, 1, 1), a.data.sum())
    return record_op("sum_all", total, (a,), lambda g: (np.full_like(a.data, g.item()),))


def mean_all(a: Tensor4) -> Tensor4:
    return scale(sum_all(a), 1.0 / a.size)


def reshape(a: Tensor4, dims: Dims) -> Tensor4:
    if int(np.prod(dims)) != a.size:
        raise ShapeError(f"reshape: cannot view dims {a.dims} as {tuple(dims)}")
    return record_op("reshape", a.data.reshape(dims), (a,), lambda g: (g.reshape(a.dims),))


def slice_channel(a: Tensor4, channel: int) -> Tensor4:
    """Select one channel, keeping the channel axis: (n, c, h, w) -> (n, 1, h, w)."""
    if not 0 <= channel < a.c:
        raise ShapeError(f"slice_channel: channel {channel} outside [0, {a.c})")

    def rule(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[:, channel : channel + 1] = g
        return (full,)

    return record_op("slice_channel", a.data[:, channel : channel + 1].copy(), (a,), rule)


def slice_sample(a: Tensor4, index: int) -> Tensor4:
    """Select one batch sample: (n, c, h, w) -> (1, c, h, w)."""
    if not 0 <= index < a.n:
        raise ShapeError(f"slice_sample: sample {index} outside [0, {a.n})")

    def rule(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[index : index + 1] = g
        return (full,)

    return record_op("slice_sample", a.data[index : index + 1].copy(), (a,), rule)
