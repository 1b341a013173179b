"""
Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Operations executed while a ``ComputeGraph`` is
active (``with ComputeGraph() as graph:``) are recorded on that graph together with
the activations their backward rules need; ``backward(loss, graph)`` replays the
records in reverse order. Outside a graph every op is a plain numpy computation.

The heavier kernels (convolutions, group norm, grid sampling) live in
``src.ops``; this module holds the tensor type, the graph, the precision setting
and the pointwise / structural ops.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

logger = logging.getLogger(__name__)


class TensorError(ValueError):
    """Base class for tensor and autodiff errors."""


class ShapeMismatchError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class NonScalarLossError(TensorError):
    pass


class GraphConsumedError(TensorError):
    """Raised when ``backward`` is asked to replay a graph a second time."""


# --- precision -----------------------------------------------------------------

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_precision = "f32"


def set_precision(mode: str) -> None:
    global _precision
    if mode not in _PRECISIONS:
        raise TensorError(f"Unknown precision mode '{mode}', expected one of {sorted(_PRECISIONS)}")
    _precision = mode


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _PRECISIONS[_precision]


@contextmanager
def precision(mode: str):
    """Temporarily switch the global precision mode."""
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


# --- graph -----------------------------------------------------------------------

_active = threading.local()


def _graph_stack() -> List["ComputeGraph"]:
    if not hasattr(_active, "stack"):
        _active.stack = []
    return _active.stack


def active_graph() -> Optional["ComputeGraph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on the current thread, even inside an active graph."""
    stack = _graph_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@dataclass
class Node:
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    # Maps the output gradient to one gradient (or None) per input.
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputeGraph:
    """Tape of the ops recorded during one forward pass.

    A graph belongs to the thread that entered it. Nodes are appended in execution
    order, which is a topological order of the (acyclic) dataflow.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def __enter__(self) -> "ComputeGraph":
        if self.consumed:
            raise GraphConsumedError("Cannot record on a graph that has already been consumed")
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


# --- tensor ----------------------------------------------------------------------

class Tensor:
    """Dense real array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out.is_leaf = False
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, graph: Optional[ComputeGraph] = None, sink: Optional[Dict[int, np.ndarray]] = None) -> None:
        backward(self, graph, sink=sink)

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


TensorLike = Union[Tensor, float, int, np.ndarray]


def as_tensor(value: TensorLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


def constant(value, dtype=None) -> Tensor:
    """A tensor that never receives gradient."""
    return Tensor(value, requires_grad=False, dtype=dtype)


def check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite values produced by '{op}'")


def apply_op(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap a forward result and record it on the active graph when needed."""
    check_finite(out_data, op)
    graph = active_graph()
    needs_grad = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(out_data, needs_grad)
    if needs_grad:
        graph.record(Node(op=op, inputs=tuple(inputs), output=out, backward=backward_fn))
    return out


def backward(loss: Tensor, graph: Optional[ComputeGraph] = None, sink: Optional[Dict[int, np.ndarray]] = None) -> None:
    """Populate gradients of ``loss`` with respect to every reachable leaf.

    With ``sink`` given, leaf gradients are accumulated into ``sink[id(leaf)]``
    instead of ``leaf.grad``; worker threads use this to keep private buffers that
    are reduced later in a fixed order.
    """
    graph = graph if graph is not None else active_graph()
    if graph is None:
        raise TensorError("backward needs the ComputeGraph that recorded the forward pass")
    if graph.consumed:
        raise GraphConsumedError("This graph was already consumed by a previous backward call")
    if loss.data.size != 1:
        raise NonScalarLossError(f"backward expects a scalar loss, got shape {loss.shape}")

    graph.consumed = True
    if not loss.requires_grad:
        graph.nodes.clear()
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {id(loss): loss} if loss.is_leaf else {}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        for tensor, g_in in zip(node.inputs, node.backward(g_out)):
            if g_in is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in
            if tensor.is_leaf:
                leaves[key] = tensor
    graph.nodes.clear()

    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.data.dtype, copy=False).reshape(leaf.shape)
        if sink is not None:
            sink[key] = sink[key] + g if key in sink else g.copy()
        else:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# --- pointwise ops ---------------------------------------------------------------

def _binary_operands(a: TensorLike, b: TensorLike, op: str) -> Tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeMismatchError(f"'{op}' needs equal shapes or a scalar operand, got {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(np.sum(g), dtype=g.dtype).reshape(shape)


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return apply_op("add", (a, b), a.data + b.data,
                    lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return apply_op("sub", (a, b), a.data - b.data,
                    lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return apply_op("mul", (a, b), a.data * b.data,
                    lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("Division by zero in 'div'")
    out = a.data / b.data

    def _backward(g):
        return (_reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape))

    return apply_op("div", (a, b), out, _backward)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return apply_op("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return apply_op("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF written through erf."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def _backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return apply_op("gelu", (x,), out, _backward)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data > low) & (x.data < high)
    return apply_op("clip", (x,), np.clip(x.data, low, high), lambda g: (g * inside,))


_ELEMENTWISE: Dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
}


def elementwise(op: str, *operands: TensorLike) -> Tensor:
    """Dispatch a pointwise op by name (add, mul, sigmoid, tanh, gelu, sub)."""
    if op not in _ELEMENTWISE:
        raise TensorError(f"Unknown elementwise op '{op}'")
    return _ELEMENTWISE[op](*operands)


# --- reductions ------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return apply_op("sum", (x,), np.asarray(np.sum(x.data), dtype=x.dtype),
                    lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return apply_op("mean", (x,), np.asarray(np.mean(x.data), dtype=x.dtype),
                    lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over all elements; the gradient at the origin is taken as 0."""
    norm = np.sqrt(np.sum(x.data * x.data))

    def _backward(g):
        if norm == 0:
            return (np.zeros_like(x.data),)
        return (g * x.data / norm,)

    return apply_op("l2_norm", (x,), np.asarray(norm, dtype=x.dtype), _backward)


# --- structural ops --------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_op("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"concat: {e}") from e
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return apply_op("concat", tensors, out, _backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of a channel-first tensor."""
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeMismatchError(f"Channel slice {start}:{stop} outside 0:{x.shape[0]}")

    def _backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return apply_op("slice_channels", (x,), x.data[start:stop].copy(), _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul needs [m,k] @ [k,n], got {a.shape} and {b.shape}")
    return apply_op("matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias ``[C]`` to a channel-first tensor ``[C, ...]``."""
    if bias.shape != (x.shape[0],):
        raise ShapeMismatchError(f"bias shape {bias.shape} does not match {x.shape[0]} channels")
    axes = tuple(range(1, x.ndim))
    return apply_op("add_bias", (x, bias), x.data + _channel_view(bias.data, x.ndim),
                    lambda g: (g, g.sum(axis=axes)))


def scale_channels(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each channel of ``[C, ...]`` by its own scalar from ``scale[C]``."""
    if scale.shape != (x.shape[0],):
        raise ShapeMismatchError(f"scale shape {scale.shape} does not match {x.shape[0]} channels")
    s = _channel_view(scale.data, x.ndim)
    axes = tuple(range(1, x.ndim))
    return apply_op("scale_channels", (x, scale), x.data * s,
                    lambda g: (g * s, (g * x.data).sum(axis=axes)))


def expand_width(x: Tensor, width: int) -> Tensor:
    """Repeat ``[C, h]`` along a new trailing axis to ``[C, h, width]``."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"expand_width expects [C, h], got {x.shape}")
    out = np.repeat(x.data[:, :, None], width, axis=2)
    return apply_op("expand_width", (x,), out, lambda g: (g.sum(axis=2),))
