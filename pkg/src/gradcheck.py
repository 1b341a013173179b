"""
Central-difference gradient checking against a registry of differentiable ops.

Each registered op is a callable taking tensors positionally and returning one
tensor, plus a factory producing random inputs for it. ``finite_difference_check``
reduces the op output to the scalar ``sum(out * R)`` with fixed random weights R
and compares its analytic gradient with central differences, one input component
at a time.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src import ops
from src.tensor import (
    ComputeGraph,
    Tensor,
    TensorError,
    add,
    add_bias,
    backward,
    clip,
    concat,
    constant,
    div,
    expand_width,
    gelu,
    l2_norm,
    matmul,
    mean_all,
    mul,
    reshape,
    scale_channels,
    sigmoid,
    slice_channels,
    sub,
    sum_all,
    tanh,
)

logger = logging.getLogger(__name__)

ABSOLUTE_THRESHOLD = 1e-8


class UnregisteredOpError(TensorError):
    pass


InputFactory = Callable[[np.random.Generator], List[np.ndarray]]


@dataclass
class RegisteredOp:
    name: str
    fn: Callable[..., Tensor]
    make_inputs: Optional[InputFactory] = None


OP_REGISTRY: Dict[str, RegisteredOp] = {}


def register_op(name: str, make_inputs: Optional[InputFactory] = None):
    """Decorator adding a differentiable callable to the checker's registry."""

    def decorator(fn: Callable[..., Tensor]) -> Callable[..., Tensor]:
        OP_REGISTRY[name] = RegisteredOp(name=name, fn=fn, make_inputs=make_inputs)
        return fn

    return decorator


def registered_ops() -> List[str]:
    return sorted(OP_REGISTRY)


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: float
    passed: bool
    tol: float
    per_input: Dict[int, float] = field(default_factory=dict)
    components_checked: int = 0


def _compare(analytic: float, numeric: float) -> float:
    if abs(analytic) < ABSOLUTE_THRESHOLD:
        return abs(analytic - numeric)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric))


def finite_difference_check(
    op_name: str,
    inputs: Sequence,
    step: float = 1e-5,
    tol: float = 1e-4,
    wrt: Optional[Sequence[int]] = None,
    max_components: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients of a registered op.

    ``wrt`` restricts the check to some input positions; ``max_components`` checks
    a random subset of components per input (seeded) instead of all of them.
    """
    if op_name not in OP_REGISTRY:
        raise UnregisteredOpError(f"Op '{op_name}' is not registered for gradient checking")
    if step <= 0:
        raise TensorError("finite_difference_check needs a positive step")
    fn = OP_REGISTRY[op_name].fn
    arrays = [np.array(x.data if isinstance(x, Tensor) else x) for x in inputs]
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise TensorError(f"finite_difference_check got non-finite inputs for '{op_name}'")
    positions = list(range(len(arrays))) if wrt is None else list(wrt)
    rng = np.random.default_rng(seed)

    def evaluate(values: List[np.ndarray]) -> np.ndarray:
        return fn(*[constant(v, dtype=v.dtype) for v in values]).data

    reference = evaluate(arrays)
    weights = rng.standard_normal(reference.shape).astype(reference.dtype) if reference.ndim else np.asarray(1.0, dtype=reference.dtype)

    leaves = [Tensor(a, requires_grad=(i in positions), dtype=a.dtype) for i, a in enumerate(arrays)]
    with ComputeGraph() as graph:
        loss = sum_all(mul(fn(*leaves), constant(weights, dtype=weights.dtype)))
    backward(loss, graph)

    report = GradCheckReport(op=op_name, max_rel_err=0.0, passed=True, tol=tol)
    for pos in positions:
        analytic_grad = leaves[pos].grad if leaves[pos].grad is not None else np.zeros_like(arrays[pos])
        flat_indices = np.arange(arrays[pos].size)
        if max_components is not None and flat_indices.size > max_components:
            flat_indices = np.sort(rng.choice(flat_indices, size=max_components, replace=False))
        worst = 0.0
        for flat in flat_indices:
            idx = np.unravel_index(flat, arrays[pos].shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[pos][idx] += step
            minus[pos][idx] -= step
            realized = plus[pos][idx] - minus[pos][idx]
            numeric = float(np.sum(weights * ((evaluate(plus) - evaluate(minus)) / realized)))
            worst = max(worst, _compare(float(analytic_grad[idx]), numeric))
        report.per_input[pos] = worst
        report.components_checked += int(flat_indices.size)
        report.max_rel_err = max(report.max_rel_err, worst)
    report.passed = report.max_rel_err <= tol
    if not report.passed:
        logger.warning(f"⚠️ gradient check failed for '{op_name}': max rel err {report.max_rel_err:.3e} > {tol:.1e}")
    return report


# --- built-in registrations ----------------------------------------------------

def _normal(*shape, scale: float = 0.1):
    return lambda rng: rng.standard_normal(shape) * scale


def _inputs(*makers):
    return lambda rng: [m(rng) for m in makers]


def _away_from_zero(*shape):
    return lambda rng: rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _off_node_grid(rng: np.random.Generator, h: int = 5, w: int = 6) -> np.ndarray:
    """Sample coordinates kept at least 0.2 cells from any grid node."""
    cols = rng.integers(-1, w + 1, size=(h, w)) + rng.uniform(0.2, 0.8, size=(h, w))
    rows = rng.integers(-1, h, size=(h, w)) + rng.uniform(0.2, 0.8, size=(h, w))
    gx = cols / (w - 1) * 2.0 - 1.0
    gy = rows / (h - 1) * 2.0 - 1.0
    return np.stack([gx, gy])


register_op("identity", _inputs(_normal(3, 4, 5)))(lambda x: reshape(x, x.shape))
register_op("add", _inputs(_normal(3, 4, 5), _normal(3, 4, 5)))(add)
register_op("sub", _inputs(_normal(3, 4, 5), _normal(3, 4, 5)))(sub)
register_op("mul", _inputs(_normal(3, 4, 5), _normal(3, 4, 5)))(mul)
register_op("mul_scalar", _inputs(_normal(3, 4, 5), _normal()))(mul)
register_op("div", _inputs(_normal(4, 5), _away_from_zero(4, 5)))(div)
register_op("sigmoid", _inputs(_normal(3, 4, 5, scale=2.0)))(sigmoid)
register_op("tanh", _inputs(_normal(3, 4, 5, scale=2.0)))(tanh)
register_op("gelu", _inputs(_normal(3, 4, 5, scale=2.0)))(gelu)
register_op("clip", _inputs(_normal(3, 4, 5, scale=1.0)))(lambda x: clip(x, -0.5, 0.5))
register_op("sum", _inputs(_normal(3, 4)))(sum_all)
register_op("mean", _inputs(_normal(3, 4)))(mean_all)
register_op("l2_norm", _inputs(_normal(3, 4)))(l2_norm)
register_op("matmul", _inputs(_normal(3, 4), _normal(4, 2)))(matmul)
register_op("concat", _inputs(_normal(2, 3, 4), _normal(3, 3, 4)))(lambda a, b: concat([a, b], axis=0))
register_op("slice_channels", _inputs(_normal(4, 3, 3)))(lambda x: slice_channels(x, 1, 3))
register_op("add_bias", _inputs(_normal(3, 4, 5), _normal(3)))(add_bias)
register_op("scale_channels", _inputs(_normal(3, 4, 5), _normal(3)))(scale_channels)
register_op("expand_width", _inputs(_normal(3, 4)))(lambda x: expand_width(x, 5))
register_op("conv2d", _inputs(_normal(3, 6, 7), _normal(4, 3, 3, 3), _normal(4)))(
    lambda x, k, b: ops.conv2d(x, k, b, padding="same", pad_mode="zero")
)
register_op("conv2d_sphere", _inputs(_normal(3, 6, 7), _normal(4, 3, 3, 3), _normal(4)))(
    lambda x, k, b: ops.conv2d(x, k, b, padding="same", pad_mode="sphere")
)
register_op("conv2d_strided", _inputs(_normal(3, 6, 8), _normal(4, 3, 2, 2), _normal(4)))(
    lambda x, k, b: ops.conv2d(x, k, b, stride=2)
)
register_op("conv2d_pointwise", _inputs(_normal(3, 4, 5), _normal(2, 3, 1, 1), _normal(2)))(
    lambda x, k, b: ops.conv2d(x, k, b)
)
register_op("conv_transpose2d", _inputs(_normal(3, 3, 4), _normal(3, 2, 2, 2), _normal(2)))(ops.conv_transpose2d)
register_op("depthwise_axial_conv_width", _inputs(_normal(3, 5, 6), _normal(3, 5)))(
    lambda x, k: ops.depthwise_axial_conv(x, k, axis="width")
)
register_op("depthwise_axial_conv_height", _inputs(_normal(3, 5, 6), _normal(3, 5)))(
    lambda x, k: ops.depthwise_axial_conv(x, k, axis="height")
)
register_op(
    "group_norm",
    lambda rng: [rng.standard_normal((4, 3, 3)), 1.0 + 0.1 * rng.standard_normal(4), 0.1 * rng.standard_normal(4)],
)(lambda x, g, b: ops.group_norm(x, 2, g, b))
register_op("grid_sample_sphere", lambda rng: [rng.standard_normal((2, 5, 6)), _off_node_grid(rng)])(
    ops.grid_sample_sphere
)
