"""Reverse-mode autodiff over numpy arrays.

Define-by-run: a program is a Python callable that receives leaf nodes for
its inputs and parameters, applies the primitives below, and returns named
output nodes including a scalar ``loss``.  The graph is rebuilt on every
call; nodes are never mutated after creation.

Primitive set: matmul, elementwise add/sub/mul/div (trailing-dim
broadcasting), sigmoid, tanh, exp, log, sqrt, softplus, constant powers,
softmax along an axis, sum/mean/variance along an axis, concatenation,
basic slicing, row gather (embedding lookup), 2-D transpose.  Reductions
accumulate in float64 regardless of storage dtype.

Non-differentiable selections (argmax and friends) are deliberately
absent: programs that need a hard selection cannot be expressed, which is
the intended rejection.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import ParameterSet, Tensor


class ShapeError(ValueError):
    """Operand shapes incompatible for a primitive."""


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf; message carries the node path."""


class GraphError(ValueError):
    """Malformed program (missing or non-scalar loss, bad operand rank)."""


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "op", "parents", "grad", "_backward")

    def __init__(self, value: np.ndarray, op: str = "leaf", parents: tuple = ()):
        self.value = value
        self.op = op
        self.parents = parents
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Node":
        return transpose(self)

    def argmax(self, axis=None):
        raise GraphError(
            "argmax is a hard selection and has no gradient; "
            "it is not part of the differentiable primitive set"
        )

    # operator sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"


def leaf(values, dtype=None) -> Node:
    """Graph leaf from an array, Tensor, or scalar."""
    if isinstance(values, Tensor):
        values = values.data
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return Node(arr)


constant = leaf


def _lift(other, like: Node) -> Node:
    if isinstance(other, Node):
        return other
    return Node(np.asarray(other, dtype=like.value.dtype))


def _node_path(node: Node, depth: int = 8) -> str:
    parts = []
    cur: Node | None = node
    while cur is not None and depth > 0:
        parts.append(cur.op)
        cur = cur.parents[0] if cur.parents else None
        depth -= 1
    return " <- ".join(parts)


def _finish(out: Node, backward: Callable[[], None]) -> Node:
    if not np.isfinite(out.value).all():
        raise NonFiniteError(
            f"non-finite values from primitive '{out.op}' (path: {_node_path(out)})"
        )
    out._backward = backward
    return out


def _accum(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad = node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.astype(np.result_type(g.dtype), copy=False)


def _check_broadcast(op: str, a: Node, b: Node) -> None:
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    _check_broadcast("add", a, b)
    out = Node(a.value + b.value, "add", (a, b))

    def backward():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    return _finish(out, backward)


def sub(a: Node, b: Node) -> Node:
    _check_broadcast("sub", a, b)
    out = Node(a.value - b.value, "sub", (a, b))

    def backward():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(-out.grad, b.shape))

    return _finish(out, backward)


def mul(a: Node, b: Node) -> Node:
    _check_broadcast("mul", a, b)
    out = Node(a.value * b.value, "mul", (a, b))

    def backward():
        _accum(a, _unbroadcast(out.grad * b.value, a.shape))
        _accum(b, _unbroadcast(out.grad * a.value, b.shape))

    return _finish(out, backward)


def div(a: Node, b: Node) -> Node:
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Node(a.value / b.value, "div", (a, b))

    def backward():
        _accum(a, _unbroadcast(out.grad / b.value, a.shape))
        _accum(b, _unbroadcast(-out.grad * a.value / (b.value * b.value), b.shape))

    return _finish(out, backward)


# ---------------------------------------------------------------------------
# matmul and transpose
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: operands must be 1-D or 2-D, got {av.shape} @ {bv.shape}")
    if (av.shape[-1] if av.ndim else 0) != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")
    out = Node(av @ bv, "matmul", (a, b))

    def backward():
        g = out.grad
        if av.ndim == 2 and bv.ndim == 2:
            _accum(a, g @ bv.T)
            _accum(b, av.T @ g)
        elif av.ndim == 1 and bv.ndim == 2:
            _accum(a, bv @ g)
            _accum(b, np.outer(av, g))
        elif av.ndim == 2 and bv.ndim == 1:
            _accum(a, np.outer(g, bv))
            _accum(b, av.T @ g)
        else:  # 1-D @ 1-D -> scalar
            _accum(a, g * bv)
            _accum(b, g * av)

    return _finish(out, backward)


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Node(a.value.reshape(shape), "reshape", (a,))

    def backward():
        _accum(a, out.grad.reshape(a.value.shape))

    return _finish(out, backward)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D operand, got shape {a.shape}")
    out = Node(a.value.T, "transpose", (a,))

    def backward():
        _accum(a, out.grad.T)

    return _finish(out, backward)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a: Node) -> Node:
    x = a.value
    t = np.exp(-np.abs(x))
    val = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    out = Node(val.astype(x.dtype, copy=False), "sigmoid", (a,))

    def backward():
        _accum(a, out.grad * out.value * (1.0 - out.value))

    return _finish(out, backward)


def tanh(a: Node) -> Node:
    out = Node(np.tanh(a.value), "tanh", (a,))

    def backward():
        _accum(a, out.grad * (1.0 - out.value * out.value))

    return _finish(out, backward)


def exp(a: Node) -> Node:
    out = Node(np.exp(a.value), "exp", (a,))

    def backward():
        _accum(a, out.grad * out.value)

    return _finish(out, backward)


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Node(np.log(a.value), "log", (a,))

    def backward():
        _accum(a, out.grad / a.value)

    return _finish(out, backward)


def sqrt(a: Node) -> Node:
    with np.errstate(invalid="ignore"):
        out = Node(np.sqrt(a.value), "sqrt", (a,))

    def backward():
        _accum(a, out.grad * 0.5 / out.value)

    return _finish(out, backward)


def softplus(a: Node) -> Node:
    """log(1 + exp(x)), evaluated stably for large |x|."""
    out = Node(np.logaddexp(0.0, a.value).astype(a.value.dtype, copy=False), "softplus", (a,))

    def backward():
        x = a.value
        t = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
        _accum(a, out.grad * sig)

    return _finish(out, backward)


def powc(a: Node, p: float) -> Node:
    """Elementwise power with a constant, non-negative exponent."""
    p = float(p)
    if p < 0:
        raise GraphError(f"powc: exponent must be non-negative, got {p}")
    out = Node(np.power(a.value, p), "powc", (a,))

    def backward():
        if p == 0.0:
            return
        if p == 1.0:
            _accum(a, out.grad)
        else:
            _accum(a, out.grad * p * np.power(a.value, p - 1.0))

    return _finish(out, backward)


# ---------------------------------------------------------------------------
# softmax and reductions
# ---------------------------------------------------------------------------


def softmax(a: Node, axis: int) -> Node:
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = Node(val.astype(x.dtype, copy=False), "softmax", (a,))

    def backward():
        y = out.value
        g = out.grad
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _finish(out, backward)


def _restore_axes(g: np.ndarray, axis, keepdims: bool, src_shape) -> np.ndarray:
    if keepdims or axis is None:
        return g
    return np.expand_dims(g, axis)


def sum_(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    val = a.value.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Node(val.astype(a.value.dtype), "sum", (a,))

    def backward():
        g = _restore_axes(out.grad, axis, keepdims, a.shape)
        _accum(a, np.broadcast_to(g, a.shape).astype(a.value.dtype, copy=False))

    return _finish(out, backward)


def mean(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    val = a.value.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    out = Node(np.asarray(val).astype(a.value.dtype), "mean", (a,))
    n = a.value.size if axis is None else a.shape[axis]

    def backward():
        g = _restore_axes(out.grad, axis, keepdims, a.shape)
        _accum(a, np.broadcast_to(g / n, a.shape).astype(a.value.dtype, copy=False))

    return _finish(out, backward)


def variance(a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    """Population variance (ddof=0) along ``axis``, float64 accumulation."""
    x64 = a.value.astype(np.float64)
    m = x64.mean(axis=axis, keepdims=True)
    val = ((x64 - m) ** 2).mean(axis=axis, keepdims=keepdims)
    with np.errstate(over="ignore"):  # inf cast surfaces as NonFiniteError later
        val32 = np.asarray(val).astype(a.value.dtype)
    out = Node(val32, "variance", (a,))
    n = a.value.size if axis is None else a.shape[axis]

    def backward():
        g = _restore_axes(out.grad, axis, keepdims, a.shape)
        centered = a.value - a.value.mean(axis=axis, keepdims=True, dtype=np.float64).astype(
            a.value.dtype
        )
        _accum(a, (2.0 / n) * centered * g)

    return _finish(out, backward)


# ---------------------------------------------------------------------------
# structure: concat, slicing, gather
# ---------------------------------------------------------------------------


def concat(nodes, axis: int = 0) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ShapeError("concat: need at least one operand")
    ranks = {n.value.ndim for n in nodes}
    if len(ranks) != 1:
        raise ShapeError(f"concat: mixed ranks {sorted(ranks)}")
    try:
        val = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    out = Node(val, "concat", tuple(nodes))
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for n, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * val.ndim
            idx[axis] = slice(start, stop)
            _accum(n, out.grad[tuple(idx)])

    return _finish(out, backward)


def getitem(a: Node, index) -> Node:
    val = a.value[index]
    if np.isscalar(val) or val.ndim == 0:
        val = np.asarray(val)
    out = Node(val, "slice", (a,))

    def backward():
        buf = np.zeros_like(a.value)
        buf[index] = out.grad
        _accum(a, buf)

    return _finish(out, backward)


def gather_rows(table: Node, ids) -> Node:
    """Embedding lookup: rows of a 2-D table selected by integer ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"gather_rows: id out of range [0, {table.shape[0]}) in {ids.tolist()}"
        )
    out = Node(table.value[ids], "gather", (table,))

    def backward():
        buf = np.zeros_like(table.value)
        np.add.at(buf, ids, out.grad)
        _accum(table, buf)

    return _finish(out, backward)


# ---------------------------------------------------------------------------
# program execution
# ---------------------------------------------------------------------------

Program = Callable[[dict[str, Node], dict[str, Node]], dict[str, Node]]


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Run reverse-mode accumulation from a scalar loss node."""
    if loss.value.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


def run_program(
    program: Program,
    inputs: Mapping[str, Tensor | np.ndarray],
    params: ParameterSet,
    dtype=np.float32,
) -> tuple[dict[str, Node], dict[str, Node]]:
    """Build the graph once; returns (outputs, param leaf nodes)."""
    in_nodes = {k: leaf(v, dtype=dtype) for k, v in inputs.items()}
    param_nodes = {k: leaf(v, dtype=dtype) for k, v in params.items()}
    outputs = program(in_nodes, param_nodes)
    if not isinstance(outputs, dict):
        raise GraphError("program must return a dict of named output nodes")
    return outputs, param_nodes


def forward_backward(
    program: Program,
    inputs: Mapping[str, Tensor | np.ndarray],
    params: ParameterSet,
    loss_name: str = "loss",
) -> tuple[dict[str, Tensor], ParameterSet]:
    """Evaluate a program and return outputs plus d(loss)/d(param).

    Parameters never touched by the loss get zero gradients.
    """
    outputs, param_nodes = run_program(program, inputs, params)
    if loss_name not in outputs:
        raise GraphError(f"program outputs {sorted(outputs)} lack {loss_name!r}")
    backward(outputs[loss_name])
    grads = {}
    for path, node in param_nodes.items():
        if node.grad is None:
            grads[path] = Tensor.zeros(node.shape)
        else:
            grads[path] = Tensor(node.grad.astype(np.float32))
    out_tensors = {k: Tensor(v.value.astype(np.float32)) for k, v in outputs.items()}
    return out_tensors, ParameterSet(grads)


def evaluate_program(
    program: Program,
    inputs: Mapping[str, Tensor | np.ndarray],
    params: ParameterSet,
) -> dict[str, np.ndarray]:
    """Forward-only evaluation; returns plain arrays."""
    outputs, _ = run_program(program, inputs, params)
    return {k: v.value for k, v in outputs.items()}


def grad_check(
    program: Program,
    inputs: Mapping[str, Tensor | np.ndarray],
    params: ParameterSet,
    epsilon: float = 1e-4,
    loss_name: str = "loss",
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Both sides are evaluated in float64: the analytic pass runs the whole
    graph at float64, and each parameter entry is perturbed by +/- epsilon
    for the central difference.  Relative error divides by
    max(|analytic|, |fd|, floor).  The floor reflects the resolution of
    central differences themselves: the difference quotient carries an
    absolute error of roughly eps64^(2/3)*|loss| (~1e-10 for O(1) losses),
    so deviations a few decades above that are the finest the method can
    certify; gradients below the floor (dead branches, saturated paths)
    are checked in absolute rather than relative terms.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    outputs, param_nodes = run_program(program, inputs, params, dtype=np.float64)
    if loss_name not in outputs:
        raise GraphError(f"program outputs {sorted(outputs)} lack {loss_name!r}")
    loss_node = outputs[loss_name]
    if loss_node.value.size != 1:
        raise GraphError(f"grad_check: loss must be scalar, got shape {loss_node.shape}")
    backward(loss_node)
    analytic = {
        path: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for path, node in param_nodes.items()
    }

    base = {path: t.data.astype(np.float64) for path, t in params.items()}
    fixed_inputs = {
        k: (v.data if isinstance(v, Tensor) else np.asarray(v)).astype(np.float64)
        for k, v in inputs.items()
    }

    def eval_loss(arrays: dict[str, np.ndarray]) -> float:
        in_nodes = {k: Node(v) for k, v in fixed_inputs.items()}
        p_nodes = {k: Node(v) for k, v in arrays.items()}
        out = program(in_nodes, p_nodes)
        return float(out[loss_name].value)

    max_err = 0.0
    for path, arr in base.items():
        flat = arr.ravel()
        g_flat = analytic[path].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = eval_loss(base)
            flat[i] = orig - epsilon
            f_minus = eval_loss(base)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(g_flat[i] - fd) / max(floor, abs(g_flat[i]), abs(fd))
            if err > max_err:
                max_err = err
    return max_err
