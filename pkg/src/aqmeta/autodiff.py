"""Reverse-mode automatic differentiation with differentiable adjoints.

Tensors wrap float64 numpy arrays. Every operation on a tracked tensor
records a :class:`Node`; :func:`grad` walks the recorded nodes backwards and
builds the adjoints out of the same primitives, so the gradients it returns
are tracked tensors too and can be differentiated again.

Tensors built only from constants stay untracked (``node is None``), which
keeps attack and evaluation code from paying for graph bookkeeping.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "GradReport",
    "Primitive",
    "AutodiffError",
    "GraphShapeError",
    "GradError",
    "SingularSystemError",
    "PRIMITIVES",
    "register_primitive",
    "apply_op",
    "tensor",
    "constant",
    "as_tensor",
    "grad",
    "forward",
    "check_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "exp",
    "log",
    "sqrt",
    "square",
    "reduce_sum",
    "mean",
    "reduce_max",
    "logsumexp",
    "log_softmax",
    "softmax",
    "broadcast_to",
    "sum_to",
    "reshape",
    "concat",
    "solve_spd",
]


class AutodiffError(Exception):
    pass


class GraphShapeError(AutodiffError):
    """Raised when replaying a node produces or receives a mismatched shape."""

    def __init__(self, node: "Node", message: str):
        self.node = node
        super().__init__(f"node #{node.id} ({node.describe()}): {message}")


class GradError(AutodiffError):
    pass


class SingularSystemError(AutodiffError):
    pass


_node_ids = itertools.count()
_graph_stack: list["Graph"] = []


class Node:
    """One recorded primitive application (or a leaf)."""

    __slots__ = ("id", "op", "inputs", "attrs", "shape", "name", "value")

    def __init__(self, op, inputs, attrs, shape, name=None, value=None):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.shape = shape
        self.name = name
        self.value = value
        if _graph_stack:
            _graph_stack[-1].nodes.append(self)

    def describe(self) -> str:
        if self.op == "leaf":
            return f"leaf {self.name!r}" if self.name else "leaf"
        return self.op

    def __repr__(self):
        return f"Node(#{self.id}, {self.describe()}, shape={self.shape})"


class Tensor:
    """An n-dimensional float64 value, optionally tracked in the graph."""

    __slots__ = ("data", "node")
    __array_priority__ = 100

    def __init__(self, data, name: str | None = None, track: bool = True):
        self.data = np.array(data, dtype=np.float64)
        self.data.flags.writeable = False
        self.node = Node("leaf", (), {}, self.data.shape, name, self.data) if track else None

    @classmethod
    def _wrap(cls, array: np.ndarray, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        array.flags.writeable = False
        t.data = array
        t.node = node
        return t

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
    def tracked(self) -> bool:
        return self.node is not None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, None)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = "" if self.node is None else f", node=#{self.node.id}"
        return f"Tensor({self.data!r}{tag})"

    def __len__(self):
        return self.data.shape[0]

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, power):
        if power == 2:
            return square(self)
        if power == 0.5:
            return sqrt(self)
        raise NotImplementedError("only powers 2 and 0.5 are supported")

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, name: str | None = None) -> Tensor:
    """A tracked leaf."""
    return Tensor(data, name=name)


def constant(data) -> Tensor:
    """An untracked value; never receives a gradient."""
    return Tensor(data, track=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


@dataclass(frozen=True)
class Primitive:
    """``forward`` maps numpy arrays to a numpy array; ``vjp(g, inputs, out, **attrs)``
    returns one adjoint Tensor (or None) per input, built from tensor ops."""

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Sequence[Tensor | None]]


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name: str, forward_fn, vjp_fn) -> Primitive:
    prim = Primitive(name, forward_fn, vjp_fn)
    PRIMITIVES[name] = prim
    return prim


def apply_op(op: str, *inputs, **attrs) -> Tensor:
    prim = PRIMITIVES[op]
    inputs = tuple(as_tensor(t) for t in inputs)
    out = prim.forward(*(t.data for t in inputs), **attrs)
    if all(t.node is None for t in inputs):
        return Tensor._wrap(out, None)
    out = np.asarray(out, dtype=np.float64)
    return Tensor._wrap(out, Node(op, inputs, attrs, out.shape))


# ---------------------------------------------------------------------------
# primitives


def _np_sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def _reduced_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def _unreduce(g: Tensor, shape, axis, keepdims):
    """Broadcast a reduced adjoint back to the input shape."""
    if not keepdims:
        g = reshape(g, _reduced_shape(shape, axis))
    return broadcast_to(g, shape)


register_primitive(
    "add",
    lambda a, b: a + b,
    lambda g, ins, out: (sum_to(g, ins[0].shape), sum_to(g, ins[1].shape)),
)
register_primitive(
    "sub",
    lambda a, b: a - b,
    lambda g, ins, out: (sum_to(g, ins[0].shape), sum_to(neg(g), ins[1].shape)),
)
register_primitive(
    "mul",
    lambda a, b: a * b,
    lambda g, ins, out: (sum_to(g * ins[1], ins[0].shape), sum_to(g * ins[0], ins[1].shape)),
)
register_primitive(
    "div",
    lambda a, b: a / b,
    lambda g, ins, out: (
        sum_to(g / ins[1], ins[0].shape),
        sum_to(neg(g * out) / ins[1], ins[1].shape),
    ),
)
register_primitive("neg", lambda a: -a, lambda g, ins, out: (neg(g),))
register_primitive(
    "matmul",
    lambda a, b: a @ b,
    lambda g, ins, out: (matmul(g, transpose(ins[1])), matmul(transpose(ins[0]), g)),
)
register_primitive("transpose", lambda a: a.T, lambda g, ins, out: (transpose(g),))
register_primitive(
    "relu",
    lambda a: np.maximum(a, 0.0),
    lambda g, ins, out: (g * constant((ins[0].data > 0).astype(np.float64)),),
)
register_primitive("exp", np.exp, lambda g, ins, out: (g * out,))
register_primitive("log", np.log, lambda g, ins, out: (g / ins[0],))
register_primitive("sqrt", np.sqrt, lambda g, ins, out: (g / (out * 2.0),))
register_primitive("square", np.square, lambda g, ins, out: (g * ins[0] * 2.0,))
register_primitive(
    "sum",
    lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
    lambda g, ins, out, axis, keepdims: (_unreduce(g, ins[0].shape, axis, keepdims),),
)


def _max_forward(a, axis, keepdims):
    return np.max(a, axis=axis, keepdims=keepdims)


def _argmax_mask(a: np.ndarray, axis) -> np.ndarray:
    """One-hot mask of the first maximal entry along ``axis`` (ties -> lowest index)."""
    if axis is None:
        mask = np.zeros(a.size)
        mask[np.argmax(a)] = 1.0
        return mask.reshape(a.shape)
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    mask = np.zeros_like(a)
    np.put_along_axis(mask, idx, 1.0, axis=axis)
    return mask


register_primitive(
    "max",
    _max_forward,
    lambda g, ins, out, axis, keepdims: (
        _unreduce(g, ins[0].shape, axis, keepdims) * constant(_argmax_mask(ins[0].data, axis)),
    ),
)


def _lse_forward(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m


register_primitive(
    "logsumexp",
    _lse_forward,
    lambda g, ins, out, axis: (broadcast_to(g, ins[0].shape) * exp(ins[0] - out),),
)
register_primitive(
    "broadcast_to",
    lambda a, shape: np.broadcast_to(a, shape),
    lambda g, ins, out, shape: (sum_to(g, ins[0].shape),),
)
register_primitive(
    "sum_to",
    _np_sum_to,
    lambda g, ins, out, shape: (broadcast_to(g, ins[0].shape),),
)
register_primitive(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, ins, out, shape: (reshape(g, ins[0].shape),),
)
register_primitive(
    "getitem",
    lambda a, index: a[index],
    lambda g, ins, out, index: (apply_op("scatter", g, index=index, shape=ins[0].shape),),
)


def _scatter_forward(g, index, shape):
    out = np.zeros(shape)
    np.add.at(out, index, g)
    return out


register_primitive(
    "scatter",
    _scatter_forward,
    lambda g, ins, out, index, shape: (getitem(g, index),),
)


def _concat_vjp(g, ins, out, axis):
    grads, start = [], 0
    for t in ins:
        n = t.shape[axis]
        index = [slice(None)] * g.ndim
        index[axis] = slice(start, start + n)
        grads.append(getitem(g, tuple(index)))
        start += n
    return grads


register_primitive(
    "concat",
    lambda *arrays, axis: np.concatenate(arrays, axis=axis),
    _concat_vjp,
)


def _solve_spd_forward(a, b):
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(f"matrix is not positive definite: {exc}") from None
    return scipy.linalg.cho_solve(factor, b)


def _solve_spd_vjp(g, ins, out):
    a = ins[0]
    gb = solve_spd(a, g)
    return (neg(matmul(gb, transpose(out))), gb)


register_primitive("solve_spd", _solve_spd_forward, _solve_spd_vjp)


# ---------------------------------------------------------------------------
# public op wrappers


def add(a, b):
    return apply_op("add", a, b)


def sub(a, b):
    return apply_op("sub", a, b)


def mul(a, b):
    return apply_op("mul", a, b)


def div(a, b):
    return apply_op("div", a, b)


def neg(a):
    return apply_op("neg", a)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ValueError(f"matmul expects 2-D @ 1-D/2-D, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim == 1:
        return reshape(apply_op("matmul", a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    return apply_op("matmul", a, b)


def transpose(a):
    return apply_op("transpose", a)


def relu(a):
    return apply_op("relu", a)


def exp(a):
    return apply_op("exp", a)


def log(a):
    return apply_op("log", a)


def sqrt(a):
    return apply_op("sqrt", a)


def square(a):
    return apply_op("square", a)


def reduce_sum(a, axis=None, keepdims=False):
    return apply_op("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return reduce_sum(a, axis, keepdims) / float(n)


def reduce_max(a, axis=None, keepdims=False):
    return apply_op("max", a, axis=axis, keepdims=keepdims)


def logsumexp(a, axis=-1, keepdims=False):
    out = apply_op("logsumexp", a, axis=axis)
    if not keepdims:
        shape = list(out.shape)
        del shape[axis]
        out = reshape(out, tuple(shape))
    return out


def log_softmax(a, axis=-1):
    return a - apply_op("logsumexp", a, axis=axis)


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis))


def broadcast_to(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return apply_op("broadcast_to", a, shape=tuple(shape))


def sum_to(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return apply_op("sum_to", a, shape=tuple(shape))


def reshape(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return apply_op("reshape", a, shape=tuple(shape))


def getitem(a, index):
    return apply_op("getitem", a, index=index)


def concat(tensors, axis=0):
    return apply_op("concat", *tensors, axis=axis)


def solve_spd(a, b):
    """Solve ``a @ x = b`` for symmetric positive-definite ``a`` (Cholesky)."""
    return apply_op("solve_spd", a, b)


# ---------------------------------------------------------------------------
# differentiation


def _collect(output: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.node is None or t.node.id in seen:
            continue
        seen[t.node.id] = t
        stack.extend(t.node.inputs)
    return [seen[k] for k in sorted(seen)]


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = True) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the adjoints are tracked tensors and can be fed to
    :func:`grad` again. Tensors that do not influence ``output`` get zeros.
    """
    if output.size != 1:
        raise GradError(f"grad needs a scalar output, got shape {output.shape}")
    for w in wrt:
        if not isinstance(w, Tensor) or w.node is None:
            raise GradError("gradient requested for a tensor that is not in the graph")
    if output.node is None:
        return [Tensor._wrap(np.zeros(w.shape), None) for w in wrt]

    order = _collect(output)
    targets = {w.node.id for w in wrt}
    relevant: set[int] = set()
    for t in order:
        nid = t.node.id
        if nid in targets or any(
            i.node is not None and i.node.id in relevant for i in t.node.inputs
        ):
            relevant.add(nid)

    adjoints: dict[int, Tensor] = {output.node.id: constant(np.ones(output.shape))}
    for t in reversed(order):
        node = t.node
        g = adjoints.get(node.id)
        if g is None or node.op == "leaf" or node.id not in relevant:
            continue
        if node.id not in targets:
            del adjoints[node.id]
        inputs = node.inputs
        out = t
        if not create_graph:
            g = g.detach()
            inputs = tuple(i.detach() for i in inputs)
            out = t.detach()
        in_grads = PRIMITIVES[node.op].vjp(g, inputs, out, **node.attrs)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or inp.node is None or inp.node.id not in relevant:
                continue
            key = inp.node.id
            adjoints[key] = gi if key not in adjoints else add(adjoints[key], gi)

    result = []
    for w in wrt:
        g = adjoints.get(w.node.id)
        if g is None:
            g = Tensor._wrap(np.zeros(w.shape), None)
        elif not create_graph:
            g = g.detach()
        result.append(g)
    return result


# ---------------------------------------------------------------------------
# graph replay


class ForwardResult(dict):
    """Outputs by name, plus ``nonfinite``: descriptions of nodes that produced NaN/Inf."""

    def __init__(self, outputs, nonfinite):
        super().__init__(outputs)
        self.nonfinite = nonfinite


class Graph:
    """Append-only record of the nodes created while the graph is active.

    >>> with Graph() as g:
    ...     x = g.input("x", [1.0, 2.0, 3.0])
    ...     g.output("total", x.sum())
    >>> forward(g, {"x": [1.0, 1.0, 1.0]})["total"].item()
    3.0
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.outputs: dict[str, Tensor] = {}

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack.remove(self)
        return False

    def input(self, name: str, value) -> Tensor:
        if name in self.inputs:
            raise ValueError(f"duplicate graph input {name!r}")
        t = Tensor(value, name=name)
        if t.node not in self.nodes:
            self.nodes.append(t.node)
        self.inputs[name] = t.node
        return t

    def output(self, name: str, t: Tensor) -> Tensor:
        self.outputs[name] = t
        return t


def forward(graph: Graph, feeds: Mapping[str, object], outputs: Sequence[str] | None = None):
    """Re-execute ``graph`` with new input values, node by node in insertion order."""
    unknown = set(feeds) - set(graph.inputs)
    if unknown:
        raise KeyError(f"feeds for unknown graph inputs: {sorted(unknown)}")
    values: dict[int, np.ndarray] = {}
    nonfinite: list[str] = []
    for node in graph.nodes:
        if node.op == "leaf":
            if node.name in feeds and graph.inputs.get(node.name) is node:
                v = np.asarray(feeds[node.name], dtype=np.float64)
                if v.shape != node.shape:
                    raise GraphShapeError(node, f"fed shape {v.shape}, expected {node.shape}")
            else:
                v = node.value
            values[node.id] = v
            continue
        args = [
            values[i.node.id] if i.node is not None and i.node.id in values else i.data
            for i in node.inputs
        ]
        try:
            with np.errstate(all="ignore"):
                v = np.asarray(PRIMITIVES[node.op].forward(*args, **node.attrs), dtype=np.float64)
        except (ValueError, IndexError) as exc:
            raise GraphShapeError(node, str(exc)) from None
        if v.shape != node.shape:
            raise GraphShapeError(node, f"produced shape {v.shape}, recorded {node.shape}")
        if not np.all(np.isfinite(v)):
            nonfinite.append(f"#{node.id} {node.describe()}")
        values[node.id] = v
    names = list(graph.outputs) if outputs is None else list(outputs)
    result = {}
    for name in names:
        t = graph.outputs[name]
        data = values[t.node.id] if t.node is not None and t.node.id in values else t.data
        result[name] = constant(data)
    return ForwardResult(result, nonfinite)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradReport:
    max_rel_error: float
    errors: dict[str, float] = field(default_factory=dict)
    passed: bool = False
    message: str = ""

    def __bool__(self):
        return self.passed


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def check_grad(fn: Callable, point, tol: float = 1e-5, h: float = 1e-5) -> GradReport:
    """Compare :func:`grad` of ``fn`` against central differences.

    ``point`` is an array or a dict of named arrays; ``fn`` receives the
    corresponding tracked tensor(s) and must return a scalar tensor.
    Relative error is ``|a - b| / max(1, |a|, |b|)``.
    """
    named = isinstance(point, Mapping)
    base = {k: np.array(v, dtype=np.float64) for k, v in (point.items() if named else [("x", point)])}

    def call(arrays, track):
        ts = {k: (Tensor(v, name=k) if track else constant(v)) for k, v in arrays.items()}
        out = fn(ts if named else ts["x"])
        return ts, out

    ts, out = call(base, True)
    if out.size != 1:
        return GradReport(np.inf, {}, False, f"function output has shape {out.shape}")
    analytic = grad(out, list(ts.values()), create_graph=False)
    errors: dict[str, float] = {}
    for (name, value), g in zip(base.items(), analytic):
        numeric = np.zeros_like(value)
        flat = numeric.reshape(-1)
        for i in range(value.size):
            plus, minus = value.copy(), value.copy()
            plus.reshape(-1)[i] += h
            minus.reshape(-1)[i] -= h
            f_plus = call({**base, name: plus}, False)[1].item()
            f_minus = call({**base, name: minus}, False)[1].item()
            flat[i] = (f_plus - f_minus) / (2 * h)
        if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(g.data))):
            return GradReport(np.inf, errors, False, f"non-finite gradient for {name!r}")
        errors[name] = _rel_error(g.data, numeric)
    worst = max(errors.values(), default=0.0)
    return GradReport(worst, errors, worst <= tol)
