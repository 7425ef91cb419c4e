"""Minimal reverse-mode automatic differentiation over NumPy arrays.

A :class:`Node` wraps a dense array (the tensor value) together with the
vector-Jacobian rule that maps an upstream gradient onto its parents.  Ops
are plain functions; :func:`custom_grad_op` attaches an arbitrary backward
rule to an arbitrary forward function, which is how surrogate gradients for
non-differentiable ops are expressed.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gdprune.errors import GraphError, NumericFault, ShapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


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


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "op", "name", "_consumed")

    def __init__(self, value, parents=(), backward_rule=None, requires_grad=False, op="leaf", name=None):
        value = np.asarray(value)
        if value.dtype != np.float32 and value.dtype != np.float64:
            value = value.astype(DEFAULT_DTYPE)
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents: tuple[Node, ...] = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Node":
        return Node(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar
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

    def __getitem__(self, key):
        return slice_(self, key)


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE, name: str | None = None) -> Node:
    return Node(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def parameter(data, dtype=DEFAULT_DTYPE, name: str | None = None) -> Node:
    return tensor(data, requires_grad=True, dtype=dtype, name=name)


def _as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Node(np.asarray(x, dtype=dtype))


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        bad = int(value.size - np.count_nonzero(np.isfinite(value)))
        raise NumericFault(f"{op}: produced {bad} non-finite value(s) in output of shape {value.shape}")


def _make(value: np.ndarray, parents: Sequence[Node], rule, op: str) -> Node:
    _check_finite(value, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True, op=op)
    return Node(value, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Node:
    a, b = _binary_operands(a, b)
    _broadcast_shape("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), rule, "add")


def sub(a, b) -> Node:
    a, b = _binary_operands(a, b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), rule, "sub")


def mul(a, b) -> Node:
    a, b = _binary_operands(a, b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), rule, "mul")


def div(a, b) -> Node:
    a, b = _binary_operands(a, b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value

    def rule(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), rule, "div")


def _binary_operands(a, b) -> tuple[Node, Node]:
    if isinstance(a, Node):
        return a, _as_node(b, a)
    b = _as_node(b)
    return _as_node(a, b), b


def maximum(x: Node, floor: float) -> Node:
    """Elementwise max against a constant; gradient passes where x > floor."""
    keep = x.value > floor
    out = np.where(keep, x.value, np.asarray(floor, dtype=x.dtype))

    def rule(g):
        return (g * keep,)

    return _make(out, (x,), rule, "maximum")


# ---------------------------------------------------------------------------
# elementwise unary


def neg(x: Node) -> Node:
    return _make(-x.value, (x,), lambda g: (-g,), "neg")


def relu(x: Node) -> Node:
    pos = x.value > 0
    return _make(np.where(pos, x.value, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x: Node, slope: float = 0.01) -> Node:
    pos = x.value > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)

    def rule(g):
        return (g * scale,)

    return _make(x.value * scale, (x,), rule, "leaky_relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Node) -> Node:
    out = _sigmoid(x.value)
    # sigma(x) * sigma(-x) keeps the tail derivative away from exact zero
    deriv = out * _sigmoid(-x.value)

    def rule(g):
        return (g * deriv,)

    return _make(out, (x,), rule, "sigmoid")


def softplus(x: Node) -> Node:
    v = x.value
    out = np.logaddexp(np.zeros_like(v), v)

    def rule(g):
        return (g * _sigmoid(v),)

    return _make(out, (x,), rule, "softplus")


def log(x: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.value)
    return _make(out, (x,), lambda g: (g / x.value,), "log")


def exp(x: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def square(x: Node) -> Node:
    return _make(x.value * x.value, (x,), lambda g: (2 * g * x.value,), "square")


def sqrt(x: Node) -> Node:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.value)

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / (2 * out),)

    return _make(out, (x,), rule, "sqrt")


def abs_(x: Node) -> Node:
    # subgradient 0 at the kink
    sgn = np.sign(x.value)
    return _make(np.abs(x.value), (x,), lambda g: (g * sgn,), "abs")


def stop_gradient(x: Node) -> Node:
    return Node(x.value, op="stop_gradient")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Node, axis=None, keepdims: bool = False) -> Node:
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), rule, "sum")


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    if axis is None:
        n = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Node, shape) -> Node:
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def broadcast_to(x: Node, shape) -> Node:
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError:
        raise ShapeError("broadcast", x.shape, tuple(shape)) from None
    return _make(out.copy(), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def concat(nodes: Sequence[Node], axis: int = 1) -> Node:
    nodes = list(nodes)
    if len(nodes) == 1:
        return nodes[0]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(n.shape for n in nodes)) from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def rule(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _make(out, nodes, rule, "concat")


def slice_(x: Node, key) -> Node:
    out = x.value[key]

    def rule(g):
        full = np.zeros_like(x.value)
        full[key] = g
        return (full,)

    return _make(np.array(out), (x,), rule, "slice")


def matmul(a: Node, b: Node) -> Node:
    a, b = _binary_operands(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def rule(g):
        return g @ b.value.T, a.value.T @ g

    return _make(a.value @ b.value, (a, b), rule, "matmul")


# ---------------------------------------------------------------------------
# convolutions (NCHW; weights stored as (out, in, k, k) for both kinds)


def _conv_checks(op: str, x: Node, w: Node, b: Node | None, stride: int, in_axis: int) -> int:
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(op, x.shape, w.shape)
    k = w.shape[2]
    if w.shape[3] != k:
        raise ShapeError(op, w.shape, detail="square kernels only")
    if stride not in (1, 2):
        raise ShapeError(op, x.shape, detail=f"stride {stride} unsupported (1 or 2)")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(op, x.shape, w.shape, detail="input channels disagree with weight")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(op, b.shape, (w.shape[0],), detail="bias must have one entry per filter")
    return k


def conv2d(x: Node, w: Node, b: Node | None = None, stride: int = 1, padding: int = 0) -> Node:
    k = _conv_checks("conv2d", x, w, b, stride, 1)
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < k or wp < k:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.value
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * k * k)
    wm = w.value.reshape(cout, cin * k * k)
    out = cols @ wm.T
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    if b is not None:
        out += b.value[:, None, None]

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(bsz, ho, wo, cin, k, k)
            dxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += (
                        dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2))
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, rule, "conv2d")


def conv_transpose2d(x: Node, w: Node, b: Node | None = None, stride: int = 2, padding: int = 0,
                     output_padding: int = 0) -> Node:
    """Transposed convolution; ``w`` has shape (out, in, k, k)."""
    k = _conv_checks("conv_transpose2d", x, w, b, stride, 1)
    if output_padding > padding or output_padding >= stride and output_padding:
        raise ShapeError("conv_transpose2d", x.shape, detail="output_padding must be < stride and <= padding")
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    fh, fw = (h - 1) * stride + k, (wd - 1) * stride + k
    ho, wo = fh - 2 * padding + output_padding, fw - 2 * padding + output_padding
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv_transpose2d", x.shape, w.shape, detail="empty output")
    xm = x.value.transpose(0, 2, 3, 1).reshape(-1, cin)
    wm = w.value.reshape(cout, cin, k * k).transpose(1, 0, 2).reshape(cin, cout * k * k)
    cols = (xm @ wm).reshape(bsz, h, wd, cout, k, k)
    full = np.zeros((bsz, cout, fh, fw), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            full[:, :, u:u + stride * h:stride, v:v + stride * wd:stride] += cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(full[:, :, padding:padding + ho, padding:padding + wo])
    if b is not None:
        out += b.value[:, None, None]

    def rule(g):
        gfull = np.zeros((bsz, cout, fh, fw), dtype=g.dtype)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        win = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :wd]
        dcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * h * wd, cout * k * k)
        gx = (dcols @ wm.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = (xm.T @ dcols).reshape(cin, cout, k * k).transpose(1, 0, 2).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, rule, "conv_transpose2d")


# ---------------------------------------------------------------------------
# custom forward/backward pairs


def custom_grad_op(forward_fn: Callable[..., np.ndarray],
                   backward_fn: Callable[..., Sequence[np.ndarray | None]],
                   inputs: Sequence[Node], op: str = "custom") -> Node:
    """Apply ``forward_fn`` to the input values and register ``backward_fn``.

    ``backward_fn(upstream, *input_values)`` returns one gradient per input.
    The true derivative of ``forward_fn`` is never consulted.
    """
    inputs = list(inputs)
    values = [n.value for n in inputs]
    out = np.asarray(forward_fn(*values))

    def rule(g):
        grads = tuple(backward_fn(g, *values))
        if len(grads) != len(inputs):
            raise ShapeError(op, detail=f"backward returned {len(grads)} gradients for {len(inputs)} inputs")
        for n, gi in zip(inputs, grads):
            if gi is not None and np.shape(gi) != n.shape:
                raise ShapeError(op, np.shape(gi), n.shape, detail="gradient shape differs from input")
        return grads

    return _make(out, inputs, rule, op)


# ---------------------------------------------------------------------------
# registry for forward_op(kind, ...)

OPS: dict[str, Callable[..., Node]] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "conv2d": conv2d, "conv_transpose2d": conv_transpose2d,
    "relu": relu, "leaky_relu": leaky_relu, "sigmoid": sigmoid, "softplus": softplus,
    "log": log, "exp": exp, "square": square, "sqrt": sqrt, "abs": abs_, "maximum": maximum,
    "sum": sum_, "mean": mean, "reshape": reshape, "concat": lambda *xs, axis=1: concat(xs, axis),
    "slice": slice_, "broadcast": broadcast_to,
}


def forward_op(kind: str, inputs: Sequence[Node], **attrs) -> Node:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            mark = state.get(id(node))
            if mark == 2:
                continue
            if mark == 1:
                raise GraphError(f"cycle detected at {node!r}")
            state[id(node)] = 1
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            if parent.requires_grad:
                pmark = state.get(id(parent))
                if pmark == 1:
                    raise GraphError(f"cycle detected at {parent!r}")
                if pmark is None:
                    stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns a map from leaf node to its accumulated gradient.  A loss node can
    be differentiated once; build a fresh graph for the next step.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild it before differentiating again")
    loss._consumed = True
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        pgrads = node.backward_rule(g)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(node.op, pg.shape, parent.shape, detail="backward produced misshapen gradient")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


# ---------------------------------------------------------------------------
# finite-difference validation


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-3
    flagged: dict[str, list[tuple[int, ...]]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not any(self.flagged.values())

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_diff_check(f: Callable[[], Node], params: Sequence[Node], h: float = 1e-3, tol: float = 1e-3,
                      abs_floor: float = 1e-6) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, abs_floor)``.  Run
    with float64 parameters for meaningful results at small ``h``.
    """
    for p in params:
        p.zero_grad()
    backward(f())
    report = GradcheckReport(tol=tol)
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        worst = 0.0
        bad = []
        with no_grad():
            for idx in np.ndindex(p.shape):
                orig = p.value[idx]
                p.value[idx] = orig + h
                fp = float(f().value.reshape(-1)[0])
                p.value[idx] = orig - h
                fm = float(f().value.reshape(-1)[0])
                p.value[idx] = orig
                numeric = (fp - fm) / (2 * h)
                a = float(analytic[idx])
                err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
                worst = max(worst, err)
                if err > tol:
                    bad.append(idx)
        report.max_rel_error[name] = worst
        report.flagged[name] = bad
    return report
