"""Dense tensors and reverse-mode differentiation over a small, closed op set.

A :class:`Graph` is a topologically ordered list of nodes. Leaves are named
input slots that get bound to numpy arrays at evaluation time; every other
node applies one primitive op to earlier nodes. Graphs are built with the
operator-overloaded :class:`Var` handles::

    g = Graph()
    x = g.leaf("x")
    loss = (x * x).sum()
    grads = grad(g, loss, ["x"], {"x": np.array([1.0, 2.0, 3.0])})

Evaluation never mutates the graph, so a graph can be shared between threads.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Graph",
    "Var",
    "Evaluation",
    "GraphError",
    "ShapeError",
    "UnboundLeafError",
    "NonFiniteError",
    "forward",
    "grad",
    "value_and_grad",
    "finite_difference",
    "get_dtype",
    "set_precision",
    "precision",
    "PRIMITIVES",
]

# ---------------------------------------------------------------------------
# precision
# ---------------------------------------------------------------------------

_PRECISIONS = {"float32": np.float32, "float64": np.float64, "f32": np.float32, "f64": np.float64}
_state = threading.local()
_default_dtype = np.float32


def get_dtype() -> type:
    return getattr(_state, "dtype", _default_dtype)


def set_precision(name: str) -> None:
    """Set the process-wide default float precision ("float32" or "float64")."""
    global _default_dtype
    try:
        _default_dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None
    _state.__dict__.pop("dtype", None)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch precision for the current thread."""
    previous = getattr(_state, "dtype", None)
    try:
        _state.dtype = _PRECISIONS[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}") from None
    try:
        yield
    finally:
        if previous is None:
            del _state.dtype
        else:
            _state.dtype = previous


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------


class GraphError(Exception):
    pass


class ShapeError(GraphError, ValueError):
    pass


class UnboundLeafError(GraphError, KeyError):
    pass


class NonFiniteError(GraphError, FloatingPointError):
    def __init__(self, node_id: int, op: str, message: str = "") -> None:
        self.node_id = node_id
        self.op = op
        super().__init__(f"non-finite value at node {node_id} ({op}){': ' + message if message else ''}")


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[int, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)


class Var:
    """Handle to a node of a :class:`Graph`; arithmetic on it appends nodes."""

    __slots__ = ("graph", "id")
    __array_priority__ = 1000  # make ndarray <op> Var defer to Var

    def __init__(self, graph: "Graph", node_id: int) -> None:
        self.graph = graph
        self.id = node_id

    def __repr__(self) -> str:
        node = self.graph.nodes[self.id]
        return f"Var({self.id}, {node.op})"

    def __hash__(self) -> int:
        return hash((id(self.graph), self.id))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Var) and other.graph is self.graph and other.id == self.id

    # arithmetic -----------------------------------------------------------
    def _binary(self, op: str, other: Any, scalar_op: Optional[str], reverse: bool = False) -> "Var":
        if isinstance(other, Var):
            a, b = (other, self) if reverse else (self, other)
            return self.graph.apply(op, a, b)
        if np.isscalar(other) and scalar_op is not None:
            return self.graph.apply(scalar_op, self, value=float(other))
        const = self.graph.constant(np.asarray(other))
        a, b = (const, self) if reverse else (self, const)
        return self.graph.apply(op, a, b)

    def __add__(self, other):
        return self._binary("add", other, "add_scalar")

    def __radd__(self, other):
        return self._binary("add", other, "add_scalar", reverse=True)

    def __sub__(self, other):
        if np.isscalar(other):
            return self.graph.apply("add_scalar", self, value=-float(other))
        return self._binary("sub", other, None)

    def __rsub__(self, other):
        if np.isscalar(other):
            return self.graph.apply("add_scalar", -self, value=float(other))
        return self._binary("sub", other, None, reverse=True)

    def __mul__(self, other):
        return self._binary("mul", other, "mul_scalar")

    def __rmul__(self, other):
        return self._binary("mul", other, "mul_scalar", reverse=True)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division is only defined by a scalar")
        return self.graph.apply("mul_scalar", self, value=1.0 / float(other))

    def __neg__(self):
        return self.graph.apply("negate", self)

    def __matmul__(self, other):
        return self._binary("matmul", other, None)

    def __rmatmul__(self, other):
        return self._binary("matmul", other, None, reverse=True)

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        return self.graph.apply("pow_scalar", self, value=float(exponent))

    # unary / reductions ---------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return self.graph.apply("sum", self, axis=_norm_axis(axis), keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.graph.apply("mean", self, axis=_norm_axis(axis), keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return self.graph.apply("max", self, axis=_norm_axis(axis), keepdims=keepdims)

    def exp(self):
        return self.graph.apply("exp", self)

    def log(self):
        return self.graph.apply("log", self)

    def sqrt(self):
        return self.graph.apply("sqrt", self)

    def relu(self):
        return self.graph.apply("relu", self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.apply("reshape", self, shape=tuple(int(s) for s in shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return self.graph.apply("transpose", self, axes=tuple(axes) if axes else None)

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        return self.graph.apply("slice", self, index=_norm_index(index))


def _norm_axis(axis):
    if axis is None:
        return None
    if isinstance(axis, (list, tuple)):
        return tuple(int(a) for a in axis)
    return int(axis)


def _norm_index(index) -> Tuple[Tuple[Optional[int], Optional[int], Optional[int]], ...]:
    if not isinstance(index, tuple):
        index = (index,)
    out = []
    for item in index:
        if isinstance(item, slice):
            out.append((item.start, item.stop, item.step))
        elif isinstance(item, (int, np.integer)):
            # integer indexing keeps the axis; callers reshape if they need to drop it
            i = int(item)
            out.append((i, i + 1 if i != -1 else None, None))
        else:
            raise TypeError("slice op supports ints and slices only")
    return tuple(out)


class Graph:
    """An append-only, topologically ordered expression graph."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}
        self.constants: Dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, name: str) -> Var:
        if name in self.leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        self.nodes.append(Node("leaf", (), {"name": name}))
        self.leaves[name] = len(self.nodes) - 1
        return Var(self, len(self.nodes) - 1)

    def constant(self, value: np.ndarray, name: Optional[str] = None) -> Var:
        """A leaf with a default binding stored in the graph."""
        if name is None:
            name = f"__const{len(self.constants)}"
        var = self.leaf(name)
        self.constants[name] = np.array(value, copy=True)
        return var

    def var(self, node_id: int) -> Var:
        return Var(self, node_id)

    def apply(self, op: str, *inputs: Var, **attrs: Any) -> Var:
        if op not in PRIMITIVES or op == "leaf":
            raise GraphError(f"op {op!r} is not a primitive")
        ids = []
        for inp in inputs:
            if not isinstance(inp, Var) or inp.graph is not self:
                raise GraphError("inputs must be Vars of this graph")
            ids.append(inp.id)
        self.nodes.append(Node(op, tuple(ids), attrs))
        return Var(self, len(self.nodes) - 1)

    # free functions for ops without a natural method --------------------------
    def concat(self, parts: Sequence[Var], axis: int = 0) -> Var:
        return self.apply("concat", *parts, axis=int(axis))

    def conv2d(self, x: Var, w: Var, stride: int = 1, padding: int = 0) -> Var:
        return self.apply("conv2d", x, w, stride=int(stride), padding=int(padding))

    def batch_norm(self, x: Var, gamma: Var, beta: Var, running_mean: Var, running_var: Var,
                   name: str = "bn", eps: float = 1e-5) -> Var:
        return self.apply("batch_norm", x, gamma, beta, running_mean, running_var, name=name, eps=float(eps))

    def l2_normalize(self, x: Var) -> Var:
        return self.apply("l2_normalize", x)

    def ancestors(self, outputs: Iterable[int]) -> np.ndarray:
        needed = np.zeros(len(self.nodes), dtype=bool)
        stack = list(outputs)
        while stack:
            i = stack.pop()
            if needed[i]:
                continue
            needed[i] = True
            stack.extend(self.nodes[i].inputs)
        return needed


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


@dataclass
class _Context:
    mode: str
    bn_stats: Dict[str, Tuple[np.ndarray, np.ndarray]]


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


# Each primitive: fwd(vals, attrs, ctx) -> (out, saved); bwd(g, vals, out, saved, attrs, need) -> grads
def _add_f(v, a, c):
    return v[0] + v[1], None


def _add_b(g, v, o, s, a, need):
    return (_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(g, v[1].shape) if need[1] else None)


def _sub_f(v, a, c):
    return v[0] - v[1], None


def _sub_b(g, v, o, s, a, need):
    return (_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(-g, v[1].shape) if need[1] else None)


def _mul_f(v, a, c):
    return v[0] * v[1], None


def _mul_b(g, v, o, s, a, need):
    return (_unbroadcast(g * v[1], v[0].shape) if need[0] else None,
            _unbroadcast(g * v[0], v[1].shape) if need[1] else None)


def _matmul_f(v, a, c):
    if v[0].ndim < 2 or v[1].ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    return np.matmul(v[0], v[1]), None


def _matmul_b(g, v, o, s, a, need):
    ga = gb = None
    if need[0]:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(v[1], -1, -2)), v[0].shape)
    if need[1]:
        gb = _unbroadcast(np.matmul(np.swapaxes(v[0], -1, -2), g), v[1].shape)
    return ga, gb


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, ch, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ch * kh * kw)
    return cols, oh, ow


def _conv2d_f(v, a, c):
    x, w = v
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d expects x[N,C,H,W] and w[F,C,kh,kw]; got {x.shape} and {w.shape}")
    f, _, kh, kw = w.shape
    stride, padding = a["stride"], a["padding"]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = (cols @ w.reshape(f, -1).T).reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, oh, ow)


def _conv2d_b(g, v, o, saved, a, need):
    x, w = v
    cols, oh, ow = saved
    f, ch, kh, kw = w.shape
    stride, padding = a["stride"], a["padding"]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
    gx = gw = None
    if need[1]:
        gw = (g2.T @ cols).reshape(w.shape)
    if need[0]:
        dcols = (g2 @ w.reshape(f, -1)).reshape(x.shape[0], oh, ow, ch, kh, kw)
        n, _, hh, ww = x.shape
        dxp = np.zeros((n, ch, hh + 2 * padding, ww + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, padding:padding + hh, padding:padding + ww] if padding else dxp
    return gx, gw


def _relu_f(v, a, c):
    return np.maximum(v[0], 0), None


def _relu_b(g, v, o, s, a, need):
    # relu'(0) := 0
    return (g * (v[0] > 0),)


def _bn_axes(x: np.ndarray):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")


def _bn_f(v, a, c):
    x, gamma, beta, rmean, rvar = v
    axes, bshape = _bn_axes(x)
    eps = a["eps"]
    if c.mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        c.bn_stats[a["name"]] = (mean, var)
    else:
        mean, var = rmean, rvar
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    return out, (xhat, invstd, c.mode)


def _bn_b(g, v, o, saved, a, need):
    x, gamma, beta, rmean, rvar = v
    xhat, invstd, mode = saved
    axes, bshape = _bn_axes(x)
    gx = ggamma = gbeta = grm = grv = None
    if need[1]:
        ggamma = (g * xhat).sum(axis=axes)
    if need[2]:
        gbeta = g.sum(axis=axes)
    dxhat = g * gamma.reshape(bshape)
    if mode == "train":
        if need[0]:
            n = x.size // x.shape[1]
            gx = (invstd.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        if need[3]:
            grm = np.zeros_like(rmean)
        if need[4]:
            grv = np.zeros_like(rvar)
    else:
        if need[0]:
            gx = dxhat * invstd.reshape(bshape)
        if need[3]:
            grm = -(dxhat * invstd.reshape(bshape)).sum(axis=axes)
        if need[4]:
            grv = (dxhat * xhat).sum(axis=axes) * (-0.5) * invstd ** 2
    return gx, ggamma, gbeta, grm, grv


def _sum_f(v, a, c):
    return np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]), None


def _sum_b(g, v, o, s, a, need):
    return (_expand_reduced(g, v[0].shape, a["axis"], a["keepdims"]).copy(),)


def _mean_f(v, a, c):
    return np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"]), None


def _mean_b(g, v, o, s, a, need):
    n = _reduced_count(v[0].shape, a["axis"])
    return (_expand_reduced(g, v[0].shape, a["axis"], a["keepdims"]) / n,)


def _max_f(v, a, c):
    return np.max(v[0], axis=a["axis"], keepdims=a["keepdims"]), None


def _max_b(g, v, o, s, a, need):
    x = v[0]
    axis = a["axis"]
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = tuple(sorted(ax % x.ndim for ax in ((axis,) if isinstance(axis, int) else axis)))
    keep = tuple(ax for ax in range(x.ndim) if ax not in axes)
    moved = np.transpose(x, keep + axes)
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    first = np.argmax(flat, axis=-1)  # ties -> first maximal element
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, first[..., None], 1.0, axis=-1)
    gk = _expand_reduced(g, x.shape, axis, a["keepdims"])
    gk = np.transpose(gk, keep + axes).reshape(flat.shape)
    out = (gk * mask).reshape(moved.shape)
    inverse = np.argsort(keep + axes)
    return (np.transpose(out, inverse),)


def _exp_f(v, a, c):
    with np.errstate(over="ignore"):
        return np.exp(v[0]), None


def _exp_b(g, v, o, s, a, need):
    return (g * o,)


def _log_f(v, a, c):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(v[0]), None


def _log_b(g, v, o, s, a, need):
    return (g / v[0],)


def _sqrt_f(v, a, c):
    with np.errstate(invalid="ignore"):
        return np.sqrt(v[0]), None


def _sqrt_b(g, v, o, s, a, need):
    with np.errstate(divide="ignore"):
        return (g * 0.5 / o,)


def _neg_f(v, a, c):
    return -v[0], None


def _neg_b(g, v, o, s, a, need):
    return (-g,)


def _reshape_f(v, a, c):
    return np.reshape(v[0], a["shape"]), None


def _reshape_b(g, v, o, s, a, need):
    return (np.reshape(g, v[0].shape),)


def _transpose_f(v, a, c):
    return np.transpose(v[0], a["axes"]), None


def _transpose_b(g, v, o, s, a, need):
    axes = a["axes"]
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _concat_f(v, a, c):
    return np.concatenate(v, axis=a["axis"]), None


def _concat_b(g, v, o, s, a, need):
    axis = a["axis"]
    bounds = np.cumsum([x.shape[axis] for x in v])[:-1]
    parts = np.split(g, bounds, axis=axis)
    return tuple(p if n else None for p, n in zip(parts, need))


def _slice_f(v, a, c):
    idx = tuple(slice(*t) for t in a["index"])
    return v[0][idx], None


def _slice_b(g, v, o, s, a, need):
    idx = tuple(slice(*t) for t in a["index"])
    out = np.zeros_like(v[0])
    out[idx] = g
    return (out,)


def _l2n_f(v, a, c):
    x = v[0]
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise FloatingPointError("l2_normalize of a zero-norm vector")
    return x / norm, norm


def _l2n_b(g, v, o, norm, a, need):
    return ((g - o * np.sum(g * o, axis=-1, keepdims=True)) / norm,)


def _add_scalar_f(v, a, c):
    return v[0] + v[0].dtype.type(a["value"]), None


def _add_scalar_b(g, v, o, s, a, need):
    return (g,)


def _mul_scalar_f(v, a, c):
    return v[0] * v[0].dtype.type(a["value"]), None


def _mul_scalar_b(g, v, o, s, a, need):
    return (g * g.dtype.type(a["value"]),)


def _pow_scalar_f(v, a, c):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.power(v[0], v[0].dtype.type(a["value"])), None


def _pow_scalar_b(g, v, o, s, a, need):
    p = a["value"]
    with np.errstate(divide="ignore", invalid="ignore"):
        return (g * p * np.power(v[0], p - 1),)


@dataclass(frozen=True)
class _Primitive:
    forward: Callable
    backward: Callable


PRIMITIVES: Dict[str, Optional[_Primitive]] = {
    "leaf": None,
    "add": _Primitive(_add_f, _add_b),
    "sub": _Primitive(_sub_f, _sub_b),
    "mul": _Primitive(_mul_f, _mul_b),
    "matmul": _Primitive(_matmul_f, _matmul_b),
    "conv2d": _Primitive(_conv2d_f, _conv2d_b),
    "relu": _Primitive(_relu_f, _relu_b),
    "batch_norm": _Primitive(_bn_f, _bn_b),
    "mean": _Primitive(_mean_f, _mean_b),
    "sum": _Primitive(_sum_f, _sum_b),
    "max": _Primitive(_max_f, _max_b),
    "exp": _Primitive(_exp_f, _exp_b),
    "log": _Primitive(_log_f, _log_b),
    "sqrt": _Primitive(_sqrt_f, _sqrt_b),
    "negate": _Primitive(_neg_f, _neg_b),
    "reshape": _Primitive(_reshape_f, _reshape_b),
    "transpose": _Primitive(_transpose_f, _transpose_b),
    "concat": _Primitive(_concat_f, _concat_b),
    "slice": _Primitive(_slice_f, _slice_b),
    "l2_normalize": _Primitive(_l2n_f, _l2n_b),
    "add_scalar": _Primitive(_add_scalar_f, _add_scalar_b),
    "mul_scalar": _Primitive(_mul_scalar_f, _mul_scalar_b),
    "pow_scalar": _Primitive(_pow_scalar_f, _pow_scalar_b),
}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    """Node values of one forward pass plus the batch statistics BN saw."""

    values: List[Optional[np.ndarray]]
    bn_stats: Dict[str, Tuple[np.ndarray, np.ndarray]]
    saved: List[Any]

    def __getitem__(self, var: Union[Var, int]) -> np.ndarray:
        idx = var.id if isinstance(var, Var) else var
        val = self.values[idx]
        if val is None:
            raise KeyError(f"node {idx} was not evaluated")
        return val


Bindings = Mapping[str, Any]


def _as_ids(outputs) -> List[int]:
    if isinstance(outputs, (Var, int)):
        outputs = [outputs]
    return [o.id if isinstance(o, Var) else int(o) for o in outputs]


def _evaluate(graph: Graph, outputs: Sequence[int], bindings: Bindings, mode: str) -> Evaluation:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    dtype = get_dtype()
    needed = graph.ancestors(outputs)
    values: List[Optional[np.ndarray]] = [None] * len(graph.nodes)
    saved: List[Any] = [None] * len(graph.nodes)
    ctx = _Context(mode=mode, bn_stats={})
    for i, node in enumerate(graph.nodes):
        if not needed[i]:
            continue
        if node.op == "leaf":
            name = node.attrs["name"]
            if name in bindings:
                raw = bindings[name]
            elif name in graph.constants:
                raw = graph.constants[name]
            else:
                raise UnboundLeafError(f"leaf {name!r} (node {i}) is not bound")
            val = np.asarray(raw, dtype=dtype)
        else:
            prim = PRIMITIVES[node.op]
            args = [values[j] for j in node.inputs]
            try:
                val, saved[i] = prim.forward(args, node.attrs, ctx)
            except ShapeError as exc:
                raise ShapeError(f"node {i} ({node.op}): {exc}") from None
            except FloatingPointError as exc:
                raise NonFiniteError(i, node.op, str(exc)) from None
            except ValueError as exc:
                raise ShapeError(f"node {i} ({node.op}): {exc}") from None
            val = np.asarray(val, dtype=dtype)
        if not np.isfinite(val).all():
            raise NonFiniteError(i, node.op)
        values[i] = val
    return Evaluation(values=values, bn_stats=ctx.bn_stats, saved=saved)


def forward(graph: Graph, bindings: Bindings, outputs=None, mode: str = "eval") -> Dict[int, np.ndarray]:
    """Evaluate ``outputs`` (default: the last node) and return {node id: value}.

    Raises:
        UnboundLeafError: a needed leaf has no binding.
        ShapeError: an op received inconsistent shapes.
        NonFiniteError: some intermediate became NaN/Inf.
    """
    if outputs is None:
        outputs = [len(graph.nodes) - 1]
    ids = _as_ids(outputs)
    ev = _evaluate(graph, ids, bindings, mode)
    return {i: ev.values[i] for i in ids}


def evaluate(graph: Graph, bindings: Bindings, outputs, mode: str = "eval") -> Evaluation:
    """Like :func:`forward` but returns the full :class:`Evaluation`."""
    return _evaluate(graph, _as_ids(outputs), bindings, mode)


def value_and_grad(graph: Graph, output, wrt: Sequence[str], bindings: Bindings,
                   mode: str = "eval", extra_outputs=()) -> Tuple[Evaluation, Dict[str, np.ndarray]]:
    out_id = _as_ids(output)[0]
    for name in wrt:
        if name not in graph.leaves:
            raise GraphError(f"unknown leaf {name!r}")
    ev = _evaluate(graph, [out_id] + _as_ids(extra_outputs), bindings, mode)
    out_val = ev.values[out_id]
    if out_val.shape not in ((), (1,)):
        raise ShapeError(f"grad needs a scalar output, node {out_id} has shape {out_val.shape}")

    n = len(graph.nodes)
    wrt_ids = {graph.leaves[name] for name in wrt}
    on_path = np.zeros(n, dtype=bool)
    for i, node in enumerate(graph.nodes):
        if ev.values[i] is None:
            continue
        if i in wrt_ids or any(on_path[j] for j in node.inputs):
            on_path[i] = True

    grads: List[Optional[np.ndarray]] = [None] * n
    grads[out_id] = np.ones_like(out_val)
    for i in range(out_id, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.op == "leaf" or not on_path[i]:
            continue
        need = [bool(on_path[j]) for j in node.inputs]
        args = [ev.values[j] for j in node.inputs]
        in_grads = PRIMITIVES[node.op].backward(g, args, ev.values[i], ev.saved[i], node.attrs, need)
        for j, gj, nj in zip(node.inputs, in_grads, need):
            if not nj or gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
        grads[i] = None  # free memory early

    result = {}
    for name in wrt:
        idx = graph.leaves[name]
        g = grads[idx]
        leaf_shape = ev.values[idx].shape if ev.values[idx] is not None else None
        if g is None:
            if leaf_shape is None:
                leaf_val = bindings.get(name, graph.constants.get(name))
                leaf_shape = np.shape(leaf_val)
            g = np.zeros(leaf_shape, dtype=get_dtype())
        result[name] = np.asarray(g, dtype=get_dtype())
    return ev, result


def grad(graph: Graph, output, wrt: Sequence[str], bindings: Bindings, mode: str = "eval") -> Dict[str, np.ndarray]:
    """Reverse-mode gradient of the scalar ``output`` w.r.t. the named leaves."""
    return value_and_grad(graph, output, wrt, bindings, mode)[1]


def finite_difference(graph: Graph, output, wrt: Sequence[str], bindings: Bindings, h: float = 1e-3,
                      mode: str = "eval") -> Dict[str, np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time.

    This is the test oracle for :func:`grad`; it shares nothing with the
    backward rules. Evaluation happens at the current precision.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out_id = _as_ids(output)[0]
    dtype = get_dtype()
    base = {k: np.array(v, dtype=dtype, copy=True) for k, v in bindings.items()}

    def f(b):
        val = _evaluate(graph, [out_id], b, mode).values[out_id]
        if val.shape not in ((), (1,)):
            raise ShapeError("finite_difference needs a scalar output")
        return float(np.reshape(val, ()))

    result = {}
    for name in wrt:
        if name not in graph.leaves:
            raise GraphError(f"unknown leaf {name!r}")
        if name not in base:
            base[name] = np.array(graph.constants[name], dtype=dtype, copy=True)
        x = base[name]
        g = np.zeros(x.shape, dtype=np.float64)
        flat = x.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = f(base)
            flat[k] = orig - h
            fm = f(base)
            flat[k] = orig
            g.reshape(-1)[k] = (fp - fm) / (2 * h)
        result[name] = g.astype(dtype)
    return result


def trace(fn: Callable[..., Var], names: Sequence[str]) -> Tuple[Graph, Var]:
    """Build a graph by calling ``fn`` on fresh leaves named ``names``."""
    g = Graph()
    leaves = [g.leaf(n) for n in names]
    return g, fn(*leaves)
