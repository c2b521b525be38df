"""Dense tensors with reverse-mode automatic differentiation.

Every operation is eager: the numpy result is computed immediately and the
producing op, its inputs and a small context are recorded on the output
tensor. The recorded nodes form a :class:`Graph` that can be differentiated
with :func:`backward` or replayed on new leaf values with :func:`forward`.

Broadcasting is deliberately absent except for the trailing-channel ops
``bias_add`` and ``scale_channels``; every other binary op requires equal
shapes and raises :class:`ShapeError` otherwise.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "precision",
    "get_default_dtype",
    "register_op",
    "backward",
    "forward",
    "grad",
]


class ShapeError(ValueError):
    """Raised when op inputs have inconsistent shapes."""


_DEFAULT_DTYPE: type = np.float32


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@dataclass(frozen=True)
class Op:
    forward: Callable[..., tuple[np.ndarray, Any]]
    vjp: Callable[..., tuple]


_OPS: dict[str, Op] = {}


def register_op(name: str, forward: Callable, vjp: Callable) -> None:
    """Add an op kind.

    ``forward(*arrays, **attrs)`` returns ``(output, ctx)``;
    ``vjp(g, ctx, needs, **attrs)`` returns one gradient (or None) per input,
    where ``needs[i]`` tells whether input ``i`` requires a gradient.
    """
    _OPS[name] = Op(forward, vjp)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "inputs", "attrs", "ctx")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.attrs: dict[str, Any] = {}
        self.ctx: Any = None

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
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op or "leaf"
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other: Tensor) -> Tensor:
        return apply("add", self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return apply("sub", self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return apply("mul", self, other)
        return apply("scale", self, factor=float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return apply("scale", self, factor=-1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return apply("matmul", self, other)

    def __getitem__(self, index) -> Tensor:
        return apply("slice", self, index=_normalize_index(index))

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(int(s) for s in shape))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", self, axes=tuple(axes) if axes else None)


def apply(name: str, *inputs: Tensor, **attrs) -> Tensor:
    op = _OPS[name]
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{name}: expected Tensor inputs, got {type(t).__name__}")
    try:
        out, ctx = op.forward(*(t.data for t in inputs), **attrs)
    except ShapeError as exc:
        shapes = ", ".join(f"{t.name or 'tensor'}{list(t.shape)}" for t in inputs)
        raise ShapeError(f"op '{name}' with inputs ({shapes}): {exc}") from None
    res = Tensor.__new__(Tensor)
    res.data = out
    res.requires_grad = any(t.requires_grad for t in inputs)
    res.name = None
    res.op = name
    res.inputs = inputs
    res.attrs = attrs
    res.ctx = ctx
    return res


def _normalize_index(index) -> tuple:
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not isinstance(part, (slice, int, np.integer)):
            raise TypeError("only basic slicing is supported")
    return index


# ---------------------------------------------------------------------------
# graph utilities


def _topo_order(outputs: Sequence[Tensor], grad_only: bool) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in outputs:
        if id(root) in seen:
            continue
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.inputs):
                if id(parent) in seen:
                    continue
                if grad_only and not parent.requires_grad:
                    continue
                stack.append((parent, False))
    return order


class Graph:
    """A recorded computation: named input leaves, named outputs, topological order."""

    def __init__(self, outputs: dict[str, Tensor], inputs: dict[str, Tensor] | None = None):
        self.outputs = dict(outputs)
        self.inputs = dict(inputs or {})
        self.order = _topo_order(list(self.outputs.values()), grad_only=False)
        position = {id(n): i for i, n in enumerate(self.order)}
        for name, leaf in self.inputs.items():
            if not leaf.is_leaf:
                raise ValueError(f"graph input '{name}' is not a leaf")
            if id(leaf) not in position:
                raise ValueError(f"graph input '{name}' does not reach any output")
        self._position = position

    @classmethod
    def trace(cls, fn: Callable[..., Tensor | dict[str, Tensor]], **inputs) -> Graph:
        """Run ``fn`` on leaves built from ``inputs`` and record the result."""
        leaves = {}
        for name, value in inputs.items():
            if isinstance(value, Tensor):
                leaves[name] = value
            else:
                leaves[name] = Tensor(value, requires_grad=True, name=name)
        out = fn(**leaves)
        if isinstance(out, Tensor):
            out = {"out": out}
        return cls(out, leaves)

    def __len__(self) -> int:
        return len(self.order)

    def check(self) -> None:
        """Verify that every node's inputs precede it."""
        for i, node in enumerate(self.order):
            for parent in node.inputs:
                j = self._position.get(id(parent))
                if j is None or j >= i:
                    raise AssertionError(f"node {i} ({node.op}) precedes its input")


def forward(graph: Graph, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Re-evaluate ``graph`` with new values bound to its named inputs."""
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise KeyError(f"unbound graph inputs: {sorted(missing)}")
    extra = set(inputs) - set(graph.inputs)
    if extra:
        raise KeyError(f"unknown graph inputs: {sorted(extra)}")
    values: dict[int, np.ndarray] = {
        id(graph.inputs[k]): np.asarray(v, dtype=graph.inputs[k].dtype) for k, v in inputs.items()
    }
    for node in graph.order:
        if id(node) in values:
            continue
        if node.is_leaf:
            values[id(node)] = node.data
            continue
        args = [values[id(p)] for p in node.inputs]
        try:
            out, _ = _OPS[node.op].forward(*args, **node.attrs)
        except ShapeError as exc:
            label = node.name or f"#{graph._position[id(node)]}"
            raise ShapeError(f"node {label} (op '{node.op}'): {exc}") from None
        values[id(node)] = out
    return {k: values[id(t)] for k, t in graph.outputs.items()}


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every leaf with ``requires_grad``.

    Untrainable leaves and nodes that do not depend on a trainable leaf are
    skipped entirely.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    result: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return result
    order = _topo_order([loss], grad_only=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            result[node] = g
            continue
        needs = tuple(p.requires_grad for p in node.inputs)
        in_grads = _OPS[node.op].vjp(g, node.ctx, needs, **node.attrs)
        for parent, need, gp in zip(node.inputs, needs, in_grads):
            if not need or gp is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    return result


def grad(loss: Tensor, wrt: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Like :func:`backward` but keyed by name; zero-filled for unreached leaves."""
    raw = backward(loss)
    out = {}
    for name, leaf in wrt.items():
        if not leaf.requires_grad:
            continue
        g = raw.get(leaf)
        out[name] = np.zeros_like(leaf.data) if g is None else g
    return out


# ---------------------------------------------------------------------------
# op kinds


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def _add_fwd(a, b):
    _same_shape(a, b)
    return a + b, None


def _add_vjp(g, ctx, needs):
    return g, g


def _sub_fwd(a, b):
    _same_shape(a, b)
    return a - b, None


def _sub_vjp(g, ctx, needs):
    return g, (-g if needs[1] else None)


def _mul_fwd(a, b):
    _same_shape(a, b)
    return a * b, (a, b)


def _mul_vjp(g, ctx, needs):
    a, b = ctx
    return (g * b if needs[0] else None), (g * a if needs[1] else None)


def _scale_fwd(x, factor):
    return x * x.dtype.type(factor), None


def _scale_vjp(g, ctx, needs, factor):
    return (g * g.dtype.type(factor),)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    elif a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"incompatible batched shapes {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _matmul_vjp(g, ctx, needs):
    a, b = ctx
    ga = None
    if needs[0]:
        if b.ndim == 2:  # one flat gemm is faster than a stacked one
            ga = (g.reshape(-1, g.shape[-1]) @ b.T).reshape(a.shape)
        else:
            ga = g @ _swap(b)
    gb = None
    if needs[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _swap(a) @ g
    return ga, gb


def _channel_check(x, v):
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"channel vector {v.shape} does not match trailing axis of {x.shape}")


def _bias_add_fwd(x, b):
    _channel_check(x, b)
    return x + b, None


def _bias_add_vjp(g, ctx, needs):
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if needs[1] else None
    return g, gb


def _scale_channels_fwd(x, s):
    _channel_check(x, s)
    return x * s, (x, s)


def _scale_channels_vjp(g, ctx, needs):
    x, s = ctx
    gx = g * s if needs[0] else None
    gs = (g * x).reshape(-1, g.shape[-1]).sum(axis=0) if needs[1] else None
    return gx, gs


def _relu_fwd(x):
    return np.maximum(x, 0), x > 0


def _relu_vjp(g, mask, needs):
    return (g * mask,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and much faster than scipy's expit on float32
    half = x.dtype.type(0.5)
    return half + half * np.tanh(half * x)


def _swish_fwd(x):
    s = _sigmoid(x)
    return x * s, (x, s)


def _swish_vjp(g, ctx, needs):
    x, s = ctx
    return (g * (s * (1 + x * (1 - s))),)


def _sigmoid_fwd(x):
    s = _sigmoid(x)
    return s, s


def _sigmoid_vjp(g, s, needs):
    return (g * s * (1 - s),)


def _softmax_fwd(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, y


def _softmax_vjp(g, y, needs, axis=-1):
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax_fwd(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return y, y


def _log_softmax_vjp(g, y, needs, axis=-1):
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


def _sum_fwd(x, axis=None):
    return np.asarray(x.sum(axis=axis), dtype=x.dtype), x.shape


def _sum_vjp(g, in_shape, needs, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, in_shape).copy(),)


def _mean_fwd(x, axis=None):
    return np.asarray(x.mean(axis=axis), dtype=x.dtype), x.shape


def _mean_vjp(g, in_shape, needs, axis=None):
    axes = range(len(in_shape)) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([in_shape[a] for a in axes]))
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / g.dtype.type(count), in_shape).copy(),)


def _normalize_fwd(x, axis=-1, eps=1e-5):
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = xc * inv
    return y, (y, inv)


def _normalize_vjp(g, ctx, needs, axis=-1, eps=1e-5):
    y, inv = ctx
    gm = g.mean(axis=axis, keepdims=True)
    gy = (g * y).mean(axis=axis, keepdims=True)
    return (inv * (g - gm - y * gy),)


def _reshape_fwd(x, shape):
    try:
        return x.reshape(shape), x.shape
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None


def _reshape_vjp(g, in_shape, needs, shape):
    return (g.reshape(in_shape),)


def _transpose_fwd(x, axes=None):
    if axes is not None and sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation for rank {x.ndim}")
    return np.transpose(x, axes), None


def _transpose_vjp(g, ctx, needs, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (np.transpose(g, inv),)


def _slice_fwd(x, index):
    try:
        return x[index], x.shape
    except IndexError as exc:
        raise ShapeError(str(exc)) from None


def _slice_vjp(g, shape, needs, index):
    out = np.zeros(shape, dtype=g.dtype)
    out[index] = g
    return (out,)


def _concat_fwd(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return out, np.cumsum([x.shape[axis] for x in xs])[:-1]


def _concat_vjp(g, splits, needs, axis=0):
    return tuple(np.split(g, splits, axis=axis))


def _gather_fwd(table, ids):
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("gather needs a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"ids out of range for table with {table.shape[0]} rows")
    return table[ids], table.shape


def _gather_vjp(g, shape, needs, ids):
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, np.asarray(ids), g)
    return (out,)


def _dwconv_fwd(x, w):
    # x: [B, T, D], w: [K, D] with odd K, zero "same" padding along T
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[2] or w.shape[0] % 2 != 1:
        raise ShapeError(f"depthwise conv needs x[B,T,D], w[K odd, D]; got {x.shape}, {w.shape}")
    k = w.shape[0]
    p = k // 2
    t = x.shape[1]
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    y = np.zeros_like(x)
    for j in range(k):
        y += xp[:, j : j + t] * w[j]
    return y, (xp, w)


def _dwconv_vjp(g, ctx, needs):
    xp, w = ctx
    k = w.shape[0]
    p = k // 2
    t = g.shape[1]
    gx = gw = None
    if needs[0]:
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j : j + t] += g * w[j]
        gx = gxp[:, p : p + t]
    if needs[1]:
        gw = np.stack([(g * xp[:, j : j + t]).reshape(-1, g.shape[2]).sum(axis=0) for j in range(k)])
    return gx, gw


register_op("add", _add_fwd, _add_vjp)
register_op("sub", _sub_fwd, _sub_vjp)
register_op("mul", _mul_fwd, _mul_vjp)
register_op("scale", _scale_fwd, _scale_vjp)
register_op("matmul", _matmul_fwd, _matmul_vjp)
register_op("bias_add", _bias_add_fwd, _bias_add_vjp)
register_op("scale_channels", _scale_channels_fwd, _scale_channels_vjp)
register_op("relu", _relu_fwd, _relu_vjp)
register_op("swish", _swish_fwd, _swish_vjp)
register_op("sigmoid", _sigmoid_fwd, _sigmoid_vjp)
register_op("softmax", _softmax_fwd, _softmax_vjp)
register_op("log_softmax", _log_softmax_fwd, _log_softmax_vjp)
register_op("sum", _sum_fwd, _sum_vjp)
register_op("mean", _mean_fwd, _mean_vjp)
register_op("normalize", _normalize_fwd, _normalize_vjp)
register_op("reshape", _reshape_fwd, _reshape_vjp)
register_op("transpose", _transpose_fwd, _transpose_vjp)
register_op("slice", _slice_fwd, _slice_vjp)
register_op("concat", _concat_fwd, _concat_vjp)
register_op("gather", _gather_fwd, _gather_vjp)
register_op("depthwise_conv1d", _dwconv_fwd, _dwconv_vjp)


# ---------------------------------------------------------------------------
# functional front-end


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return apply("scale", x, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply("matmul", a, b)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return apply("bias_add", x, b)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    return apply("scale_channels", x, s)


def relu(x: Tensor) -> Tensor:
    return apply("relu", x)


def swish(x: Tensor) -> Tensor:
    return apply("swish", x)


def sigmoid(x: Tensor) -> Tensor:
    return apply("sigmoid", x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply("softmax", x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply("log_softmax", x, axis=axis)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    return apply("sum", x, axis=axis)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    return apply("mean", x, axis=axis)


def normalize(x: Tensor, axis: int | tuple[int, ...] = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance standardization over ``axis`` (no affine part)."""
    return apply("normalize", x, axis=axis, eps=eps)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return x.reshape(tuple(shape))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return apply("transpose", x, axes=None if axes is None else tuple(axes))


def concat(xs: Iterable[Tensor], axis: int = 0) -> Tensor:
    return apply("concat", *xs, axis=axis)


def gather(table: Tensor, ids) -> Tensor:
    return apply("gather", table, ids=np.asarray(ids, dtype=np.int64))


def depthwise_conv1d(x: Tensor, w: Tensor) -> Tensor:
    return apply("depthwise_conv1d", x, w)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def op_kinds() -> list[str]:
    return sorted(_OPS)
