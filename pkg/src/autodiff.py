"""
Dense tensors with reverse-mode differentiation, gradient checking and Adam.

Every network and loss in the package is written with the ops below. A `Tensor`
holds a numpy array; ops applied to tensors that require gradients attach a
`Node` to their output. `backward` walks the nodes in reverse topological order.
`Graph` wraps a build function so a computation can be re-run for finite
differences.
"""

import contextlib
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64

# op name -> multiplier applied to its backward output (negative-control hook)
_BACKWARD_SCALE: Dict[str, float] = {}

_TAPES: List[List["Node"]] = []
_GRAD_ENABLED = [True]


def set_default_dtype(dtype) -> None:
    """Switch between the 64-bit default and the optional 32-bit mode"""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Node:
    """One recorded op: inputs, output and the closure mapping dL/dout to dL/dinputs"""
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"<Node op={self.op} out={self.output.shape}>"


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode differentiation"""
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else data.astype(dtype or _DEFAULT_DTYPE, copy=False)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", [self.shape], "item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# constants observed outside the graph (stop-gradient values, selections)
# ---------------------------------------------------------------------------

class _ConstantLog:
    def __init__(self, mode: str, values: Optional[List] = None):
        self.mode = mode
        self.values = values if values is not None else []
        self.cursor = 0


_CONSTANT_LOGS: List[_ConstantLog] = []


def constant(value):
    """
    Mark a value computed outside the differentiation graph as a constant.

    While a graph is being recorded for gradient checking the value is stored;
    during the perturbed re-evaluations the stored value is replayed, so the
    finite differences see exactly the constants the analytic gradient assumed.
    """
    if not _CONSTANT_LOGS:
        return value
    log = _CONSTANT_LOGS[-1]
    if log.mode == "record":
        log.values.append(copy.deepcopy(value))
        return value
    if log.cursor >= len(log.values):
        raise GraphError("constant replay ran past the recorded values")
    stored = log.values[log.cursor]
    log.cursor += 1
    return copy.deepcopy(stored)


@contextlib.contextmanager
def _constants(mode: Optional[str], values: Optional[List] = None):
    if mode is None:
        yield None
        return
    log = _ConstantLog(mode, values)
    _CONSTANT_LOGS.append(log)
    try:
        yield log
    finally:
        _CONSTANT_LOGS.pop()


@contextlib.contextmanager
def fault_injection(op: str, scale: float):
    """Scale one op's backward output; exists only to prove the gradient checker catches it"""
    _BACKWARD_SCALE[op] = scale
    try:
        yield
    finally:
        _BACKWARD_SCALE.pop(op, None)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording nodes (inference)"""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _make(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), out, backward_fn)
        if _TAPES:
            _TAPES[-1].append(out.node)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so `grad` matches `shape`"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    """Clip to [low, high]; the gradient passes only where the input was inside the range"""
    inside = (a.data >= low) & (a.data <= high)
    return _make("clamp", np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _make("relu", a.data * positive, (a,), lambda g: (g * positive,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _make("gelu", out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, shape]) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make("sum", np.asarray(out), (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)
    return _make("mean", np.asarray(out), (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", [x.shape for x in tensors])
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def take(a: Tensor, indices, axis: int = -1) -> Tensor:
    """Gather along one axis with a 1-D index vector"""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax])):
        raise ShapeError("take", [a.shape, idx.shape], f"take: index out of range for axis of size {a.shape[ax]}")

    def backward(g):
        grad = np.zeros_like(a.data)
        moved = np.moveaxis(grad, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (grad,)

    return _make("take", np.take(a.data, idx, axis=ax), (a,), backward)


def scatter(a: Tensor, index, size: int) -> Tensor:
    """Place input column i at output column index[i] of a zero tensor of width `size`"""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or idx.size != a.shape[-1]:
        raise ShapeError("scatter", [a.shape, idx.shape])
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError("scatter", [a.shape, (size,)], f"scatter: index out of range for width {size}")
    if len(np.unique(idx)) != idx.size:
        raise ShapeError("scatter", [idx.shape], "scatter: indices must be distinct")
    out = np.zeros(a.shape[:-1] + (size,), dtype=a.data.dtype)
    out[..., idx] = a.data
    return _make("scatter", out, (a,), lambda g: (g[..., idx],))


# ---------------------------------------------------------------------------
# neural-network building blocks
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax; entries where `mask` is False get probability exactly 0"""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift"""
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError("layer_norm", [a.shape, gamma.shape, beta.shape])
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out, (a, gamma, beta), backward)


def conv1d(a: Tensor, weight: Tensor, bias: Optional[Tensor] = None, dilation: int = 1) -> Tensor:
    """
    Temporal convolution with same (zero) padding and stride 1.

    Args:
        a: Input of shape (..., T, C_in), time-major
        weight: Kernel of shape (k, C_in, C_out); k must be odd
        bias: Optional (C_out,)
        dilation: Spacing between kernel taps

    Returns:
        Tensor of shape (..., T, C_out)
    """
    k, c_in, c_out = weight.shape
    if a.ndim < 2 or a.shape[-1] != c_in or k % 2 == 0:
        raise ShapeError("conv1d", [a.shape, weight.shape])
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv1d", [weight.shape, bias.shape])
    lead = a.shape[:-2]
    t = a.shape[-2]
    x = a.data.reshape((-1, t, c_in))
    n = x.shape[0]
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    # (n * t, k * c_in): tap j occupies columns j * c_in:(j + 1) * c_in
    cols = np.concatenate([xp[:, j * dilation:j * dilation + t, :] for j in range(k)], axis=-1)
    cols = cols.reshape((n * t, k * c_in))
    w2 = weight.data.reshape((k * c_in, c_out))
    out = cols @ w2
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape((n * t, c_out))
        gw = (cols.T @ g2).reshape(weight.shape)
        gx = None
        if a.requires_grad:
            gcols = (g2 @ w2.T).reshape((n, t, k, c_in))
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j * dilation:j * dilation + t, :] += gcols[:, :, j, :]
            gx = gxp[:, pad:pad + t, :].reshape(a.shape)
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    inputs = (a, weight) if bias is None else (a, weight, bias)
    return _make("conv1d", out.reshape(lead + (t, c_out)), inputs, backward)


def topk_mean(s: Tensor, k, valid: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean of the k largest entries along the last axis.

    Ties go to the lower index. `k` may be an int or one value per row.
    Positions where `valid` is False are never selected. The gradient is 1/k on
    the selected entries and zero elsewhere.
    """
    x = s.data
    rows = x.reshape((-1, x.shape[-1]))
    t = rows.shape[1]
    ks = np.broadcast_to(np.asarray(k, dtype=np.int64).reshape(-1), (rows.shape[0],))
    mask = np.ones_like(rows, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(rows.shape)
    if np.any(ks < 1) or np.any(ks > mask.sum(axis=1)):
        raise ValueError(f"top-K out of range: K={ks.tolist()} for lengths {mask.sum(axis=1).tolist()}")
    weights = np.zeros_like(rows)
    for r in range(rows.shape[0]):
        order = np.argsort(-np.where(mask[r], rows[r], -np.inf), kind="stable")
        weights[r, order[:ks[r]]] = 1.0 / ks[r]
    weights = constant(weights.reshape(x.shape))
    out = (x * weights).sum(axis=-1)
    return _make("topk_mean", out, (s,), lambda g: (np.asarray(g)[..., None] * weights,))


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """x / ||x||; a zero vector maps to zero with zero gradient"""
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = np.where(n > 0, x / safe, 0.0)

    def backward(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(n > 0, (g - out * proj) / safe, 0.0),)

    return _make("l2_normalize", out, (a,), backward)


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm; the gradient at the zero vector is taken as zero"""
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=axis))
    safe = np.where(n > 0, n, 1.0)

    def backward(g):
        scale = np.expand_dims(np.where(n > 0, g / safe, 0.0), axis)
        return (scale * x,)

    return _make("norm", n, (a,), backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine over `axis`; rows where either side has zero norm give 0 and no gradient"""
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", [a.shape, b.shape])
    x, y = a.data, b.data
    nx = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    ny = np.sqrt(np.sum(y * y, axis=axis, keepdims=True))
    ok = (nx > 0) & (ny > 0)
    denom = np.where(ok, nx * ny, 1.0)
    dot = np.sum(x * y, axis=axis, keepdims=True)
    cos = np.where(ok, dot / denom, 0.0)

    def backward(g):
        g = np.expand_dims(g, axis)
        sx = np.where(ok, nx, 1.0)
        sy = np.where(ok, ny, 1.0)
        gx = np.where(ok, g * (y / denom - cos * x / (sx * sx)), 0.0)
        gy = np.where(ok, g * (x / denom - cos * y / (sy * sy)), 0.0)
        return gx, gy

    return _make("cosine_similarity", np.squeeze(cos, axis=axis), (a, b), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, no gradient flows back through this point"""
    return Tensor(constant(a.data.copy()))


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topological_nodes(root: Tensor) -> List[Node]:
    """Nodes reachable from `root`, each listed once, inputs before outputs"""
    order: List[Node] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if tensor.is_leaf:
            continue
        node = tensor.node
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((tensor, True))
        for parent in node.inputs:
            if not parent.is_leaf and id(parent.node) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Optional[Dict[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """
    Reverse-mode sweep from a scalar loss.

    Args:
        loss: Single-element tensor produced by recorded ops
        leaves: Named leaf tensors to report; unreached leaves get zero gradients

    Returns:
        Mapping leaf name -> gradient array (also stored on `leaf.grad`)
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_nodes(loss)):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        scale = _BACKWARD_SCALE.get(node.op)
        for parent, pg in zip(node.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            if scale is not None:
                pg = pg * scale
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=parent.data.dtype).reshape(parent.shape)

    result = {}
    for name, leaf in (leaves or {}).items():
        if not leaf.requires_grad:
            continue
        grad = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if grad is None else grad
        result[name] = leaf.grad
    return result


class Graph:
    """
    A re-runnable computation: `fn(inputs) -> dict of output tensors`.

    `params` are the trainable leaves the function closes over; inputs are the
    per-call leaves. Optional `input_shapes` declares expected input shapes
    (None entries accept any size).
    """

    def __init__(self, fn: Callable[[Dict[str, Tensor]], Dict[str, Tensor]],
                 params: Optional[Dict[str, Tensor]] = None,
                 input_shapes: Optional[Dict[str, Tuple]] = None):
        self.fn = fn
        self.params = dict(params or {})
        self.input_shapes = dict(input_shapes or {})
        self.nodes: List[Node] = []
        self.inputs: Dict[str, Tensor] = {}
        self.outputs: Optional[Dict[str, Tensor]] = None
        self._last_constants: Optional[List] = None

    @property
    def leaves(self) -> Dict[str, Tensor]:
        named = dict(self.params)
        named.update({f"input:{k}": v for k, v in self.inputs.items() if v.requires_grad})
        return named

    def _check_inputs(self, inputs: Dict[str, Tensor]) -> None:
        for name, expected in self.input_shapes.items():
            if name not in inputs:
                raise ShapeError("forward", [expected], f"forward: missing input '{name}'")
            actual = inputs[name].shape
            if len(actual) != len(expected) or any(e is not None and e != a for e, a in zip(expected, actual)):
                raise ShapeError("forward", [expected, actual],
                                 f"forward: input '{name}' has shape {actual}, expected {expected}")

    def forward(self, inputs: Optional[Dict[str, TensorLike]] = None, _constants_mode=None,
                _constant_values=None) -> Dict[str, Tensor]:
        wrapped = {k: as_tensor(v) for k, v in (inputs or {}).items()}
        self._check_inputs(wrapped)
        tape: List[Node] = []
        _TAPES.append(tape)
        try:
            with _constants(_constants_mode, _constant_values) as log:
                outputs = self.fn(wrapped)
                self._last_constants = log.values if log is not None else None
        finally:
            _TAPES.pop()
        self.nodes = tape
        self.inputs = wrapped
        self.outputs = dict(outputs)
        return self.outputs

    def backward(self, loss: Union[str, Tensor] = "loss") -> Dict[str, np.ndarray]:
        if self.outputs is None:
            raise GraphError("backward called before forward")
        if isinstance(loss, str):
            if loss not in self.outputs:
                raise GraphError(f"no output named '{loss}'")
            loss = self.outputs[loss]
        return backward(loss, self.leaves)


def forward(graph: Graph, inputs: Dict[str, TensorLike]) -> Dict[str, Tensor]:
    return graph.forward(inputs)


def _scalar(outputs: Dict[str, Tensor], key: str) -> float:
    value = outputs[key].data
    if value.size != 1:
        raise GraphError(f"output '{key}' is not a scalar")
    return float(value.reshape(-1)[0])


def grad_check_report(graph: Graph, inputs: Dict[str, TensorLike], loss_key: str = "loss",
                      leaves: Optional[Iterable[str]] = None, eps: float = 1e-6,
                      max_components: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """
    Compare analytic gradients with central differences, leaf by leaf.

    Returns:
        Mapping leaf name -> max over checked components of
        |analytic - numeric| / max(1, |analytic|)
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if get_default_dtype() is not np.float64:
        raise GraphError("gradient checking requires 64-bit mode")
    wrapped = {k: as_tensor(v) for k, v in inputs.items()}
    for tensor in list(wrapped.values()) + list(graph.params.values()):
        if not tensor.data.flags.c_contiguous:
            tensor.data = np.ascontiguousarray(tensor.data)
    graph.forward(wrapped, _constants_mode="record")
    recorded = graph._last_constants
    analytic = graph.backward(loss_key)
    names = list(leaves) if leaves is not None else list(analytic)
    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}

    def evaluate() -> float:
        out = graph.forward(wrapped, _constants_mode="replay", _constant_values=recorded)
        return _scalar(out, loss_key)

    leaf_map = graph.leaves
    for name in names:
        if name not in leaf_map:
            raise GraphError(f"unknown leaf '{name}'")
        leaf = leaf_map[name]
        grad = analytic[name].reshape(-1)
        flat = leaf.data.reshape(-1)
        components = np.arange(flat.size)
        if max_components is not None and flat.size > max_components:
            components = np.sort(rng.choice(flat.size, size=max_components, replace=False))
        worst = 0.0
        for c in components:
            saved = flat[c]
            flat[c] = saved + eps
            plus = evaluate()
            flat[c] = saved - eps
            minus = evaluate()
            flat[c] = saved
            numeric = (plus - minus) / (2 * eps)
            if not (np.isfinite(numeric) and np.isfinite(grad[c])):
                raise GraphError(f"non-finite gradient estimate for {name}[{c}]")
            worst = max(worst, abs(grad[c] - numeric) / max(1.0, abs(grad[c])))
        report[name] = worst
        logger.debug("grad_check %s: %d components, max rel err %.3e", name, len(components), worst)
    # leave the graph in its unperturbed state
    graph.forward(wrapped)
    return report


def grad_check(graph: Graph, inputs: Dict[str, TensorLike], loss_key: str = "loss",
               leaves: Optional[Iterable[str]] = None, eps: float = 1e-6,
               max_components: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error over all checked leaves; 0.0 when there is nothing to check"""
    report = grad_check_report(graph, inputs, loss_key, leaves, eps, max_components, seed)
    return max(report.values(), default=0.0)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moment estimates and hyperparameters for Adam with decoupled weight decay"""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    eps_adam: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    """One Adam update of every parameter that has a gradient; increments `state.step`"""
    if state.step < 0:
        raise ValueError("Adam step counter must be nonnegative")
    for name, grad in grads.items():
        if name not in params:
            continue
        if grad.shape != params[name].shape:
            raise ShapeError("adam_step", [params[name].shape, grad.shape], f"adam_step: gradient shape mismatch for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_adam)
        param.data = param.data - update - state.lr * state.weight_decay * param.data
    return params


def uniform_fan_in(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, name: str) -> Tensor:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialised parameter"""
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), name=name)


def zeros_parameter(shape: Tuple[int, ...], name: str) -> Tensor:
    return parameter(np.zeros(shape), name=name)


def ones_parameter(shape: Tuple[int, ...], name: str) -> Tensor:
    return parameter(np.ones(shape), name=name)
