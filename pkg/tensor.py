"""
Dense tensor engine with reverse-mode automatic differentiation.
Every trainable block of the motion network is built from these operations.

Values are 64-bit floats stored in ordinary row-major numpy arrays; each
operation records its inputs and a closure that maps the output gradient
back onto them. Graphs are rebuilt on every forward pass.
"""

import contextlib
import logging
import threading
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-8
GELU_COEF = 0.044715
SQRT_2_OVER_PI = 0.7978845608028654


class TensorError(ValueError):
    """Base class for tensor engine errors."""


class ShapeMismatch(TensorError):
    """Operand shapes are incompatible."""


class NotScalar(TensorError):
    """A single-element tensor was required (backward, item)."""


class DetachedLeaf(TensorError):
    """A requested leaf does not take part in the graph of the loss."""


class DegenerateVariance(TensorError):
    """Layer normalization met a vector whose variance is below epsilon."""


class NonFiniteValue(TensorError):
    """An operation produced NaN or Inf."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (sampling loops, metric passes)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Tensor:
    """A node of the computation graph holding a float64 array."""

    __slots__ = ('data', 'requires_grad', 'grad', '_parents', '_backward', 'op', 'name')
    # numpy operands defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"Tensor {name or ''} initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None
        self.op = 'leaf'
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Tuple['Tensor', ...],
                 backward: Callable, op: str) -> 'Tensor':
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteValue(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # --- basic properties -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def __repr__(self):
        label = f", name='{self.name}'" if self.name else ''
        return f"Tensor(shape={self.shape}, op='{self.op}'{label})"

    # --- elementwise arithmetic ------------------------------------------

    def __add__(self, other) -> 'Tensor':
        other = as_tensor(other)
        _check_broadcast(self, other, 'add')
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward, 'add')

    __radd__ = __add__

    def __sub__(self, other) -> 'Tensor':
        other = as_tensor(other)
        _check_broadcast(self, other, 'sub')
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._from_op(self.data - other.data, (self, other), backward, 'sub')

    def __rsub__(self, other) -> 'Tensor':
        return as_tensor(other) - self

    def __mul__(self, other) -> 'Tensor':
        other = as_tensor(other)
        _check_broadcast(self, other, 'mul')
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward, 'mul')

    __rmul__ = __mul__

    def __truediv__(self, other) -> 'Tensor':
        other = as_tensor(other)
        _check_broadcast(self, other, 'div')
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), backward, 'div')

    def __rtruediv__(self, other) -> 'Tensor':
        return as_tensor(other) / self

    def __neg__(self) -> 'Tensor':
        def backward(g):
            return (-g,)

        return Tensor._from_op(-self.data, (self,), backward, 'neg')

    def __pow__(self, exponent: float) -> 'Tensor':
        if isinstance(exponent, Tensor):
            raise TypeError("Only scalar exponents are supported")
        a = self.data
        p = float(exponent)

        def backward(g):
            return (g * p * np.power(a, p - 1.0),)

        return Tensor._from_op(np.power(a, p), (self,), backward, 'pow')

    def __matmul__(self, other) -> 'Tensor':
        return matmul(self, other)

    def __rmatmul__(self, other) -> 'Tensor':
        return matmul(other, self)

    def __getitem__(self, index) -> 'Tensor':
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(self.data[index], (self,), backward, 'getitem')

    # --- reductions and reshapes -----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        shape = self.shape
        axes = _normalize_axes(axis, self.ndim)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        data = self.data.sum(axis=axes, keepdims=keepdims)
        return Tensor._from_op(data, (self,), backward, 'sum')

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) / float(count)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as e:
            raise ShapeMismatch(f"Cannot reshape {original} into {shape}") from e

        def backward(g):
            return (g.reshape(original),)

        return Tensor._from_op(data, (self,), backward, 'reshape')

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))

        def backward(g):
            return (g.transpose(inverse),)

        return Tensor._from_op(self.data.transpose(axes), (self,), backward, 'transpose')

    def swapaxes(self, a1: int, a2: int) -> 'Tensor':
        perm = list(range(self.ndim))
        perm[a1], perm[a2] = perm[a2], perm[a1]
        return self.transpose(tuple(perm))

    def broadcast_to(self, shape: Tuple[int, ...]) -> 'Tensor':
        original = self.shape
        try:
            data = np.broadcast_to(self.data, shape)
        except ValueError as e:
            raise ShapeMismatch(f"Cannot broadcast {original} to {shape}") from e

        def backward(g):
            return (_unbroadcast(g, original),)

        return Tensor._from_op(np.array(data), (self,), backward, 'broadcast')

    # --- elementwise functions -------------------------------------------

    def exp(self) -> 'Tensor':
        out = np.exp(self.data)

        def backward(g):
            return (g * out,)

        return Tensor._from_op(out, (self,), backward, 'exp')

    def tanh(self) -> 'Tensor':
        out = np.tanh(self.data)

        def backward(g):
            return (g * (1.0 - out * out),)

        return Tensor._from_op(out, (self,), backward, 'tanh')

    def sqrt(self) -> 'Tensor':
        return self ** 0.5

    def backward(self) -> Dict['Tensor', np.ndarray]:
        return backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeMismatch(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from e
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(ad @ bd, (a, b), backward, 'matmul')


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically shifted softmax; rows along `axis` sum to one."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeMismatch(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, 'softmax')


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS, strict: bool = False) -> Tensor:
    """Normalize over the last axis, then apply gain and bias.

    With strict=True a vector whose variance is below eps raises
    DegenerateVariance instead of going through the eps-regularized path.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeMismatch(f"layer_norm expects gain/bias of shape ({width},), "
                            f"got {gain.shape} and {bias.shape}")
    if strict and np.any(x.data.var(axis=-1) < eps):
        raise DegenerateVariance("layer_norm input has variance below epsilon")
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    normalized = centered / (variance + eps) ** 0.5
    return normalized * gain + bias


def gelu(x) -> Tensor:
    """tanh approximation of GELU (smooth, so finite differences stay meaningful)."""
    x = as_tensor(x)
    a = x.data
    u = SQRT_2_OVER_PI * (a + GELU_COEF * a ** 3)
    t = np.tanh(u)
    out = 0.5 * a * (1.0 + t)

    def backward(g):
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)

    return Tensor._from_op(out, (x,), backward, 'gelu')


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tuple(tensors), backward, 'concat')


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"stack: incompatible shapes {[t.shape for t in tensors]}") from e

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(data, tuple(tensors), backward, 'stack')


class Graph:
    """Operation records behind one output, inputs always before consumers."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = []
        self.leaves: List[Tensor] = []
        self._build()

    def _build(self):
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self.output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.leaves = [n for n in self.nodes if not n._parents and n.requires_grad]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) through the graph; return gradients of the leaves.

    Each leaf's `grad` attribute is overwritten with its gradient.
    """
    if loss.size != 1:
        raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
    graph = Graph(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: Dict[Tensor, np.ndarray] = {}

    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                result[node] = np.array(g, dtype=np.float64)
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg

    for leaf in graph.leaves:
        if leaf not in result:
            result[leaf] = np.zeros_like(leaf.data)
        leaf.grad = result[leaf]

    if wrt is not None:
        wanted = list(wrt)
        for leaf in wanted:
            if leaf not in result:
                raise DetachedLeaf(f"{leaf!r} is not reachable from the loss")
        result = {leaf: result[leaf] for leaf in wanted}
    return result


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
                   max_entries: Optional[int] = None, seed: int = 0, floor: float = 1e-3) -> float:
    """Largest per-entry relative error between analytic and central-difference gradients.

    Each checked coordinate contributes |a - n| / max(|a|, |n|); coordinates whose
    gradients are both below `floor` contribute the absolute difference instead.
    With max_entries set, that many coordinates per parameter are sampled (seeded).
    """
    rng = np.random.default_rng(seed)
    analytic = backward(fn(), wrt=params)
    worst = 0.0
    for param in params:
        flat = param.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(indices.size)
        with no_grad():
            for n, i in enumerate(indices):
                original = flat[i]
                flat[i] = original + h
                f_plus = float(fn().data.reshape(-1)[0])
                flat[i] = original - h
                f_minus = float(fn().data.reshape(-1)[0])
                flat[i] = original
                numeric[n] = (f_plus - f_minus) / (2.0 * h)
        a = analytic[param].reshape(-1)[indices]
        diff = np.abs(a - numeric)
        scale = np.maximum(np.abs(a), np.abs(numeric))
        errors = np.where(scale < floor, diff, diff / np.maximum(scale, floor))
        error = float(errors.max()) if errors.size else 0.0
        logger.debug(f"gradient_check {param!r}: error {error:.3e}")
        worst = max(worst, error)
    return worst
