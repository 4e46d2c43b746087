"""Dense tensors and the reverse-mode autodiff graph used by the engine.

Execution is eager: every op computes its value immediately and records a
backward closure on the resulting :class:`Node`. ``backward`` then walks
the recorded graph once, in reverse topological order, accumulating
gradients into every reachable node that requires them.

Only the operations the fusion model needs are provided, and only for the
ranks it uses: matrices, bias/gain vectors, and 0-d losses. Values are
float32 for training/evaluation and float64 for gradient checks; the
precision is fixed by whoever creates the leaf tensors and preserved by
every op (mixing precisions in one op is an error).
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    InvalidMaskError,
    NonFiniteError,
)

DTYPES = {"float32": np.float32, "float64": np.float64}


def resolve_dtype(dtype) -> np.dtype:
    """Accept 'float32'/'float64' or a numpy dtype and normalize it."""
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """An immutable, contiguous, row-major float array with shape metadata.

    The constructor takes ownership of the backing buffer (it is marked
    read-only) and rejects NaN/Inf so non-finite values never propagate
    silently. Every op output passes through here, which is what enforces
    the all-finite invariant module-wide.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=resolve_dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor of shape {arr.shape} contains NaN or Inf")
        arr.setflags(write=False)
        self.data = arr

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        dt = resolve_dtype(dtype)
        if dt == self.data.dtype:
            return self
        return Tensor(self.data.astype(dt))

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


NodeLike = Union["Node", Tensor, np.ndarray, list, float, int]


class Node:
    """A value in the computation graph.

    Holds the computed :class:`Tensor`, a gradient buffer of identical
    shape (allocated lazily, zero-initialized), the parent nodes it was
    computed from, and the backward rule that distributes its gradient to
    those parents. ``requires_grad`` is true for parameters and anything
    downstream of one; everything else is treated as a constant and skipped
    during the backward walk.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "name")

    def __init__(
        self,
        value: Tensor,
        parents: tuple = (),
        requires_grad: Optional[bool] = None,
        name: Optional[str] = None,
    ):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        self.value = value
        self.parents = parents
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self._grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[], None]] = None
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        """Gradient buffer, same shape/dtype as the value, zero-initialized."""
        if self._grad is None:
            self._grad = np.zeros(self.value.shape, dtype=self.value.dtype)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad}{tag})"


def parameter(value, name: Optional[str] = None, dtype=None) -> Node:
    """A trainable leaf node."""
    t = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
    if dtype is not None:
        t = t.astype(dtype)
    return Node(t, requires_grad=True, name=name)


def constant(value, dtype=None) -> Node:
    t = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
    if dtype is not None:
        t = t.astype(dtype)
    return Node(t, requires_grad=False)


def as_node(x: NodeLike) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.zero_grad()


def _check_same_dtype(a: Node, b: Node, op: str) -> None:
    if a.value.dtype != b.value.dtype:
        raise ContractError(
            f"{op}: mixed precisions {a.value.dtype} and {b.value.dtype}"
        )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: NodeLike, b: NodeLike) -> Node:
    """Elementwise sum with numpy broadcasting (bias adds etc.)."""
    a, b = as_node(a), as_node(b)
    _check_same_dtype(a, b, "add")
    out = Node(Tensor(a.value.data + b.value.data), parents=(a, b))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.value.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g, b.value.shape)
        out._backward = _bwd
    return out


def neg(a: NodeLike) -> Node:
    a = as_node(a)
    out = Node(Tensor(-a.value.data), parents=(a,))
    if out.requires_grad:
        def _bwd():
            a.grad += -out.grad
        out._backward = _bwd
    return out


def sub(a: NodeLike, b: NodeLike) -> Node:
    return add(a, neg(b))


def mul(a: NodeLike, b: NodeLike) -> Node:
    """Elementwise product; ``b`` may be a raw python scalar (no grad)."""
    if isinstance(b, (int, float)):
        a = as_node(a)
        out = Node(Tensor(a.value.data * b), parents=(a,))
        if out.requires_grad:
            def _bwd_scalar():
                a.grad += out.grad * b
            out._backward = _bwd_scalar
        return out
    a, b = as_node(a), as_node(b)
    _check_same_dtype(a, b, "mul")
    av, bv = a.value.data, b.value.data
    out = Node(Tensor(av * bv), parents=(a, b))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if a.requires_grad:
                a.grad += _unbroadcast(g * bv, a.value.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g * av, b.value.shape)
        out._backward = _bwd
    return out


def matmul(a: NodeLike, b: NodeLike) -> Node:
    """Standard matrix product of two 2-d tensors."""
    a, b = as_node(a), as_node(b)
    _check_same_dtype(a, b, "matmul")
    av, bv = a.value.data, b.value.data
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {av.shape} x {bv.shape}"
        )
    out = Node(Tensor(av @ bv), parents=(a, b))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if a.requires_grad:
                a.grad += g @ bv.T
            if b.requires_grad:
                b.grad += av.T @ g
        out._backward = _bwd
    return out


def transpose(a: NodeLike) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.value.shape}")
    out = Node(Tensor(a.value.data.T), parents=(a,))
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad.T
        out._backward = _bwd
    return out


def concat(parts: Sequence[NodeLike], axis: int = 0) -> Node:
    """Concatenate matrices along ``axis`` (0 or 1)."""
    nodes = [as_node(p) for p in parts]
    if not nodes:
        raise ContractError("concat: no operands")
    if axis not in (0, 1):
        raise ContractError(f"concat: axis {axis} unsupported")
    for n in nodes[1:]:
        _check_same_dtype(nodes[0], n, "concat")
    arrays = [n.value.data for n in nodes]
    out = Node(Tensor(np.concatenate(arrays, axis=axis)), parents=tuple(nodes))
    if out.requires_grad:
        sizes = [arr.shape[axis] for arr in arrays]
        def _bwd():
            g = out.grad
            offset = 0
            for n, size in zip(nodes, sizes):
                if n.requires_grad:
                    sl = (slice(None),) * axis + (slice(offset, offset + size),)
                    n.grad += g[sl]
                offset += size
        out._backward = _bwd
    return out


def narrow(a: NodeLike, axis: int, start: int, length: int) -> Node:
    """Contiguous slice along ``axis`` (used for per-head column slabs)."""
    a = as_node(a)
    if axis not in (0, 1) or a.value.ndim != 2:
        raise ContractError("narrow: only matrix axes 0/1 supported")
    if start < 0 or length <= 0 or start + length > a.value.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}:{start+length}] out of range for axis {axis} "
            f"of shape {a.value.shape}"
        )
    sl = (slice(None),) * axis + (slice(start, start + length),)
    out = Node(Tensor(a.value.data[sl]), parents=(a,))
    if out.requires_grad:
        def _bwd():
            a.grad[sl] += out.grad
        out._backward = _bwd
    return out


def sum_all(a: NodeLike) -> Node:
    """Sum of all entries, as a 0-d node."""
    a = as_node(a)
    out = Node(Tensor(a.value.data.sum()), parents=(a,))
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad
        out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: NodeLike) -> Node:
    a = as_node(a)
    av = a.value.data
    out = Node(Tensor(np.maximum(av, 0)), parents=(a,))
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad * (av > 0)
        out._backward = _bwd
    return out


def mish(a: NodeLike) -> Node:
    """x * tanh(softplus(x)), with an overflow-safe softplus."""
    a = as_node(a)
    av = a.value.data
    sp = np.logaddexp(av.dtype.type(0), av)
    t = np.tanh(sp)
    out = Node(Tensor(av * t), parents=(a,))
    if out.requires_grad:
        def _bwd():
            deriv = t + av * (1.0 - t * t) * _sigmoid(av)
            a.grad += out.grad * deriv
        out._backward = _bwd
    return out


ACTIVATIONS = {"relu": relu, "mish": mish}


def activation(a: NodeLike, kind: str) -> Node:
    """Elementwise activation; ``kind`` is 'relu' or 'mish'."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}; expected relu or mish")
    return fn(a)


# ---------------------------------------------------------------------------
# attention / normalization primitives
# ---------------------------------------------------------------------------

def softmax_rows(a: NodeLike, key_mask: Optional[np.ndarray] = None) -> Node:
    """Row-wise softmax of a matrix, stabilized by row-max subtraction.

    ``key_mask`` is one boolean row of length n shared by all rows; masked
    columns get exactly zero weight and the remaining entries renormalize.
    """
    a = as_node(a)
    av = a.value.data
    if av.ndim != 2 or av.shape[1] < 1:
        raise DimensionError(f"softmax_rows: expected a non-empty matrix, got {av.shape}")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (av.shape[1],):
            raise DimensionError(
                f"softmax_rows: mask length {key_mask.shape} vs {av.shape[1]} columns"
            )
        if not key_mask.any():
            raise InvalidMaskError("softmax_rows: every column is masked")
        shifted = np.where(key_mask, av, -np.inf)
    else:
        shifted = av
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Node(Tensor(y), parents=(a,))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            dot = (g * y).sum(axis=1, keepdims=True)
            a.grad += y * (g - dot)
        out._backward = _bwd
    return out


def layer_norm(a: NodeLike, gain: NodeLike, bias: NodeLike, eps: float = 1e-5) -> Node:
    """Per-row normalization with population (1/d) variance, then affine."""
    a, gain, bias = as_node(a), as_node(gain), as_node(bias)
    _check_same_dtype(a, gain, "layer_norm")
    _check_same_dtype(a, bias, "layer_norm")
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    av, gv, bv = a.value.data, gain.value.data, bias.value.data
    if av.ndim != 2:
        raise DimensionError(f"layer_norm: expected a matrix, got {av.shape}")
    d = av.shape[1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gv.shape} / bias {bv.shape} vs width {d}"
        )
    mu = av.mean(axis=1, keepdims=True)
    var = ((av - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + av.dtype.type(eps))
    xhat = (av - mu) * inv
    out = Node(Tensor(xhat * gv + bv), parents=(a, gain, bias))
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if gain.requires_grad:
                gain.grad += (g * xhat).sum(axis=0)
            if bias.requires_grad:
                bias.grad += g.sum(axis=0)
            if a.requires_grad:
                dxhat = g * gv
                a.grad += inv * (
                    dxhat
                    - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
                )
        out._backward = _bwd
    return out


def dropout(
    a: NodeLike,
    rate: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Node:
    """Inverted dropout: zero with probability ``rate`` and rescale survivors
    by 1/(1-rate) in training mode; exact identity in eval mode."""
    a = as_node(a)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout: training mode needs a seeded generator")
    av = a.value.data
    keep = (rng.random(av.shape) >= rate).astype(av.dtype)
    scale = keep / av.dtype.type(1.0 - rate)
    out = Node(Tensor(av * scale), parents=(a,))
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad * scale
        out._backward = _bwd
    return out


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Node) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    Gradients of leaf nodes accumulate across calls until explicitly
    zeroed; interior nodes get fresh buffers on every call.
    """
    if not isinstance(loss, Node):
        raise ContractError("backward: loss must be a Node")
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # Interior gradients are scratch space for this walk only; leaves keep
    # their buffers so repeated backward calls accumulate.
    for node in order:
        if node.parents:
            node._grad = None
    loss.grad += np.ones(loss.value.shape, dtype=loss.value.dtype)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()
