"""Dense tensors with reverse-mode automatic differentiation.

The graph doubles as the gradient tape: every operation attaches an ordered
record (parents + backward rule) to its output tensor. ``backward`` walks the
records in reverse topological order, accumulates gradients into tracked
leaves, then releases the records so a second backward on the same graph
raises instead of silently reusing stale state.

Operations follow the dtype of their inputs: the model runs in float32 with
reductions accumulated in 64-bit, while gradient checks build float64 tensors
so central differences at h=1e-3 are meaningful.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32  # default dtype for model state


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


class GraphError(RuntimeError):
    """Backward called on an empty or already-consumed tape."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._released

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic (tensor-or-scalar operands)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False, dtype=DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def randn(shape: Sequence[int], rng: np.random.Generator, std: float = 1.0,
          requires_grad: bool = False, dtype=DTYPE) -> Tensor:
    draw = rng.standard_normal(shape, dtype=dtype) if dtype in (np.float32, np.float64) \
        else rng.standard_normal(shape)
    return Tensor(draw * np.asarray(std, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; bare python scalars adopt the other operand's dtype."""
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and not b_t and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if b_t and not a_t and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # grads are never mutated in place (accumulation rebinds), so the first
    # contribution is stored by reference rather than copied
    if t.grad is None:
        t.grad = g if isinstance(g, np.ndarray) and g.dtype == t.data.dtype \
            else np.asarray(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    """Broadcasting is restricted to scalar-with-tensor and row-vector-with-matrix."""
    if a == b:
        return
    scalar = ((), (1,))
    if a in scalar or b in scalar:
        return
    if len(a) == 2 and b in ((a[1],), (1, a[1])):
        return
    if len(b) == 2 and a in ((b[1],), (1, b[1])):
        return
    raise DimensionError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# operations


def linear(x: Tensor, w: Tensor, b: Tensor, relu_out: bool = False) -> Tensor:
    """Fused x @ w + bias row vector, optionally rectified in place."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shapes {x.shape} x {w.shape}")
    if b.shape not in ((w.shape[1],), (1, w.shape[1])):
        raise DimensionError(f"bias shape {b.shape} for output dim {w.shape[1]}")
    out_data = x.data @ w.data
    out_data += b.data
    if relu_out:
        np.maximum(out_data, 0.0, out=out_data)

    def bw(g: np.ndarray) -> None:
        if relu_out:
            g = g * (out_data > 0.0)
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0).reshape(b.shape))

    return _make(out_data, (x, w, b), bw)


def residual_bias_relu(a: Tensor, b: Tensor, bias: Tensor) -> Tensor:
    """relu(a + b + bias) in one node; a and b share the incoming gradient."""
    a, b, bias = _as_tensor(a), _as_tensor(b), _as_tensor(bias)
    if a.shape != b.shape:
        raise DimensionError(f"residual shapes differ: {a.shape} vs {b.shape}")
    if bias.shape not in ((a.shape[-1],), (1, a.shape[-1])):
        raise DimensionError(f"bias shape {bias.shape} for feature dim {a.shape[-1]}")
    out_data = a.data + b.data
    out_data += bias.data
    np.maximum(out_data, 0.0, out=out_data)

    def bw(g: np.ndarray) -> None:
        gm = g * (out_data > 0.0)
        if a.requires_grad:
            _accum(a, gm)
        if b.requires_grad:
            _accum(b, gm)
        if bias.requires_grad:
            _accum(bias, gm.sum(axis=0).reshape(bias.shape))

    return _make(out_data, (a, b, bias), bw)


def upsample_cells(tokens: Tensor, grid: int, cell_h: int, cell_w: int) -> Tensor:
    """Broadcast a (grid*grid, d) token matrix to per-pixel rows of the
    (grid*cell_h) x (grid*cell_w) frame; backward sums each cell's pixels."""
    tokens = _as_tensor(tokens)
    n, d = tokens.shape
    if n != grid * grid:
        raise DimensionError(f"expected {grid * grid} tokens, got {n}")
    h, w = grid * cell_h, grid * cell_w
    spread = tokens.data.reshape(grid, 1, grid, 1, d)
    out_data = np.broadcast_to(spread, (grid, cell_h, grid, cell_w, d)).reshape(h * w, d)

    def bw(g: np.ndarray) -> None:
        _accum(tokens, g.reshape(grid, cell_h, grid, cell_w, d).sum(axis=(1, 3)).reshape(n, d))

    return _make(np.ascontiguousarray(out_data), (tokens,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bw)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    out_data = a.data + b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    out_data = a.data * b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def bw(g: np.ndarray) -> None:
        _accum(x, g * mask)

    return _make(out_data, (x,), bw)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic on raw arrays."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = sigmoid_np(x.data)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bw)


def log(x: Tensor) -> Tensor:
    """Natural log with a tiny dtype-aware floor so saturated inputs stay finite."""
    x = _as_tensor(x)
    floor = 1e-300 if x.data.dtype == np.float64 else 1e-37
    safe = np.maximum(x.data, floor)
    out_data = np.log(safe)

    def bw(g: np.ndarray) -> None:
        _accum(x, g / safe)

    return _make(out_data, (x,), bw)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.exp(x.data)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * out_data)

    return _make(out_data, (x,), bw)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * 2.0 * x.data)

    return _make(x.data * x.data, (x,), bw)


def powc(x: Tensor, c: float) -> Tensor:
    """x ** c for a constant exponent; caller keeps x in the domain of x**(c-1)."""
    x = _as_tensor(x)
    out_data = x.data ** c

    def bw(g: np.ndarray) -> None:
        _accum(x, g * c * x.data ** (c - 1.0))

    return _make(out_data, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accum(x, out_data * (g - dot))

    return _make(out_data, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements; accumulation runs in 64-bit regardless of dtype."""
    x = _as_tensor(x)
    out_data = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.data.dtype)

    def bw(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g, x.shape).copy() if x.shape else np.asarray(g))

    return _make(out_data, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out_data = np.asarray(np.sum(x.data, dtype=np.float64) / n, dtype=x.data.dtype)

    def bw(g: np.ndarray) -> None:
        _accum(x, np.full(x.shape, float(g) / n, dtype=x.data.dtype))

    return _make(out_data, (x,), bw)


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")

    def bw(g: np.ndarray) -> None:
        _accum(x, g.T)

    return _make(x.data.T.copy(), (x,), bw)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols shapes {a.shape} and {b.shape}")
    na = a.shape[1]

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g[:, :na])
        if b.requires_grad:
            _accum(b, g[:, na:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = x[idx[i]]; backward scatter-adds, so repeated rows accumulate."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _make(x.data[idx], (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)

    def bw(g: np.ndarray) -> None:
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def pick(x: Tensor, index) -> Tensor:
    """Select one element as a scalar tensor; backward scatters into place."""
    x = _as_tensor(x)
    index = tuple(np.atleast_1d(index).astype(int)) if not np.isscalar(index) else (int(index),)
    if len(index) != x.data.ndim:
        raise DimensionError(f"pick index {index} on tensor of shape {x.shape}")
    value = np.asarray(x.data[index])

    def bw(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[index] = g
        _accum(x, gx)

    return _make(value, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout with an explicit seeded generator; identity when off."""
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    dt = x.data.dtype
    mask = np.multiply(rng.random(x.shape, dtype=dt) >= rate, 1.0 / (1.0 - rate), dtype=dt)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * mask)

    return _make(x.data * mask, (x,), bw)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Populate grads of every tracked leaf reachable from a scalar loss.

    The recorded rules are consumed: a second backward on the same graph
    raises GraphError instead of producing silently wrong gradients.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("backward already ran on this graph; re-run the forward pass")
    if loss._backward is None:
        raise GraphError("backward on an empty tape: loss records no operations")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor that requires grad")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    # reversed construction order == reverse topological order, so every
    # node's grad is complete before its backward rule fires
    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    for node in topo:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True
            node.grad = None  # grads live on leaves only
    loss._released = True


# ---------------------------------------------------------------------------
# finite differences (test oracle; independent of the tape machinery)


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float) -> np.ndarray:
    """Central-difference gradient of a pure scalar function, coordinate by coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.reshape(-1).copy()
        bumped[i] += h
        fp = _scalar(f(Tensor(bumped.reshape(base.shape))))
        bumped[i] -= 2 * h
        fm = _scalar(f(Tensor(bumped.reshape(base.shape))))
        flat[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)
