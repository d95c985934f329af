"""Reverse-mode automatic differentiation on dense float64 arrays.

This is a small tape-based engine: every operation that touches a tensor
requiring gradients records its parents and a backward closure on the
result.  Calling :func:`backward` on a scalar loss replays the recorded
graph once, in reverse topological order, accumulating gradients into the
``grad`` attribute of every tensor that requires them.

Scope is deliberately narrow.  Supported shapes are scalars, vectors and
2-D matrices; broadcasting is limited to what the model needs (scalar vs.
array, row vs. matrix, column vs. matrix).  All arithmetic is float64 so
that finite-difference checks resolve below 1e-4 relative error.

Gradient checking lives here too (:func:`finite_diff_check`) because it is
a property of the engine, not of any particular model.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "grad_enabled",
    "backward",
    "zero_grads",
    "matmul",
    "transpose",
    "linear",
    "gelu",
    "relu",
    "exp",
    "log",
    "sqrt",
    "tensor_sum",
    "softmax",
    "layer_norm",
    "dropout",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "gather_rows",
    "block_qk",
    "block_av",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class GraphError(RuntimeError):
    """Raised on invalid graph usage, e.g. backward from a non-scalar."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph recording (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    """Whether operations are currently being recorded."""
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    Tensors are created either as leaves (``Tensor(data, requires_grad=...)``)
    or as op results, which carry backward closures.  Leaf data may be
    replaced in place via :meth:`assign_` (used by the optimizer); graph
    interior values should be treated as immutable once created.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def assign_(self, values: np.ndarray) -> None:
        """Replace leaf data in place (shape-checked, finiteness-checked)."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != {self.data.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr.copy()

    def detach(self) -> "Tensor":
        """A new leaf sharing no graph history with this tensor."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar.  Python scalars are treated as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _result(data: np.ndarray, parents: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    if not np.all(np.isfinite(data)):
        raise ValueError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(data, (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D operand")
    data = a.data.T.copy()

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.T)

    return _result(data, (a,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight stored (out, in).

    Fused into one graph node: the model builds thousands of these per
    volume, and collapsing transpose/matmul/add keeps the tape short.
    """
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear input width {x.data.shape[1]} != weight fan-in {weight.data.shape[1]}")
    data = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ShapeError("linear bias must match weight fan-out")
        data = data + bias.data

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    data = x.data * cdf

    def backward(g: np.ndarray) -> None:
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        _accumulate(x, g * (cdf + x.data * pdf))

    return _result(data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    data = np.where(mask, x.data, 0.0)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result(data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * data)

    return _result(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g / x.data)

    return _result(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * 0.5 / data)

    return _result(data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and normalization


def tensor_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            expanded = g if keepdims else np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(expanded, x.data.shape).copy())

    return _result(np.asarray(data, dtype=np.float64), (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by max subtraction.

    The subtracted row max is treated as a constant; that is exact because
    the softmax Jacobian annihilates constant shifts.
    """
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(x, data * (g - dot))

    return _result(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Variance is the biased estimator over the last axis.  A constant row has
    zero variance and normalizes to zeros (the eps floor keeps it defined).
    """
    if gain.data.shape != (x.data.shape[-1],) or shift.data.shape != (x.data.shape[-1],):
        raise ShapeError("layer_norm gain/shift must be 1-D of the feature width")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + shift.data

    def backward(g: np.ndarray) -> None:
        d = x.data.shape[-1]
        gx = g * gain.data
        dot_xhat = (gx * xhat).sum(axis=-1, keepdims=True)
        mean_gx = gx.mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (gx - mean_gx - xhat * dot_xhat / d))
        _accumulate(gain, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        _accumulate(shift, g.sum(axis=tuple(range(g.ndim - 1))))

    return _result(data, (x, gain, shift), backward)


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout.  Eval mode is the identity (returns x unchanged)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit generator")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    data = x.data * mask

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result(data, (x,), backward)


# ---------------------------------------------------------------------------
# shape surgery


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    widths = {p.data.shape[1] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(widths) != 1:
        raise ShapeError("concat_rows expects 2-D tensors of equal width")
    data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g: np.ndarray) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(part, g[lo:hi])

    return _result(data, tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    heights = {p.data.shape[0] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(heights) != 1:
        raise ShapeError("concat_cols expects 2-D tensors of equal height")
    data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def backward(g: np.ndarray) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(part, g[:, lo:hi])

    return _result(data, tuple(parts), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("slice_rows expects a 2-D tensor")
    if not 0 <= start < stop <= x.data.shape[0]:
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {x.data.shape}")
    data = x.data[start:stop].copy()

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[start:stop] = g
        _accumulate(x, full)

    return _result(data, (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D tensor")
    if not 0 <= start < stop <= x.data.shape[1]:
        raise ShapeError(f"column slice [{start}:{stop}] out of range for {x.data.shape}")
    data = x.data[:, start:stop].copy()

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _result(data, (x,), backward)


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Pick rows by index; duplicate indices accumulate gradient additively."""
    if x.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= x.data.shape[0]:
        raise ShapeError(f"row indices out of range for {x.data.shape}")
    data = x.data[idx].copy()

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _result(data, (x,), backward)


def _split_blocks(t: Tensor, n_blocks: int, name: str) -> tuple[int, int]:
    if t.data.ndim != 2:
        raise ShapeError(f"{name} expects 2-D operands")
    rows = t.data.shape[0]
    if n_blocks < 1 or rows % n_blocks != 0:
        raise ShapeError(f"{name}: {rows} rows not divisible into {n_blocks} blocks")
    return rows // n_blocks, t.data.shape[1]


def block_qk(q: Tensor, k: Tensor, n_blocks: int) -> Tensor:
    """Per-block score matrices: (B*T, d) x (B*T, d) -> (B*T, T).

    Row blocks of ``q`` and ``k`` are independent sequences; block b of the
    output is q_b @ k_b^T.  This is the batched analogue of ``matmul`` with
    a transposed right operand, used to keep attention over many short
    sequences inside a single graph node.
    """
    t_len, _ = _split_blocks(q, n_blocks, "block_qk")
    if k.data.shape != q.data.shape:
        raise ShapeError(f"block_qk operands differ: {q.data.shape} vs {k.data.shape}")
    q3 = q.data.reshape(n_blocks, t_len, -1)
    k3 = k.data.reshape(n_blocks, t_len, -1)
    data = np.einsum("btd,bsd->bts", q3, k3).reshape(n_blocks * t_len, t_len)

    def backward(g: np.ndarray) -> None:
        g3 = g.reshape(n_blocks, t_len, t_len)
        _accumulate(q, np.einsum("bts,bsd->btd", g3, k3).reshape(q.data.shape))
        _accumulate(k, np.einsum("bts,btd->bsd", g3, q3).reshape(k.data.shape))

    return _result(data, (q, k), backward)


def block_av(attn: Tensor, v: Tensor, n_blocks: int) -> Tensor:
    """Per-block mixing: (B*T, T) x (B*T, d) -> (B*T, d).

    Block b of the output is attn_b @ v_b, the value mix for one sequence.
    """
    t_len, width = _split_blocks(attn, n_blocks, "block_av")
    if width != t_len:
        raise ShapeError(f"block_av expects square {t_len}x{t_len} blocks, "
                         f"got width {width}")
    vt_len, _ = _split_blocks(v, n_blocks, "block_av")
    if vt_len != t_len:
        raise ShapeError("block_av operands have mismatched block lengths")
    a3 = attn.data.reshape(n_blocks, t_len, t_len)
    v3 = v.data.reshape(n_blocks, t_len, -1)
    data = np.einsum("bts,bsd->btd", a3, v3).reshape(v.data.shape)

    def backward(g: np.ndarray) -> None:
        g3 = g.reshape(n_blocks, t_len, -1)
        _accumulate(attn, np.einsum("btd,bsd->bts", g3, v3).reshape(attn.data.shape))
        _accumulate(v, np.einsum("bts,btd->bsd", a3, g3).reshape(v.data.shape))

    return _result(data, (attn, v), backward)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS: parents appear before their consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) into ``grad`` across the recorded graph.

    The loss must be a scalar (size-1) tensor.  Every node in the graph is
    visited exactly once; gradients accumulate, so callers reusing leaves
    across calls should :func:`zero_grads` first.  Leaves unreachable from
    the loss simply keep ``grad=None`` (read as zero).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require gradients; nothing to backpropagate")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(f: Callable[[], Tensor], tensors: Sequence[Tensor],
                      step: float = 1e-5) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``tensors`` returning a
    scalar loss.  Each coordinate of each tensor is perturbed by +/-step
    with the graph disabled, and the relative error

        |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

    is maximized over all coordinates.  Returns that maximum.
    """
    zero_grads(tensors)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]

    worst = 0.0
    with no_grad():
        for t, ref in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            ref_flat = ref.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(f().data)
                flat[i] = orig - step
                f_minus = float(f().data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                err = abs(numeric - ref_flat[i]) / max(
                    abs(numeric), abs(ref_flat[i]), 1e-8)
                worst = max(worst, err)
    return worst
