"""Dense arrays with reverse-mode automatic differentiation.

Only the operations used by the point cloud model are provided. Every
operation records a node on an implicit tape; ``Tensor.backward`` replays the
reachable nodes in reverse recording order, so each backward rule runs exactly
once.

Tensors wrap a numpy array. Computations run at the dtype of the inputs:
float64 for gradient verification, float32 for training throughput.
"""

from __future__ import annotations

import builtins
import contextlib
import dataclasses
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import sparse

from .exceptions import ConfigError, DimensionError, GatherIndexError

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation.

    Attributes:
        data: The underlying array. Treat it as read-only once the tensor is
            part of a graph.
        requires_grad: Whether gradients should be accumulated for this
            tensor.
        grad: Populated by :meth:`backward` with an array of ``data.shape``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._order = next(_counter)
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------------- operators
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # ---------------------------------------------------------------- backward
    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor.

        ``grad`` defaults to ones, which for a scalar loss is the usual seed.
        Gradients accumulate into ``.grad`` of every reachable tensor that
        requires them.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        nodes = _reachable(self)
        nodes.sort(key=lambda t: t._order, reverse=True)
        grads = {id(self): grad}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _reachable(root: Tensor) -> list:
    seen = set()
    out = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(t._parents)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (g * (out > 0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1 - out),))


# ------------------------------------------------------------------ structure
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from None

    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # shared weight matrix: one large GEMM instead of many small ones
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def backward(g):
        # operands that need no gradient (inputs, fixed matrices) are skipped
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def expand(x: Tensor, axis: int, count: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``count`` times along it."""
    data = np.expand_dims(x.data, axis)
    shape = list(data.shape)
    shape[axis] = count
    out = np.broadcast_to(data, shape)
    return _result(out, (x,), lambda g: (g.sum(axis=axis),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat shape mismatch along axis {axis}: {ref.shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


# ----------------------------------------------------------------- reductions
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def std(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Population standard deviation (divides by the extent, not extent - 1).

    An axis of extent 1 yields 0. Where the deviation is exactly zero the
    gradient is defined as 0.
    """
    n = x.shape[axis]
    centered = x.data - x.data.mean(axis=axis, keepdims=True)
    sd = np.sqrt((centered**2).mean(axis=axis, keepdims=True))
    if n == 1:
        sd = np.zeros_like(sd)
    out = sd if keepdims else np.squeeze(sd, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.where(sd > 0, centered / (n * sd), 0.0)
        return ((g * local).astype(x.dtype, copy=False),)

    return _result(out, (x,), backward)


def max(x: Tensor, axis: int = -1, keepdims: bool = False, return_argmax: bool = False):  # noqa: A001
    """Maximum along ``axis``; the gradient flows to the first maximal entry."""
    out = x.data.max(axis=axis, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        # argmax of the equality mask picks the first maximal entry
        first = np.expand_dims(np.argmax(x.data == out, axis=axis), axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, first, g, axis=axis)
        return (gx,)

    result = _result(out if keepdims else np.squeeze(out, axis=axis), (x,), backward)
    return (result, np.argmax(x.data, axis=axis)) if return_argmax else result


def ordered_sum(a: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Sum after sorting along ``axis``: bitwise independent of the input order."""
    return np.sort(a, axis=axis).sum(axis=axis, keepdims=keepdims)


def softmax(x: Tensor, axis: int = -1, order_invariant: bool = False) -> Tensor:
    """Max-shifted softmax.

    With ``order_invariant`` the normalizer is an :func:`ordered_sum`, so
    permuting the entries along ``axis`` permutes the output bit for bit.
    """
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    total = ordered_sum(e, axis, keepdims=True) if order_invariant else e.sum(axis=axis, keepdims=True)
    y = e / total

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward)


# ------------------------------------------------------------------ gathering
def _scatter_add(shape: tuple, flat_index: np.ndarray, values: np.ndarray, dtype) -> np.ndarray:
    total = int(np.prod(shape))
    out = np.bincount(flat_index.ravel(), weights=values.ravel().astype(np.float64), minlength=total)
    return out.astype(dtype, copy=False).reshape(shape)


def _check_range(idx: np.ndarray, extent: int) -> None:
    if idx.size == 0:
        return
    bad = (idx < 0) | (idx >= extent)
    if bad.any():
        offending = int(idx[bad].ravel()[0])
        raise GatherIndexError(f"index {offending} out of range for axis of extent {extent}")


def gather(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Select slices of ``x`` along ``axis`` in ``idx`` order (like ``np.take``).

    The backward pass scatters gradients back, accumulating duplicates.
    """
    idx = np.asarray(idx, dtype=np.int64)
    ax = axis % x.ndim
    _check_range(idx, x.shape[ax])
    out = np.take(x.data, idx, axis=ax)

    def backward(g):
        moved_shape = (x.shape[ax],) + x.shape[:ax] + x.shape[ax + 1 :]
        g_moved = np.moveaxis(g.reshape(x.shape[:ax] + (idx.size,) + x.shape[ax + 1 :]), ax, 0)
        rest = int(np.prod(moved_shape[1:]))
        flat = (idx.reshape(-1, 1) * rest + np.arange(rest)).ravel()
        gx = _scatter_add(moved_shape, flat, g_moved, x.dtype)
        return (np.moveaxis(gx, 0, ax),)

    return _result(out, (x,), backward)


def index_points(x: Tensor, idx) -> Tensor:
    """Per-batch row gather: ``out[b, ...] = x[b, idx[b, ...]]``.

    Args:
        x: Tensor of shape (B, N, *feature).
        idx: Integer array of shape (B, *index_shape) with entries in [0, N).

    Returns:
        Tensor of shape (B, *index_shape, *feature).
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise DimensionError(f"index batch {idx.shape} does not match tensor {x.shape}")
    B, N = x.shape[:2]
    _check_range(idx, N)
    feat = x.shape[2:]
    rows = (idx + (np.arange(B) * N).reshape((B,) + (1,) * (idx.ndim - 1))).ravel()
    flat = x.data.reshape((B * N,) + feat)
    out = flat[rows].reshape(idx.shape + feat)

    def backward(g):
        width = int(np.prod(feat)) if feat else 1
        scatter = sparse.csr_matrix(
            (np.ones(rows.size, dtype=g.dtype), (rows, np.arange(rows.size))), shape=(B * N, rows.size)
        )
        return (np.asarray(scatter @ g.reshape(rows.size, width)).reshape(x.shape),)

    return _result(out, (x,), backward)


def take_along(x: Tensor, idx, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with a scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    ax = axis % x.ndim
    _check_range(idx, x.shape[ax])
    out = np.take_along_axis(x.data, idx, axis=ax)

    def backward(g):
        grids = np.indices(out.shape, sparse=True)
        index = []
        for d in range(x.ndim):
            if d == ax:
                index.append(np.broadcast_to(idx, out.shape))
            elif x.shape[d] == 1:
                index.append(np.zeros_like(grids[d]))
            else:
                index.append(grids[d])
        flat = np.ravel_multi_index(np.broadcast_arrays(*index), x.shape)
        return (_scatter_add(x.shape, flat, g, x.dtype),)

    return _result(out, (x,), backward)


def permute_along(x: Tensor, perm, axis: int = -1) -> Tensor:
    """Reorder ``x`` along ``axis`` by ``perm``, a permutation of that axis
    (broadcast over the leading axes like :func:`take_along`).

    Same result as :func:`take_along`; the backward pass is the inverse
    permutation instead of a scatter-add.
    """
    perm = np.asarray(perm, dtype=np.int64)
    ax = axis % x.ndim
    _check_range(perm, x.shape[ax])
    out = np.take_along_axis(x.data, perm, axis=ax)
    inverse = np.argsort(perm, axis=ax, kind="stable")
    return _result(out, (x,), lambda g: (np.take_along_axis(g, inverse, axis=ax),))


def scatter_along(values: Tensor, idx, size: int, axis: int = -1) -> Tensor:
    """Adjoint of :func:`take_along`: place ``values`` at positions ``idx`` of a
    zero tensor whose ``axis`` has extent ``size``; duplicates are summed.
    """
    idx = np.asarray(idx, dtype=np.int64)
    ax = axis % values.ndim
    if idx.shape != values.shape:
        raise DimensionError(f"scatter_along: index {idx.shape} must match values {values.shape}")
    _check_range(idx, size)
    shape = values.shape[:ax] + (size,) + values.shape[ax + 1 :]
    index = list(np.indices(values.shape, sparse=True))
    index[ax] = idx
    flat = np.ravel_multi_index(np.broadcast_arrays(*index), shape)
    out = _scatter_add(shape, flat, values.data, values.dtype)
    return _result(out, (values,), lambda g: (np.take_along_axis(g, idx, axis=ax),))


# ----------------------------------------------------------- neural net layers
def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ weight + bias``.

    ``weight`` has shape (in_features, out_features).
    """
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a (B, C) or (B, C, N) tensor.

    In training mode the batch statistics over the batch and point axes are
    used and the running buffers are updated in place (unbiased variance, as
    is conventional). In eval mode the running buffers are used.
    """
    if x.ndim not in (2, 3) or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm: input {x.shape} incompatible with {gamma.shape[0]} channels")
    axes = (0,) if x.ndim == 2 else (0, 2)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * count / builtins.max(count - 1, 1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx_hat = g * gamma.data.reshape(bshape)
        if training:
            n = x.size // x.shape[1]
            gx = (
                inv.reshape(bshape)
                / n
                * (
                    n * gx_hat
                    - gx_hat.sum(axis=axes, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = gx_hat * inv.reshape(bshape)
        return gx, dgamma, dbeta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------- verification
def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, floor: float = 1e-4) -> float:
    """Compare the recorded gradient of scalar ``f`` at ``x`` to central differences.

    Returns the maximum over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    The floor keeps vanishing gradients from turning rounding noise into a
    large ratio: one ulp of ``f`` moves the central difference by about
    ``1e-16 * |f| / eps``, so coordinates whose gradient is below ``floor``
    are checked in absolute terms (an error of 1e-4 then means 1e-8).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(np.sum(f(Tensor(base.copy())).data))
            flat[i] = orig - eps
            f_minus = float(np.sum(f(Tensor(base.copy())).data))
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


@dataclasses.dataclass
class GradReport:
    """Outcome of :func:`parameters_grad_report`.

    Attributes:
        error: Worst relative error after re-probing (the number to compare
            against a tolerance).
        raw_error: Worst relative error at ``eps`` before any re-probing.
        probed: Number of coordinates checked.
        reprobed: Coordinates whose ``eps`` stencil disagreed and were
            re-checked at ``eps / 10``.
    """

    error: float
    raw_error: float
    probed: int
    reprobed: int


def parameters_grad_report(
    f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5, max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None, floor: float = 1e-4, tol: Optional[float] = None,
) -> GradReport:
    """Gradient check with respect to a set of existing leaf tensors.

    ``f`` closes over ``params`` and is re-evaluated after perturbing their
    data in place. ``max_coords`` limits the number of probed coordinates per
    tensor (chosen with ``rng``) for large models. ``floor`` is as in
    :func:`grad_check`.

    Networks built from ReLU and max are only piecewise smooth: a stencil of
    width ``2 * eps`` that straddles a kink averages two slopes. With ``tol``
    set, every coordinate whose error exceeds it is probed again at
    ``eps / 10`` and keeps the smaller error; the count is reported so the
    re-probing stays visible.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = rng or np.random.default_rng(0)

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(np.sum(f().data))
        flat[i] = orig - h
        f_minus = float(np.sum(f().data))
        flat[i] = orig
        return (f_plus - f_minus) / (2 * h)

    def rel(ana, num):
        return abs(ana - num) / builtins.max(abs(ana), abs(num), floor)

    worst = raw = 0.0
    probed = reprobed = 0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, max_coords, replace=False)
            for i in coords:
                ana = a.reshape(-1)[i]
                err = rel(ana, central(flat, i, eps))
                raw = builtins.max(raw, err)
                if tol is not None and err >= tol:
                    reprobed += 1
                    err = builtins.min(err, rel(ana, central(flat, i, eps / 10)))
                worst = builtins.max(worst, err)
                probed += 1
    return GradReport(worst, raw, probed, reprobed)


def parameters_grad_check(
    f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5, max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None, floor: float = 1e-4, tol: Optional[float] = None,
) -> float:
    """Worst relative error of :func:`parameters_grad_report`."""
    return parameters_grad_report(f, params, eps, max_coords, rng, floor, tol).error
