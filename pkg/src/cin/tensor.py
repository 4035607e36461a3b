"""numpy-backed dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: float32/float64 row-major arrays, a
dynamically built acyclic graph, and the operation set the training
objectives actually need. All reductions use numpy's fixed sequential
order, so identical seeds and inputs give bit-identical results.

Gradients of ``requires_grad`` tensors accumulate across repeated
``backward()`` calls; callers reset ``.grad`` (the optimizer does this)
when they want fresh gradients.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "LOG_EPS",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "sigmoid",
    "softmax",
    "log2",
    "sqrt",
    "mean",
    "tsum",
    "l2_norm",
    "frobenius_norm_diff",
    "conv2d",
    "conv1d_channels",
    "global_avg_pool",
    "concat",
    "gather_rows",
    "transpose",
    "reshape",
    "grad_check",
]

LOG_EPS = 1e-12  # log2 arguments are clamped to this
_NORM_EPS = 1e-12  # guards 0/0 in norm gradients
_LN2 = float(np.log(2.0))

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class no_grad:
    """Context manager that disables graph recording (cheap evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense float array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph (no gradient flows through)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` on every ``requires_grad`` ancestor.

        The graph is walked once in reverse topological order. Repeated
        calls without resetting ``.grad`` accumulate.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order = _topo_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            contribs = node._vjp(g)
            for parent, contrib in zip(node._parents, contribs):
                if contrib is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + contrib
                else:
                    pending[key] = contrib

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
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


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# -- elementwise arithmetic ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(a.data / b.data, (a, b), vjp, "div")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _node(a.data * s, (a,), vjp, "scale")


# -- linear algebra -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not contract")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {a.shape}")

    def vjp(g):
        return (g.T.copy(),)

    return _node(a.data.T.copy(), (a,), vjp, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(data, (a,), vjp, "reshape")


# -- nonlinearities -----------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), vjp, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp, "sigmoid")


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), vjp, "softmax")


def log2(a: Tensor) -> Tensor:
    """Base-2 logarithm; non-positive inputs are clamped to ``LOG_EPS``."""
    clamped = np.maximum(a.data, LOG_EPS)
    live = a.data > LOG_EPS  # zero gradient inside the clamp region

    def vjp(g):
        return (g * live / (clamped * _LN2),)

    return _node(np.log2(clamped), (a,), vjp, "log2")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        safe = out > _NORM_EPS
        return (np.where(safe, g * 0.5 / np.where(safe, out, 1.0), 0.0),)

    return _node(out, (a,), vjp, "sqrt")


# -- reductions ----------------------------------------------------------


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for {ndim}-D tensor")
    return axis % ndim


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over ``axis`` (all elements when ``axis`` is None)."""
    if axis is None:
        def vjp(g):
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

        return _node(a.data.sum(), (a,), vjp, "sum")

    ax = _normalize_axis(axis, a.ndim, "sum")

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).astype(a.dtype, copy=False),)

    return _node(a.data.sum(axis=ax), (a,), vjp, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over ``axis`` (all elements when ``axis`` is None)."""
    if axis is None:
        n = a.data.size

        def vjp(g):
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False),)

        return _node(a.data.mean(), (a,), vjp, "mean")

    ax = _normalize_axis(axis, a.ndim, "mean")
    n = a.shape[ax]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), a.shape).astype(a.dtype, copy=False),)

    return _node(a.data.mean(axis=ax), (a,), vjp, "mean")


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries; gradient is 0 at the zero tensor."""
    out = np.sqrt((a.data * a.data).sum())

    def vjp(g):
        return (g * a.data / max(float(out), _NORM_EPS),)

    return _node(np.asarray(out, dtype=a.dtype), (a,), vjp, "l2_norm")


def frobenius_norm_diff(a: Tensor, b: Tensor) -> Tensor:
    """Entry-wise L2 norm of ``a - b``."""
    if a.shape != b.shape:
        raise ShapeError(
            f"frobenius_norm_diff: shapes {a.shape} and {b.shape} differ"
        )
    return l2_norm(sub(a, b))


# -- structural ops ------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ax = _normalize_axis(axis, tensors[0].ndim, "concat")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax)
            for i in range(len(tensors))
        )

    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        ) from None
    return _node(data, tuple(tensors), vjp, "concat")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows ``a[indices]`` (repetition allowed; backward scatter-adds)."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim != 2 or idx.ndim != 1:
        raise ShapeError(
            f"gather_rows: expected 2-D tensor and 1-D indices, got {a.shape} / {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def vjp(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _node(a.data[idx], (a,), vjp, "gather_rows")


# -- convolution / pooling ----------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: x[M,C,H,W] * w[F,C,kh,kw] -> [M,F,OH,OW]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} / {w.shape}")
    m, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {c2}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: kernel {w.shape} does not fit input {x.shape} with pad {pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [M,C,OH,OW,kh,kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        m * oh * ow, c * kh * kw
    )
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(m, oh, ow, f).transpose(0, 3, 1, 2)

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(m * oh * ow, f)
        gw = (gmat.T @ cols).reshape(f, c, kh, kw)
        gcols = (gmat @ wmat).reshape(m, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, :, :, i, j
                ]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd]
        return gx, gw

    return _node(np.ascontiguousarray(out), (x, w), vjp, "conv2d")


def conv1d_channels(x: Tensor, w: Tensor) -> Tensor:
    """1-D cross-correlation of an [M,C] channel descriptor with kernel w[k].

    Zero-padded so the output keeps C channels; k must be odd.
    """
    if x.ndim != 2 or w.ndim != 1:
        raise ShapeError(
            f"conv1d_channels: expected [M,C] and [k], got {x.shape} / {w.shape}"
        )
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"conv1d_channels: kernel size {k} must be odd")
    pad = (k - 1) // 2

    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # [M,C,k]
    out = win @ w.data

    def vjp(g):
        gw = (win * g[:, :, None]).sum(axis=(0, 1))
        gp = np.pad(g, ((0, 0), (pad, pad)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=1)
        gx = gwin @ w.data[::-1].copy()
        return gx.astype(x.dtype, copy=False), gw.astype(w.dtype, copy=False)

    return _node(out.astype(x.dtype, copy=False), (x, w), vjp, "conv1d_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: [M,C,H,W] -> [M,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    m, c, h, w = x.shape
    n = h * w

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / n, x.shape).astype(x.dtype, copy=False),)

    return _node(x.data.mean(axis=(2, 3)), (x,), vjp, "global_avg_pool")


# -- gradient verification ----------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic and scalar-valued. Runs in float64
    regardless of the dtype of ``x``.
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    xd = np.asarray(x.data, dtype=np.float64).copy()

    leaf = Tensor(xd.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f returned shape {out.shape}, expected scalar")
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(xd)

    def feval(arr: np.ndarray) -> float:
        with no_grad():
            return float(f(Tensor(arr)).data)

    numeric = np.zeros_like(xd)
    flat_num = numeric.reshape(-1)
    for i in range(xd.size):
        e = np.zeros_like(xd)
        e.reshape(-1)[i] = eps
        flat_num[i] = (feval(xd + e) - feval(xd - e)) / (2.0 * eps)

    for name, arr in (("analytic", analytic), ("numeric", numeric)):
        bad = ~np.isfinite(arr)
        if bad.any():
            coord = tuple(int(v) for v in np.argwhere(bad)[0])
            raise ValueError(f"grad_check: non-finite {name} gradient at {coord}")

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
