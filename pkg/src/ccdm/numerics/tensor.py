"""Dense float32 tensors with a reverse-mode gradient tape.

Each operation that touches a gradient-requiring input records a node
(output tensor -> parents + a closure that pushes the output gradient
back).  ``backward`` walks the recorded graph once in reverse topological
order and then clears it, so a graph cannot be replayed.

Every operation validates that its output is finite; NaN/Inf never escape
silently.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "no_grad", "grad_enabled", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "reshape", "transpose",
    "tsum", "tmean", "mean_square", "softmax", "layer_norm", "silu", "relu",
    "exp", "log", "sqrt", "embedding", "conv2d", "avg_pool2d", "linear",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces (or is fed) NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, what: str) -> None:
    # fast path: a finite sum proves every element finite; a non-finite
    # sum may just be accumulator overflow, so confirm with a full scan
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """n-d float32 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float32)
        _check_finite(arr, "Tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers --------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None], op: str,
                check: bool = True) -> "Tensor":
        # value-preserving ops (reshape/transpose/lookup) cannot create
        # non-finites and skip the check
        if check:
            _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties --------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        return t

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ----------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g (broadcast result shape) back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor._result(out_data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor._result(out_data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out_data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return Tensor._result(out_data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return Tensor._result(-a.data, (a,), bwd, "neg")


# -- matmul ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports 2-D x 2-D and batched (equal leading dims) operands.  Mixed
    rank goes through `linear`, which reshapes explicitly.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    if ad.ndim != bd.ndim and not (ad.ndim > 2 and bd.ndim == 2):
        raise ValueError(f"matmul rank mismatch: {ad.shape} @ {bd.shape}")
    out_data = np.matmul(ad, bd)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            _accum(a, _unbroadcast(ga, ad.shape))
        if b.requires_grad:
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            _accum(b, _unbroadcast(gb, bd.shape))

    return Tensor._result(out_data, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w (+ b) where x is (..., in) and w is (in, out)."""
    in_dim, out_dim = w.data.shape
    lead = x.data.shape[:-1]
    flat = x.data.reshape(-1, in_dim)
    y = flat @ w.data
    if b is not None:
        y += b.data
    out_data = y.reshape(lead + (out_dim,))

    def bwd(g):
        g2 = g.reshape(-1, out_dim)
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))
        if w.requires_grad:
            _accum(w, flat.T @ g2)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out_data, parents, bwd, "linear")


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor._result(out_data, (a,), bwd, "reshape", check=False)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return Tensor._result(out_data, (a,), bwd, "transpose", check=False)


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).astype(np.float32))

    return Tensor._result(np.asarray(out_data, dtype=np.float32), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float32)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, (np.broadcast_to(gg, a.data.shape) / n).astype(np.float32))

    return Tensor._result(np.asarray(out_data, dtype=np.float32), (a,), bwd, "mean")


def mean_square(a: Tensor) -> Tensor:
    """mean(a**2) over all elements, as a single primitive."""
    out_data = np.asarray(np.mean(np.square(a.data), dtype=np.float32))
    n = a.data.size

    def bwd(g):
        _accum(a, (2.0 * float(g) / n) * a.data)

    return Tensor._result(out_data, (a,), bwd, "mean_square")


# -- nonlinearities -----------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    s = x - x.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - dot))

    return Tensor._result(s, (a,), bwd, "softmax")


def layer_norm(a: Tensor, scale: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, with an
    optional fused affine (scale, bias) over that axis."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y if scale is None else y * scale.data + (0.0 if bias is None else bias.data)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=lead))
        if scale is not None and scale.requires_grad:
            _accum(scale, (g * y).sum(axis=lead))
        if a.requires_grad:
            gn = g if scale is None else g * scale.data
            gm = gn.mean(axis=-1, keepdims=True)
            gy = (gn * y).mean(axis=-1, keepdims=True)
            _accum(a, inv * (gn - gm - y * gy))

    parents = [a] + [t for t in (scale, bias) if t is not None]
    return Tensor._result(out.astype(np.float32), parents, bwd, "layer_norm")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = np.clip(x, -60.0, 60.0)  # sigmoid saturates; keeps exp in range
    np.negative(sig, out=sig)
    np.exp(sig, out=sig)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    y = x * sig

    def bwd(g):
        d = 1.0 - sig
        d *= x
        d += 1.0
        d *= sig
        d *= g
        _accum(a, d)

    return Tensor._result(y, (a,), bwd, "silu")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return Tensor._result(a.data * mask, (a,), bwd, "relu")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bwd(g):
        _accum(a, g * y)

    return Tensor._result(y, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    y = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return Tensor._result(y, (a,), bwd, "log")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g / (2.0 * y))

    return Tensor._result(y, (a,), bwd, "sqrt")


# -- lookups / convolution ----------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    out_data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return Tensor._result(out_data, (table,), bwd, "embedding", check=False)


def conv2d(x: Tensor, w: Tensor, pad: int = 1) -> Tensor:
    """2-D convolution, stride 1.  x: (B,C,H,W), w: (O,C,kh,kw)."""
    B, C, H, W = x.data.shape
    O, C2, kh, kw = w.data.shape
    if C != C2:
        raise ValueError("conv2d channel mismatch")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = H + 2 * pad - kh + 1, W + 2 * pad - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw).T
    out_data = (cols @ wmat).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        if w.requires_grad:
            gw = (cols.T @ gmat).T.reshape(O, C, kh, kw)
            _accum(w, gw)
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            _accum(x, gx)

    return Tensor._result(np.ascontiguousarray(out_data), (x, w), bwd, "conv2d")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling on (B,C,H,W)."""
    B, C, H, W = x.data.shape
    if H % k or W % k:
        raise ValueError("avg_pool2d requires H, W divisible by k")
    r = reshape(x, (B, C, H // k, k, W // k, k))
    return tmean(r, axis=(3, 5))


# -- backward ------------------------------------------------------------------

def _accum(t: Tensor, g: np.ndarray) -> None:
    # grads are never mutated in place, so holding a view is safe
    g = g.astype(np.float32, copy=False)
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> dict:
    """Reverse-sweep from a scalar loss.

    Returns ``{name: Tensor(grad)}`` for every named gradient-requiring
    leaf; every gradient-requiring leaf also gets its ``.grad`` set.  The
    traversed graph is cleared and cannot be replayed.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None:
        raise ValueError("loss is not on the tape (no recorded operations lead to it)")

    # reverse topological order
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in seen:
                stack.append((p, False))

    leaves: list[Tensor] = []
    leaf_ids: set[int] = set()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        node._backward(node.grad)
        for p in node._parents:
            if (p.requires_grad and p._backward is None
                    and p.grad is not None and id(p) not in leaf_ids):
                leaf_ids.add(id(p))
                leaves.append(p)
        # free intermediate gradient and clear the tape entry
        if node is not loss:
            node.grad = None
        node._parents = ()
        node._backward = None

    grads: dict[str, Tensor] = {}
    for leaf in leaves:
        _check_finite(leaf.grad, "backward")
        if leaf.name is not None:
            grads[leaf.name] = Tensor(leaf.grad)
    return grads
