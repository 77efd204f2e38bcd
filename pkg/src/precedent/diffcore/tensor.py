"""Reverse-mode differentiation over numpy arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the output gradient to parent gradients.  ``backward`` walks the graph in
reverse topological order.  The op set is the closed set used by the encoder,
retriever loss, fusion layers and distillation loss; it is not general purpose.

Broadcasting rule (``add``, ``sub``, ``mul``): numpy broadcasting, gradients are
summed back to each operand's shape.  ``matmul`` follows ``np.matmul``
(leading dimensions broadcast).  Reductions over "rows" act on axis ``-2``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import _kernels

DTYPE = np.float64
KL_FLOOR = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    """An op received operands whose shapes it cannot combine."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


# --------------------------------------------------------------------------
# structural
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="need (..., n, k) @ (..., k, m)")
    try:
        if b.ndim == 2 and a.ndim > 2:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = None
        if a.requires_grad:
            if bd.ndim == 2 and g.ndim > 2:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                # weight matrix: fold every leading dim of a into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    old = a.shape
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),), "transpose")


def index_select(a: Tensor, index) -> Tensor:
    """Basic/advanced indexing; gradient scatters back with accumulation."""
    out = a.data[index]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), backward, "index")


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor: out[i] = a[rows[i]]."""
    if a.ndim != 2:
        raise ShapeError("take_rows", a.shape, detail="expected 2-D table")
    rows = np.asarray(rows, dtype=np.int64)
    n = a.shape[0]

    def backward(g):
        flat = g.reshape(-1, a.shape[1])
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, rows.reshape(-1), flat)
        return (full,)

    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise ShapeError("take_rows", a.shape, rows.shape, detail="row index out of range")
    return _make(a.data[rows], (a,), backward, "take_rows")


def segment_mean(table: Tensor, tokens: np.ndarray, offsets: np.ndarray) -> Tensor:
    """Mean of table rows per segment; empty segments give zero rows."""
    if table.ndim != 2:
        raise ShapeError("segment_mean", table.shape, detail="expected 2-D table")
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if offsets.ndim != 1 or offsets.shape[0] < 1 or offsets[-1] != tokens.shape[0]:
        raise ShapeError("segment_mean", tokens.shape, offsets.shape, detail="offsets must end at len(tokens)")
    n_rows = table.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= n_rows):
        raise ShapeError("segment_mean", table.shape, detail=f"token id outside [0, {n_rows})")
    out = _kernels.segment_mean(table.data, tokens, offsets)
    return _make(out, (table,), lambda g: (_kernels.segment_mean_backward(np.ascontiguousarray(g), tokens, offsets, n_rows),), "segment_mean")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[p.shape for p in parts]) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# --------------------------------------------------------------------------
# reductions and normalisations
# --------------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / float(n))


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (broadcastable, True = keep)
    removes entries; every row must keep at least one entry."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax", x.shape, detail="a row has every entry masked")
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def max_pool_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Elementwise max over axis -2; ``mask`` has the shape of ``a`` without
    the last axis (True = valid row)."""
    if a.ndim < 2:
        raise ShapeError("max_pool_rows", a.shape, detail="need at least 2 dims")
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[:-1]:
            raise ShapeError("max_pool_rows", x.shape, mask.shape, detail="mask must match leading dims")
        x = np.where(mask[..., None], x, -np.inf)
    arg = x.argmax(axis=-2)
    out = np.take_along_axis(x, arg[..., None, :], axis=-2)[..., 0, :]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, arg[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), backward, "max_pool_rows")


def mean_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over axis -2, optionally over valid rows only."""
    if a.ndim < 2:
        raise ShapeError("mean_rows", a.shape, detail="need at least 2 dims")
    if mask is None:
        w = np.full(a.shape[:-1], 1.0 / a.shape[-2])
    else:
        mask = np.asarray(mask, dtype=DTYPE)
        if mask.shape != a.shape[:-1]:
            raise ShapeError("mean_rows", a.shape, mask.shape, detail="mask must match leading dims")
        w = mask / mask.sum(axis=-1, keepdims=True)
    out = (a.data * w[..., None]).sum(axis=-2)
    return _make(out, (a,), lambda g: (g[..., None, :] * w[..., None],), "mean_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


# --------------------------------------------------------------------------
# losses and similarity
# --------------------------------------------------------------------------


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError("dot", a.shape, b.shape)
    return sum(mul(a, b), axis=-1)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Euclidean distance over the last axis (subgradient 0 at a == b)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("euclidean_distance", a, b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError("euclidean_distance", a.shape, b.shape)
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-1))
    sa, sb = a.shape, b.shape

    def backward(g):
        safe = np.where(d > 0, d, 1.0)
        unit = np.where((d > 0)[..., None], diff / safe[..., None], 0.0)
        local = g[..., None] * unit
        return _unbroadcast(local, sa), -_unbroadcast(local, sb)

    return _make(d, (a, b), backward, "euclidean_distance")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; target is a constant."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    diff = pred.data - target
    n = max(diff.size, 1)
    return _make(np.asarray((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,), "mse")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Binary cross-entropy summed over the last axis, averaged over the rest."""
    y = np.asarray(target, dtype=DTYPE)
    if logits.shape != y.shape:
        raise ShapeError("bce_with_logits", logits.shape, y.shape)
    z = logits.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n_rows = max(per.size // max(z.shape[-1], 1), 1) if z.ndim else 1
    p = _stable_sigmoid(z)
    return _make(np.asarray(per.sum() / n_rows), (logits,), lambda g: (g * (p - y) / n_rows,), "bce_with_logits")


def kl_divergence(target, s: Tensor) -> Tensor:
    """sum_k a_k log(a_k / s_k) over the last axis, averaged over leading rows.

    ``target`` (a) is a constant distribution; terms with a_k = 0 contribute 0;
    s_k is floored at ``KL_FLOOR`` (no gradient flows through the floor).
    """
    a = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if a.shape != s.shape:
        raise ShapeError("kl_divergence", a.shape, s.shape)
    sd = s.data
    floored = sd < KL_FLOOR
    s_safe = np.where(floored, KL_FLOOR, sd)
    pos = a > 0
    terms = np.where(pos, a * (np.log(np.where(pos, a, 1.0)) - np.log(s_safe)), 0.0)
    n_rows = max(a.size // max(a.shape[-1], 1), 1) if a.ndim else 1

    def backward(g):
        return (np.where(floored, 0.0, -g * a / s_safe / n_rows),)

    return _make(np.asarray(terms.sum() / n_rows), (s,), backward, "kl_divergence")


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, accumulate: bool = True) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) to every leaf reachable from ``loss``.

    Returns a map ``id(leaf) -> gradient`` for requires_grad leaves.  With
    ``accumulate`` the gradients are also added into ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            if accumulate:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar ``fn`` w.r.t. ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||analytic - numeric|| / max(||analytic||, ||numeric||), 0 when both vanish."""
    num = float(np.linalg.norm(analytic - numeric))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if den < 1e-10:
        return num
    return num / den


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "relu": relu,
    "tanh": tanh,
    "softmax": softmax,
    "max-pool-over-rows": max_pool_rows,
    "mean-over-rows": mean_rows,
    "layer-norm": layer_norm,
    "mse": mse,
    "bce-with-logits": bce_with_logits,
    "kl-divergence": kl_divergence,
    "euclidean-distance": euclidean_distance,
    "dot": dot,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a named op; unknown names raise ``KeyError``."""
    try:
        fn = OPS[op]
    except KeyError:
        raise KeyError(f"unknown op {op!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)
