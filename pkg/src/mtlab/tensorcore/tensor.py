"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``backward`` walks the recorded DAG once in reverse
topological order. Values are checked for NaN/inf after every forward op.

Broadcasting is deliberately narrow. Binary ops accept operands of equal
shape, a scalar operand, or a right operand whose shape is a trailing suffix
of the left shape (bias-style). Anything else raises ``ShapeError``.
"""
from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported float width {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_done")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "fiub" and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only supported by a python scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(arr, op):
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data, parents, backward_fn, op) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))) if lead else grad


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    b = _operand(b, a) if isinstance(a, Tensor) else b
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    t = x.dtype.type
    c = t(np.sqrt(2.0 / np.pi))
    x2 = x.data * x.data
    inner = c * (x.data + t(0.044715) * x2 * x.data)
    th = np.tanh(inner)
    out = t(0.5) * x.data * (t(1.0) + th)

    def bw(g):
        dinner = c * (t(1.0) + t(3 * 0.044715) * x2)
        return g * (t(0.5) * (t(1.0) + th) + t(0.5) * x.data * (t(1.0) - th * th) * dinner),

    return _make(out, (x,), bw, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of rank >= 1 and b of rank 2, or equal-batch rank >= 3 operands."""
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# -- reductions / shape -----------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape).astype(x.dtype),

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), x.dtype.type(1.0 / n))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        np.add.at(full, idx, g)
        return full,

    return _make(np.array(out), (x,), bw, "slice")


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw, "concat")


# -- normalisation / probabilities ------------------------------------------

def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps=1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional affine gain/bias."""
    d = x.shape[-1]
    for p, name in ((gain, "gain"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: {name} shape {p.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def bw(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (gx_hat - gx_hat.mean(-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, d).sum(0))
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(0))
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False), parents, bw, "layer_norm")


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True)),

    return _make(y, (x,), bw, "softmax")


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# -- lookups / losses -------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {table.shape}")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return full,

    return _make(out, (table,), bw, "embedding_lookup")


def cross_entropy_loss(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood over rows of ``logits`` [N, V].

    ``weights`` (length N, non-negative) turns the mean into
    ``sum(w * nll) / sum(w)``; a zero total weight is an error.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy_loss: target id out of range")
    n = logits.shape[0]
    w = np.ones(n, dtype=np.float64) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy_loss: zero total weight")
    logp = _log_softmax(logits.data.astype(np.float64))
    nll = -logp[np.arange(n), targets]
    out = np.asarray((w * nll).sum() / total, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (p * (w / total)[:, None] * g).astype(logits.dtype),

    return _make(out, (logits,), bw, "cross_entropy_loss")


def l1_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Mean absolute error; ``weights`` broadcast over rows of a rank-2 ``pred``."""
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    if weights is None:
        w = np.ones(pred.shape, dtype=pred.dtype)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=pred.dtype).reshape(
            (-1,) + (1,) * (pred.ndim - 1)), pred.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("l1_loss: zero total weight")
    out = np.asarray((np.abs(diff) * w).sum() / total, dtype=pred.dtype)

    def bw(g):
        gp = np.sign(diff) * w / total * g
        return gp, -gp

    return _make(out, (pred, target), bw, "l1_loss")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def bw(g):
        gp = 2.0 * diff / diff.size * g
        return gp, -gp

    return _make(out, (pred, target), bw, "mse_loss")


# -- special-purpose --------------------------------------------------------

def masked_fill_rows(x: Tensor, row_mask, fill: Tensor) -> Tensor:
    """Replace rows of ``x`` (last axis = features) where ``row_mask`` is true by ``fill``."""
    m = np.asarray(row_mask, dtype=bool)
    if m.shape != x.shape[:-1] or fill.shape != (x.shape[-1],):
        raise ShapeError(f"masked_fill_rows: x {x.shape}, mask {m.shape}, fill {fill.shape}")
    out = np.where(m[..., None], fill.data, x.data)

    def bw(g):
        return g * ~m[..., None], g[m].sum(axis=0)

    return _make(out, (x, fill), bw, "masked_fill_rows")


def straight_through(z: Tensor, quantized: Tensor) -> Tensor:
    """Forward value is ``quantized``; the gradient flows to ``z`` unchanged."""
    if z.shape != quantized.shape:
        raise ShapeError(f"straight_through: shapes {z.shape} and {quantized.shape}")
    return _make(quantized.data.copy(), (z,), lambda g: (g,), "straight_through")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- backward ---------------------------------------------------------------

def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for node in order:
        node._done = True
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._done = True
