"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its operands and a backward rule on the result when
at least one operand requires a gradient; :func:`backward` walks that record
in reverse topological order. Leaf gradients accumulate across calls, so
callers zero them between optimizer steps.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, NonFiniteError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, tuple(range(self.ndim))[::-1])


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _result(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _result(out, (a, b), bw, "div")


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def square(x):
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), bw, "gelu")


def activate(x, kind="gelu"):
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ContractError(f"unknown activation {kind!r}")


# -- reductions and shape ------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), bw, "concat")


def getitem(x, idx):
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), bw, "getitem")


# -- linear algebra -------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # weight-style product: fold leading axes into one GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result((a2 @ b.data).reshape(*a.shape[:-1], n), (a, b), bw, "matmul")

    def bw(g):
        if b.ndim == 1:
            ga = g[..., None] * b.data
            gb = _unbroadcast((a.data * g[..., None]).reshape(-1, b.shape[0]).sum(0), b.shape)
            return _unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- normalizations and attention primitives -------------------------------------


def _masked_softmax(z, mask):
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax(x, mask=None, scale=1.0):
    """Softmax over the last axis of ``x * scale``.

    ``mask`` (broadcastable, True = keep) sends excluded logits to -inf, so
    they receive exactly zero probability. A fully masked row yields zeros.
    """
    x = as_tensor(x)
    y = _masked_softmax(x.data * scale, mask)

    def bw(g):
        return (scale * y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def softmax_scaled(x, d, mask=None):
    """``Softmax(x / sqrt(d))`` along the last axis."""
    if d < 1:
        raise ContractError("softmax_scaled needs a positive dimension")
    return softmax(x, mask=mask, scale=1.0 / math.sqrt(d))


def log_softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean and unit (population) variance."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if n < 2:
        raise ShapeError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bw(g):
        gxhat = g * gamma.data
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


def normalize(x, axis=-1):
    """Scale rows of ``x`` to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        bad = np.argwhere(np.squeeze(norm == 0, axis=axis))
        raise DegenerateInputError(f"zero-norm input at index {bad[0].tolist()}")
    y = x.data / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _result(y, (x,), bw, "normalize")


def cosine_similarity(u, v, axis=-1):
    """``<u, v> / (|u| |v|)`` along ``axis``; differentiable in both arguments."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    return sum_(mul(normalize(u, axis), normalize(v, axis)), axis=axis)


def cosine_matrix(a, b):
    """All-pairs cosine similarity between rows of ``a`` (m x d) and ``b`` (n x d)."""
    return matmul(normalize(a), transpose(normalize(b)))


# -- lookups and losses ---------------------------------------------------------


def embedding(table, idx):
    """Rows of ``table`` selected by integer array ``idx``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    vocab = table.shape[0]

    def bw(g):
        flat = idx.reshape(-1)
        onehot = np.zeros((flat.size, vocab))
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(flat.size, -1),)

    return _result(table.data[idx], (table,), bw, "embedding")


def masked_mean(x, mask, axis=-2):
    """Mean of ``x`` over ``axis`` counting only positions where ``mask`` is True.

    ``mask`` has the shape of ``x`` without its last axis.
    """
    m = np.asarray(mask, dtype=np.float64)[..., None]
    count = m.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise DegenerateInputError("masked_mean over an empty selection")
    return sum_(mul(x, m / count), axis=axis)


def nll_from_logits(logits, targets, mask=None):
    """Summed negative log-likelihood of integer ``targets`` under ``logits``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    total = -(picked * w).sum()

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1,
        )
        return (g * grad * w[..., None],)

    return _result(np.asarray(total), (logits,), bw, "nll")


# -- convolution ----------------------------------------------------------------


def conv3x3(x, weight, bias=None):
    """Same-padded 3x3 convolution, channels-last.

    x: (B, H, W, Cin); weight: (9, Cin, Cout) indexed by row-major kernel offset.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bsz, h, w, cin = x.shape
    if weight.shape[:2] != (9, cin):
        raise ShapeError(f"conv3x3 weight {weight.shape} does not match input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((bsz, h, w, weight.shape[2]))
    for k in range(9):
        di, dj = divmod(k, 3)
        out += xp[:, di:di + h, dj:dj + w, :] @ weight.data[k]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        g2 = g.reshape(-1, g.shape[-1])
        for k in range(9):
            di, dj = divmod(k, 3)
            patch = xp[:, di:di + h, dj:dj + w, :]
            gw[k] = patch.reshape(-1, cin).T @ g2
            gxp[:, di:di + h, dj:dj + w, :] += g @ weight.data[k].T
        return gxp[:, 1:-1, 1:-1, :], gw

    res = _result(out, (x, weight), bw, "conv3x3")
    return res if bias is None else add(res, bias)


def avg_pool2(x):
    """2x2 average pooling with stride 2, channels-last."""
    x = as_tensor(x)
    bsz, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {x.shape}")
    out = x.data.reshape(bsz, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0,)

    return _result(out, (x,), bw, "avg_pool2")


# -- reverse pass ---------------------------------------------------------------


def _topological(loss):
    order, seen = [], set()
    stack = [(loss, False)]
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


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


class GradCheckError(NonFiniteError):
    """A finite-difference probe evaluated to a non-finite value."""

    def __init__(self, index):
        super().__init__(f"non-finite probe at coordinate {index}")
        self.index = index


def grad_check(f, x, h=1e-5):
    """Largest relative disagreement between backprop and central differences.

    ``x`` is a tensor or a list of tensors; ``f(x)`` must return a scalar
    tensor. The per-coordinate error is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    backward(f(x))
    worst = 0.0
    for ti, t in enumerate(xs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                try:
                    fp = f(x).item()
                    flat[i] = orig - h
                    fm = f(x).item()
                except NonFiniteError:
                    fp = fm = float("nan")
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError((ti, i) if len(xs) > 1 else i)
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def clamp_min(x, lo):
    """``max(x, lo)``; the gradient is zero where the floor is active."""
    x = as_tensor(x)
    keep = x.data > lo
    return _result(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,), "clamp_min")


def clip(x, lo, hi):
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")
