"""Parameter containers and the attention/feed-forward blocks built on them."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Every :class:`Tensor` attribute is a parameter; nested modules (and lists
    of modules) are walked in attribute order, which yields stable dotted names
    for checkpoints.
    """

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable(self):
        return [p for p in self.parameters() if p.requires_grad]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
        return self

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise ConfigError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected {p.shape}, got {value.shape}")
            p.data = value.copy()
        return self

    def n_parameters(self):
        return sum(p.size for p in self.parameters())


def _init(rng, shape, fan_in):
    return T.parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = _init(rng, (d_in, d_out), d_in)
        if bias:
            self.bias = T.parameter(np.zeros(d_out))

    def __call__(self, x):
        return T.linear(x, self.weight, getattr(self, "bias", None))


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        self.gamma = T.parameter(np.ones(d))
        self.beta = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``n_heads`` heads.

    Queries, keys and values are projected to ``d_proj`` (split across heads),
    attention uses ``Softmax(. / sqrt(d_head))``, and the concatenated heads are
    projected back to ``d_out``. The most recent attention probabilities are
    kept on ``last_attention`` with shape (B, heads, Tq, Tk).
    """

    def __init__(self, d_in, d_proj, n_heads, rng, d_out=None):
        if d_proj % n_heads:
            raise ConfigError(f"d_proj={d_proj} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_proj // n_heads
        self.q = Linear(d_in, d_proj, rng)
        self.k = Linear(d_in, d_proj, rng)
        self.v = Linear(d_in, d_proj, rng)
        self.o = Linear(d_proj, d_out or d_in, rng)
        self.last_attention = None

    def _split(self, x):
        b, t, _ = x.shape
        return T.transpose(T.reshape(x, (b, t, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, x, context=None, key_mask=None, causal=False):
        if x.ndim != 3:
            raise ShapeError(f"attention expects (batch, tokens, width), got {x.shape}")
        context = x if context is None else context
        b, tq, _ = x.shape
        tk = context.shape[1]
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = T.matmul(q, T.swap_last(k))
        mask = None
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            tri = np.tril(np.ones((tq, tk), dtype=bool))
            mask = tri if mask is None else (mask & tri)
        probs = T.softmax_scaled(scores, self.d_head, mask=mask)
        self.last_attention = probs.data
        heads = T.matmul(probs, v)
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, tq, self.n_heads * self.d_head))
        return self.o(merged)


class FeedForward(Module):
    def __init__(self, d_in, d_hidden, rng, activation="gelu"):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_in, rng)
        self.activation = activation

    def __call__(self, x):
        return self.fc2(T.activate(self.fc1(x), self.activation))


class ResidualBlock(Module):
    """``act(F1(x)) + F2(x)``: attention projection plus a linear projection.

    With all parameters zero the output is ``act(0) + 0``.
    """

    def __init__(self, d_model, n_heads, rng, activation="gelu"):
        self.attn = MultiHeadAttention(d_model, d_model, n_heads, rng)
        self.proj = Linear(d_model, d_model, rng)
        self.activation = activation

    def __call__(self, x, key_mask=None):
        return T.add(T.activate(self.attn(x, key_mask=key_mask), self.activation), self.proj(x))
