"""Finite-difference gradient checks over every differentiable op and block."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .captioner import CaptionConfig, CaptionHead
from .head import AlignBlock, FusionHead, HeadConfig, fuse_predict, pairwise_probs, ss_loss, st_loss
from .image import ConvBlock, ImageEncoder, ImageEncoderConfig
from .layers import ResidualBlock
from .text import QsdEncoder, QsdEncoderConfig, TokenSeq

TOLERANCE = 1e-4


def _p(rng, *shape, lo=None):
    data = rng.normal(size=shape)
    if lo is not None:
        data = lo + np.abs(data)
    return T.Tensor(data, requires_grad=True)


def _w(rng, *shape):
    """Random weighted sum that turns any output into a scalar loss."""
    w = rng.normal(size=shape)
    return lambda y: T.sum_(T.mul(y, w))


def _unary(op, lo=None, shape=(3, 4)):
    def build(rng):
        x = _p(rng, *shape, lo=lo)
        w = _w(rng, *shape)
        return lambda v: w(op(v)), x
    return build


def _binary(op, lo=None):
    def build(rng):
        a, b = _p(rng, 3, 4), _p(rng, 1, 4, lo=lo)
        w = _w(rng, 3, 4)
        return lambda v: w(op(v[0], v[1])), [a, b]
    return build


def _away_from_zero(rng, *shape):
    x = rng.normal(size=shape)
    x = np.where(np.abs(x) < 0.05, 0.1 * np.sign(x + 1e-12), x)
    return T.Tensor(x, requires_grad=True)


def _relu(rng):
    x = _away_from_zero(rng, 3, 4)
    w = _w(rng, 3, 4)
    return lambda v: w(T.relu(v)), x


def _matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    w = _w(rng, 2, 3, 5)
    return lambda v: w(T.matmul(v[0], v[1])), [a, b]


def _bmm(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 2, 4, 2)
    w = _w(rng, 2, 3, 2)
    return lambda v: w(T.matmul(v[0], v[1])), [a, b]


def _linear(rng):
    x, wt, bias = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)
    w = _w(rng, 3, 2)
    return lambda v: w(T.linear(v[0], v[1], v[2])), [x, wt, bias]


def _softmax(rng):
    x = _p(rng, 3, 5)
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    w = _w(rng, 3, 5)
    return lambda v: w(T.softmax(v, mask=mask, scale=0.7)), x


def _layer_norm(rng):
    x, g, b = _p(rng, 3, 6), _p(rng, 6), _p(rng, 6)
    w = _w(rng, 3, 6)
    return lambda v: w(T.layer_norm(v[0], v[1], v[2])), [x, g, b]


def _cosine(rng):
    u, v = _p(rng, 4, 5), _p(rng, 4, 5)
    w = _w(rng, 4)
    return lambda t: w(T.cosine_similarity(t[0], t[1])), [u, v]


def _cosine_matrix(rng):
    a, b = _p(rng, 3, 5), _p(rng, 4, 5)
    w = _w(rng, 3, 4)
    return lambda t: w(T.cosine_matrix(t[0], t[1])), [a, b]


def _embedding(rng):
    table = _p(rng, 6, 3)
    idx = rng.integers(0, 6, size=(2, 4))
    w = _w(rng, 2, 4, 3)
    return lambda v: w(T.embedding(v, idx)), table


def _masked_mean(rng):
    x = _p(rng, 2, 5, 3)
    mask = rng.random((2, 5)) < 0.6
    mask[:, 0] = True
    w = _w(rng, 2, 3)
    return lambda v: w(T.masked_mean(v, mask, axis=1)), x


def _nll(rng):
    logits = _p(rng, 2, 4, 6)
    targets = rng.integers(0, 6, size=(2, 4))
    mask = rng.random((2, 4)) < 0.7
    mask[0, 0] = True
    return lambda v: T.nll_from_logits(v, targets, mask), logits


def _conv(rng):
    x, k, b = _p(rng, 1, 4, 4, 2), _p(rng, 9, 2, 3), _p(rng, 3)
    w = _w(rng, 1, 4, 4, 3)
    return lambda v: w(T.conv3x3(v[0], v[1], v[2])), [x, k, b]


def _avg_pool(rng):
    x = _p(rng, 1, 4, 4, 2)
    w = _w(rng, 1, 2, 2, 2)
    return lambda v: w(T.avg_pool2(v)), x


def _shape_ops(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 2)
    w = _w(rng, 5, 2)

    def f(v):
        c = T.concat([v[0], v[1]], axis=1)
        c = T.reshape(T.transpose(c), (5, 2))
        return w(T.add(c, T.mean(T.sum_(v[0], axis=0, keepdims=True))))

    return f, [a, b]


def _getitem(rng):
    x = _p(rng, 4, 3)
    idx = (np.array([0, 2, 2, 3]), np.array([1, 0, 0, 2]))
    w = _w(rng, 4)
    return lambda v: w(v[idx]), x


def _clip(rng):
    x = _away_from_zero(rng, 3, 4)
    x.data = np.where(np.abs(np.abs(x.data) - 0.5) < 0.05, x.data + 0.1, x.data)
    w = _w(rng, 3, 4)
    return lambda v: w(T.clip(v, -0.5, 0.5)), x


def _params(module, rng, k=2):
    """Inputs plus up to ``k`` randomly chosen parameter tensors."""
    named = list(module.named_parameters())
    picks = rng.choice(len(named), size=min(k, len(named)), replace=False)
    return [named[int(i)][1] for i in picks]


def _residual(rng):
    block = ResidualBlock(4, 2, rng)
    x = _p(rng, 2, 3, 4)
    mask = np.array([[True, True, False], [True, True, True]])
    w = _w(rng, 2, 3, 4)
    params = _params(block, rng)
    return lambda v: w(block(v[0], key_mask=mask)), [x] + params


def _conv_block(rng):
    block = ConvBlock(2, rng)
    x = _p(rng, 1, 4, 4, 2)
    w = _w(rng, 1, 2, 2, 2)
    params = _params(block, rng)
    return lambda v: w(block(v[0])), [x] + params


def _image_encoder(rng):
    enc = ImageEncoder(ImageEncoderConfig(input_size=8, patch=4, d_model=4, n_blocks=1, n_heads=2), rng)
    img = rng.random((1, 8, 8, 3))
    w = _w(rng, 1, 4, 4)
    return lambda v: w(enc(img)), _params(enc, rng, 3)


def _qsd_encoder(rng):
    enc = QsdEncoder(QsdEncoderConfig(d_model=4, n_heads=2, n_max=5), 7, rng)
    ids = rng.integers(4, 7, size=(2, 5))
    mask = np.array([[True] * 3 + [False] * 2, [True] * 5])
    w = _w(rng, 2, 4)
    return lambda v: w(enc(ids, mask)[2]), [enc.embed] + _params(enc, rng, 1)


def _align(rng):
    block = AlignBlock(4, HeadConfig(n_heads=2, d_proj=4, d_ff=6, d_aligned=3), rng)
    x = _p(rng, 2, 3, 4)
    mask = np.array([[True, True, False], [True, True, True]])
    w = _w(rng, 2, 3)
    return lambda v: w(block(v[0], mask)), [x] + _params(block, rng)


def _fusion(rng):
    fusion = FusionHead(6, 5, rng)
    a, b = _p(rng, 3, 3), _p(rng, 3, 3)
    w = _w(rng, 3)
    return lambda v: w(fuse_predict(v[0], v[1], fusion)), [a, b] + _params(fusion, rng)


def _contrastive(mode):
    def build(rng):
        a, b = _p(rng, 4, 3), _p(rng, 4, 3)
        tau = float(rng.uniform(0.3, 1.0))
        return lambda v: ss_loss(*pairwise_probs(v[0], v[1], tau), mode), [a, b]
    return build


def _mse(rng):
    pred = _p(rng, 5)
    gt = rng.random(5)
    return lambda v: st_loss(v, gt), pred


def _caption(rng):
    head = CaptionHead(CaptionConfig(d_model=4, n_heads=2, d_ff=6, max_len=4),
                       ImageEncoderConfig(input_size=8, patch=4, d_model=4, n_blocks=1, n_heads=2), 6, rng)
    img = rng.random((8, 8, 3))
    seq = TokenSeq(np.array([4, 5, 0, 0]), 2)
    return lambda v: head.nll(img[None], [seq]), _params(head, rng, 3)


CASES = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div, lo=0.5),
    "exp": _unary(T.exp),
    "log": _unary(T.log, lo=0.2),
    "sqrt": _unary(T.sqrt, lo=0.2),
    "square": _unary(T.square),
    "relu": _relu,
    "gelu": _unary(T.gelu),
    "shape_ops": _shape_ops,
    "getitem": _getitem,
    "clip": _clip,
    "matmul": _matmul,
    "batched_matmul": _bmm,
    "linear": _linear,
    "softmax": _softmax,
    "log_softmax": _unary(T.log_softmax),
    "layer_norm": _layer_norm,
    "normalize": _unary(T.normalize),
    "cosine": _cosine,
    "cosine_matrix": _cosine_matrix,
    "embedding": _embedding,
    "masked_mean": _masked_mean,
    "nll": _nll,
    "conv3x3": _conv,
    "avg_pool2": _avg_pool,
    "residual_block": _residual,
    "conv_block": _conv_block,
    "image_encoder": _image_encoder,
    "qsd_encoder": _qsd_encoder,
    "align_block": _align,
    "cosine_alignment": _cosine,
    "fusion": _fusion,
    "contrastive_paper_sum": _contrastive("paper_sum"),
    "contrastive_mean_nll": _contrastive("mean_nll"),
    "mse": _mse,
    "caption_nll": _caption,
}


@dataclass
class SuiteResult:
    worst: dict
    instances: int
    seconds: float

    @property
    def passed(self):
        return all(v < TOLERANCE for v in self.worst.values())

    def to_text(self):
        lines = [f"{'case':<24}{'max rel err':>14}  status"]
        for name, err in self.worst.items():
            lines.append(f"{name:<24}{err:>14.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
        lines.append(f"{self.instances} instances per case, {self.seconds:.1f} s")
        worst = max(self.worst.values(), default=0.0)
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (worst {worst:.3e}, tolerance {TOLERANCE:g})")
        return "\n".join(lines) + "\n"


def run_suite(instances=100, seed=0, cases=None):
    """Largest relative error per case over ``instances`` seeded draws."""
    t0 = time.perf_counter()
    worst = {}
    for name in cases or CASES:
        build = CASES[name]
        err = 0.0
        for i in range(instances):
            f, x = build(np.random.default_rng([seed, i]))
            err = max(err, T.grad_check(f, x))
        worst[name] = err
    return SuiteResult(worst, instances, time.perf_counter() - t0)
