"""Cross-modal alignment, contrastive self-supervision and fusion prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, ShapeError
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-30
clamp_events = 0


@dataclass
class HeadConfig:
    n_heads: int = 4
    d_proj: int = 64
    d_ff: int = 128
    d_aligned: int = 64
    d_fuse: int = 128
    tau: float = 0.07
    tau_learnable: bool = False
    ss_loss_mode: str = "paper_sum"
    activation: str = "gelu"

    def validate(self):
        if self.d_proj % self.n_heads:
            raise ConfigError(f"d_proj={self.d_proj} not divisible by n_heads={self.n_heads}")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.ss_loss_mode not in ("paper_sum", "mean_nll"):
            raise ConfigError(f"unknown ss_loss_mode {self.ss_loss_mode!r}")
        return self

    def to_dict(self):
        return asdict(self)


PUBLISHED_HEAD = dict(n_heads=32, d_proj=2048, d_ff=2048, d_aligned=1024, d_fuse=2048)


class AlignBlock(Module):
    """Attentive pooling into the shared space.

    ``H = LN(MSA(F) + F)``, ``G = LN(FF(H) + H)``, then the mean of ``G`` over
    real tokens is projected to ``d_aligned``. Masked keys get -inf logits and
    masked rows are left out of the mean.
    """

    def __init__(self, d_model, cfg, rng):
        self.msa = MultiHeadAttention(d_model, cfg.d_proj, cfg.n_heads, rng, d_out=d_model)
        self.ln1 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, cfg.d_ff, rng, cfg.activation)
        self.ln2 = LayerNorm(d_model)
        self.out = Linear(d_model, cfg.d_aligned, rng)

    @property
    def last_attention(self):
        return self.msa.last_attention

    def __call__(self, tokens, mask=None):
        tokens = T.as_tensor(tokens)
        if tokens.shape[-1] != self.ln1.gamma.shape[0]:
            raise ShapeError(f"token width {tokens.shape[-1]} != d_model {self.ln1.gamma.shape[0]}")
        h = self.ln1(T.add(self.msa(tokens, key_mask=mask), tokens))
        g = self.ln2(T.add(self.ff(h), h))
        if mask is None:
            pooled = T.mean(g, axis=1)
        else:
            pooled = T.masked_mean(g, mask, axis=1)
        return self.out(pooled)


def align_image(tokens, block):
    return block(tokens)


def align_qsd(tokens, mask, block):
    return block(tokens, mask)


def pairwise_probs(img_hats, aud_hats, tau):
    """Matched-pair probabilities in both retrieval directions.

    Returns ``(P_img, P_aud)`` where ``P_img[i, j]`` normalizes
    ``exp(cos(img_i, aud_j) / tau)`` over QSD index ``j`` and ``P_aud[j, i]``
    normalizes the same similarity over image index ``i``.
    """
    img_hats, aud_hats = T.as_tensor(img_hats), T.as_tensor(aud_hats)
    if img_hats.ndim != 2 or img_hats.shape != aud_hats.shape:
        raise ShapeError(f"expected matching (B, d) batches, got {img_hats.shape} and {aud_hats.shape}")
    sim = T.cosine_matrix(img_hats, aud_hats)
    if isinstance(tau, T.Tensor):
        logits = T.div(sim, tau)
    else:
        if not tau > 0:
            raise ContractError("tau must be positive")
        logits = T.mul(sim, 1.0 / tau)
    return T.softmax(logits), T.softmax(T.transpose(logits))


def ss_loss(p_img, p_aud, mode="paper_sum"):
    """Self-supervised alignment loss on the diagonal of both probability maps.

    ``paper_sum``: ``-log(sum_i P_img[i,i] + sum_j P_aud[j,j])``.
    ``mean_nll``: ``-(1/2B) * (sum_i log P_img[i,i] + sum_j log P_aud[j,j])``.
    """
    global clamp_events
    b = p_img.shape[0]
    diag = (np.arange(b), np.arange(b))
    d_img, d_aud = p_img[diag], p_aud[diag]
    if mode == "paper_sum":
        return T.mul(T.log(T.add(T.sum_(d_img), T.sum_(d_aud))), -1.0)
    if mode == "mean_nll":
        both = T.concat([d_img, d_aud], axis=0)
        floored = int(np.sum(both.data <= LOG_FLOOR))
        if floored:
            clamp_events += floored
            log.warning("ss_loss: %d diagonal probabilities clamped at %g", floored, LOG_FLOOR)
        return T.mul(T.sum_(T.log(T.clamp_min(both, LOG_FLOOR))), -1.0 / (2 * b))
    raise ConfigError(f"unknown ss_loss mode {mode!r}")


class FusionHead(Module):
    """Linear probe: concatenated aligned features -> ``d_fuse`` -> score."""

    def __init__(self, d_in, d_fuse, rng):
        self.hidden = Linear(d_in, d_fuse, rng)
        self.score = Linear(d_fuse, 1, rng)

    def __call__(self, features):
        return T.reshape(self.score(self.hidden(features)), (-1,))


def fuse_predict(img_hat, aud_hat, fusion):
    """Raw (unclamped) score from an aligned pair; accepts single vectors or batches."""
    img_hat, aud_hat = T.as_tensor(img_hat), T.as_tensor(aud_hat)
    single = img_hat.ndim == 1
    if single:
        img_hat, aud_hat = T.reshape(img_hat, (1, -1)), T.reshape(aud_hat, (1, -1))
    out = fusion(T.concat([img_hat, aud_hat], axis=-1))
    return out[0] if single else out


def st_loss(s_pred, s_gt):
    """Mean squared error against MOS targets in [0, 1]."""
    s_gt = np.atleast_1d(np.asarray(s_gt, dtype=np.float64))
    if np.any((s_gt < 0) | (s_gt > 1)) or not np.all(np.isfinite(s_gt)):
        raise DataError("ground-truth scores must lie in [0, 1]")
    s_pred = T.reshape(T.as_tensor(s_pred), (-1,))
    return T.mean(T.square(T.sub(s_pred, s_gt)))


def init_log_tau(tau):
    return T.parameter(np.array(math.log(tau)))
