"""Image-to-QSD caption head used when no transcript is available."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyInputError
from .image import ImageEncoder, ImageEncoderConfig
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .text import PAD, START, STOP, TokenSeq


@dataclass
class CaptionConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 1
    d_ff: int = 128
    max_len: int = 32

    def validate(self, n_max=None):
        if self.d_model % self.n_heads:
            raise ConfigError("caption d_model must be divisible by n_heads")
        if n_max is not None and self.max_len > n_max:
            raise ConfigError(f"caption max_len {self.max_len} exceeds n_max {n_max}")
        return self

    def to_dict(self):
        return asdict(self)


class DecoderLayer(Module):
    def __init__(self, d, n_heads, d_ff, rng):
        self.self_attn = MultiHeadAttention(d, d, n_heads, rng)
        self.ln1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng)
        self.ln3 = LayerNorm(d)

    def __call__(self, x, memory):
        x = self.ln1(T.add(x, self.self_attn(x, causal=True)))
        x = self.ln2(T.add(x, self.cross_attn(x, context=memory)))
        return self.ln3(T.add(x, self.ff(x)))


class CaptionHead(Module):
    """Transformer decoder over emitted tokens with cross-attention to image tokens."""

    def __init__(self, cfg, image_cfg, vocab_size, rng):
        self.cfg = cfg.validate()
        self.image_cfg = image_cfg
        self.vocab_size = vocab_size
        d = cfg.d_model
        self.image_encoder = ImageEncoder(image_cfg, rng)
        self.memory = Linear(image_cfg.d_model, d, rng)
        self.embed = T.parameter(rng.normal(0.0, 1.0, size=(vocab_size, d)))
        self.pos = T.parameter(rng.normal(0.0, 0.5, size=(cfg.max_len + 1, d)))
        self.layers = [DecoderLayer(d, cfg.n_heads, cfg.d_ff, rng) for _ in range(cfg.n_layers)]
        self.out = Linear(d, vocab_size, rng)

    def encode(self, images, resize=False):
        return self.memory(self.image_encoder(images, resize=resize))

    def logits(self, memory, inputs):
        """Next-token logits (B, T, V) for decoder input ids (B, T)."""
        t = inputs.shape[1]
        x = T.add(T.embedding(self.embed, inputs), self.pos[:t])
        for layer in self.layers:
            x = layer(x, memory)
        return self.out(x)

    def teacher_forcing(self, seqs):
        """Decoder inputs, targets and weights for a batch of target sequences."""
        lens = np.array([min(s.true_len, self.cfg.max_len) for s in seqs])
        if np.any(lens == 0):
            raise EmptyInputError("caption target has no real tokens")
        width = int(lens.max()) + 1
        inputs = np.full((len(seqs), width), PAD, dtype=np.int64)
        targets = np.full((len(seqs), width), PAD, dtype=np.int64)
        inputs[:, 0] = START
        for i, (s, n) in enumerate(zip(seqs, lens)):
            inputs[i, 1:n + 1] = s.indices[:n]
            targets[i, :n] = s.indices[:n]
            targets[i, n] = STOP
        weights = np.arange(width)[None, :] <= lens[:, None]
        return inputs, targets, weights

    def nll(self, images, seqs):
        """Summed teacher-forced NLL over every sample of the batch."""
        inputs, targets, weights = self.teacher_forcing(seqs)
        return T.nll_from_logits(self.logits(self.encode(images), inputs), targets, weights)

    def generate(self, images, max_len=None, resize=False):
        """Greedy decoding from START; stops at STOP or after ``max_len`` tokens."""
        max_len = min(max_len or self.cfg.max_len, self.cfg.max_len)
        with T.no_grad():
            memory = self.encode(images, resize=resize)
            b = memory.shape[0]
            seq = np.full((b, 1), START, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            out = [[] for _ in range(b)]
            for _ in range(max_len + 1):
                step = self.logits(memory, seq).data[:, -1, :]
                nxt = np.argmax(step, axis=-1)
                for i in np.flatnonzero(~done):
                    if nxt[i] == STOP or len(out[i]) >= max_len:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
                if done.all():
                    break
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
        return out


def caption_nll(image, target, head):
    """Teacher-forced NLL of a single target sequence given one image."""
    return head.nll(np.asarray(image)[None], [target])


def to_token_seq(indices, n_max):
    if not indices:
        raise EmptyInputError("generated caption is empty")
    ids = np.full(n_max, PAD, dtype=np.int64)
    n = min(len(indices), n_max)
    ids[:n] = indices[:n]
    return TokenSeq(ids, n)


def generate_qsd(image, head, n_max, max_len=None):
    """Greedy transcript for one image as a padded :class:`TokenSeq`."""
    tokens = head.generate(np.asarray(image)[None], max_len=max_len)[0]
    return to_token_seq(tokens, n_max)
