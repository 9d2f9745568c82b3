"""Quality-description (QSD) transcripts: vocabulary, tokenization and encoders."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, EmptyInputError, FormatError
from .layers import Linear, Module, ResidualBlock

PAD, UNK, START, STOP = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<start>", "<stop>")

_WORD = re.compile(r"[^\W_]+(?:'[^\W_]+)?", re.UNICODE)


def normalize(text):
    """Lowercase ``text`` and split it on whitespace and punctuation."""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Token/index map; indices 0-3 are PAD, UNK, START, STOP."""

    def __init__(self, tokens=()):
        self.tokens = list(RESERVED)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for tok in tokens:
            if tok in self.index:
                raise ContractError(f"duplicate vocabulary entry {tok!r}")
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token):
        return token in self.index

    def lookup(self, token):
        return self.index.get(token, UNK)

    def words(self):
        return self.tokens[len(RESERVED):]

    def decode(self, indices):
        out = []
        for i in indices:
            i = int(i)
            if i == STOP:
                break
            if i in (PAD, START):
                continue
            out.append(self.tokens[i])
        return " ".join(out)

    def to_text(self):
        return "".join(f"{tok}\n" for tok in self.words())

    @classmethod
    def from_text(cls, text):
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        for n, tok in enumerate(lines, start=1):
            if not tok or tok != tok.strip():
                raise FormatError(f"bad vocabulary token {tok!r}", line=n)
        return cls(lines)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def build_vocab(corpus, min_freq=1):
    """Vocabulary of tokens seen at least ``min_freq`` times.

    Order is frequency descending, then lexicographic, so equal corpora give
    identical vocabularies.
    """
    corpus = list(corpus)
    if not corpus:
        raise EmptyInputError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in normalize(text))
    kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass(frozen=True)
class TokenSeq:
    indices: np.ndarray
    true_len: int

    @property
    def mask(self):
        return np.arange(self.indices.size) < self.true_len


def tokenize(transcript, vocab, n_max=48):
    words = normalize(transcript)
    if not words:
        raise EmptyInputError("transcript is empty after normalization")
    words = words[:n_max]
    ids = np.full(n_max, PAD, dtype=np.int64)
    ids[: len(words)] = [vocab.lookup(w) for w in words]
    return TokenSeq(ids, len(words))


def pad_to(seq, n_max):
    """Re-pad ``seq`` to length ``n_max`` (>= its true length)."""
    if n_max < seq.true_len:
        raise ContractError("cannot pad below the true length")
    ids = np.full(n_max, PAD, dtype=np.int64)
    ids[: seq.true_len] = seq.indices[: seq.true_len]
    return TokenSeq(ids, seq.true_len)


def batch_tokens(seqs):
    ids = np.stack([s.indices for s in seqs])
    mask = np.stack([s.mask for s in seqs])
    return ids, mask


@dataclass
class QsdEncoderConfig:
    backbone: str = "transformer"
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 1
    n_max: int = 48
    use_positional: bool = True
    activation: str = "gelu"
    readout: str = "mean"

    def validate(self):
        if self.backbone not in ("bow", "transformer"):
            raise ConfigError(f"unknown QSD backbone {self.backbone!r}")
        if self.d_model % self.n_heads:
            raise ConfigError("qsd d_model must be divisible by n_heads")
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")
        if self.readout not in ("mean", "sum", "first"):
            raise ConfigError(f"unknown readout {self.readout!r}")
        return self

    def to_dict(self):
        return asdict(self)


class QsdEncoder(Module):
    """Transcript encoder producing per-word features and a pooled feature.

    ``transformer``: embeddings (+ learned positions) pass through
    ``n_layers`` masked attention blocks, then a position-wise fully connected
    layer; PAD rows of the output are zero.
    ``bow``: L1-normalized token counts through one linear layer, returned as a
    single-token sequence.
    """

    def __init__(self, cfg, vocab_size, rng):
        self.cfg = cfg.validate()
        self.vocab_size = vocab_size
        d = cfg.d_model
        if cfg.backbone == "bow":
            self.bow = Linear(vocab_size, d, rng)
        else:
            self.embed = T.parameter(rng.normal(0.0, 1.0, size=(vocab_size, d)))
            if cfg.use_positional:
                self.pos = T.parameter(rng.normal(0.0, 0.5, size=(cfg.n_max, d)))
            self.blocks = [ResidualBlock(d, cfg.n_heads, rng, cfg.activation) for _ in range(cfg.n_layers)]
        self.combine = Linear(d, d, rng)

    def counts(self, ids, mask):
        """L1-normalized bag-of-words vectors, (B, V)."""
        b = ids.shape[0]
        counts = np.zeros((b, self.vocab_size))
        rows = np.repeat(np.arange(b), ids.shape[1])
        np.add.at(counts, (rows, ids.reshape(-1)), mask.reshape(-1).astype(np.float64))
        totals = counts.sum(axis=1, keepdims=True)
        if np.any(totals == 0):
            raise EmptyInputError("all-PAD token sequence")
        return counts / totals

    def word_features(self, ids, mask):
        """Per-word features before the combination layer, (B, N, d)."""
        n = ids.shape[1]
        if n > self.cfg.n_max:
            raise ContractError(f"sequence length {n} exceeds n_max={self.cfg.n_max}")
        h = T.embedding(self.embed, ids)
        if self.cfg.use_positional:
            h = T.add(h, self.pos[:n])
        for block in self.blocks:
            h = block(h, key_mask=mask)
        return h

    def __call__(self, ids, mask):
        """Return ``(tokens, token_mask, pooled)`` for a batch of sequences."""
        ids = np.asarray(ids)
        mask = np.asarray(mask, dtype=bool)
        if np.any(mask.sum(axis=1) == 0):
            raise EmptyInputError("all-PAD token sequence")
        if self.cfg.backbone == "bow":
            pooled = self.combine(self.bow(self.counts(ids, mask)))
            return T.reshape(pooled, (ids.shape[0], 1, -1)), np.ones((ids.shape[0], 1), bool), pooled
        feats = self.combine(self.word_features(ids, mask))
        feats = T.mul(feats, mask[..., None].astype(np.float64))
        if self.cfg.readout == "mean":
            pooled = T.masked_mean(feats, mask, axis=1)
        elif self.cfg.readout == "sum":
            pooled = T.sum_(feats, axis=1)
        else:
            pooled = feats[:, 0, :]
        return feats, mask, pooled

    def word_feature(self, k, seq):
        """Feature of word ``k`` of a single sequence (before combination)."""
        if not 0 <= k < seq.true_len:
            raise ContractError(f"word position {k} outside the {seq.true_len} real tokens")
        if self.cfg.backbone == "bow":
            raise ConfigError("bag-of-words backbone has no per-word features")
        h = self.word_features(seq.indices[None, :], seq.mask[None, :])
        return h[0, k]

    def encode(self, seq):
        """Single-sequence convenience wrapper around ``__call__``."""
        return self(seq.indices[None, :], seq.mask[None, :])
