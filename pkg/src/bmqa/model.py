"""The two-branch quality model: encoders, alignment blocks and fusion probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .head import AlignBlock, FusionHead, HeadConfig, PUBLISHED_HEAD, init_log_tau, pairwise_probs, ss_loss
from .image import ImageEncoder, ImageEncoderConfig
from .layers import Module
from .text import QsdEncoder, QsdEncoderConfig

MODALITIES = ("both", "image", "qsd")


@dataclass
class ModelConfig:
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    qsd: QsdEncoderConfig = field(default_factory=QsdEncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    modalities: str = "both"

    def validate(self):
        self.image.validate()
        self.qsd.validate()
        self.head.validate()
        if self.modalities not in MODALITIES:
            raise ConfigError(f"modalities must be one of {MODALITIES}")
        return self

    def to_dict(self):
        return {
            "image": self.image.to_dict(),
            "qsd": self.qsd.to_dict(),
            "head": self.head.to_dict(),
            "modalities": self.modalities,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            image=ImageEncoderConfig(**d.get("image", {})),
            qsd=QsdEncoderConfig(**d.get("qsd", {})),
            head=HeadConfig(**d.get("head", {})),
            modalities=d.get("modalities", "both"),
        ).validate()

    @classmethod
    def desk(cls, modalities="both"):
        """Reduced widths used by the shipped training recipe (16 image tokens)."""
        return cls(
            image=ImageEncoderConfig(patch=16, d_model=64, n_blocks=2, n_heads=4),
            qsd=QsdEncoderConfig(d_model=32, n_heads=4),
            head=HeadConfig(d_proj=32, d_ff=64, d_aligned=32, d_fuse=64),
            modalities=modalities,
        ).validate()

    @classmethod
    def published_scale(cls):
        """Alignment/fusion widths at the published sizes; toy encoders."""
        return cls(head=HeadConfig(**PUBLISHED_HEAD)).validate()


def trim_padding(ids, mask):
    """Drop trailing all-PAD columns; downstream results are unchanged by them."""
    mask = np.asarray(mask, dtype=bool)
    width = max(int(mask.sum(axis=1).max()), 1)
    return np.asarray(ids)[:, :width], mask[:, :width]


class BMQAModel(Module):
    def __init__(self, cfg, vocab_size, seed=0):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        self.image_encoder = ImageEncoder(cfg.image, rng)
        self.qsd_encoder = QsdEncoder(cfg.qsd, vocab_size, rng)
        self.align_img = AlignBlock(cfg.image.d_model, cfg.head, rng)
        self.align_qsd = AlignBlock(cfg.qsd.d_model, cfg.head, rng)
        n_in = cfg.head.d_aligned * (2 if cfg.modalities == "both" else 1)
        self.fusion = FusionHead(n_in, cfg.head.d_fuse, rng)
        if cfg.head.tau_learnable:
            self.log_tau = init_log_tau(cfg.head.tau)

    @property
    def tau(self):
        if hasattr(self, "log_tau"):
            return T.exp(self.log_tau)
        return self.cfg.head.tau

    def image_tokens(self, images, resize=False):
        return self.image_encoder(images, resize=resize)

    def aligned_image(self, images, resize=False):
        return self.align_img(self.image_encoder(images, resize=resize))

    def aligned_qsd(self, ids, mask):
        ids, mask = trim_padding(ids, mask)
        tokens, tmask, _ = self.qsd_encoder(ids, mask)
        return self.align_qsd(tokens, tmask)

    def aligned(self, images, ids, mask):
        return self.aligned_image(images), self.aligned_qsd(ids, mask)

    def contrastive_loss(self, images, ids, mask, mode=None):
        img_hat, aud_hat = self.aligned(images, ids, mask)
        p_img, p_aud = pairwise_probs(img_hat, aud_hat, self.tau)
        return ss_loss(p_img, p_aud, mode or self.cfg.head.ss_loss_mode)

    def predict_raw(self, images=None, ids=None, mask=None):
        """Unclamped scores for a batch; unused modalities may be None."""
        parts = []
        if self.cfg.modalities in ("both", "image"):
            parts.append(self.aligned_image(images))
        if self.cfg.modalities in ("both", "qsd"):
            parts.append(self.aligned_qsd(ids, mask))
        feats = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
        return self.fusion(feats)

    def predict(self, images=None, ids=None, mask=None):
        with T.no_grad():
            return np.clip(self.predict_raw(images, ids, mask).data, 0.0, 1.0)
