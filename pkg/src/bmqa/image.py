"""RGB images: binary PPM I/O, patch tokenization, and the image encoders."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, FormatError, ShapeError
from .layers import Linear, Module, ResidualBlock


def _read_token(buf, pos):
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def decode_ppm(buf):
    """Decode binary PPM (P6, maxval 255) bytes to an (H, W, 3) uint8 array."""
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise FormatError(f"magic: expected P6, got {magic[:8]!r}")
    fields = {}
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"{name}: not a decimal integer ({tok[:16]!r})")
        fields[name] = int(tok)
    if fields["maxval"] != 255:
        raise FormatError(f"maxval: only 255 is supported, got {fields['maxval']}")
    if fields["width"] < 1 or fields["height"] < 1:
        raise FormatError("width/height: must be positive")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("header: missing whitespace before payload")
    pos += 1
    w, h = fields["width"], fields["height"]
    need = w * h * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"payload: truncated, expected {need} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) pixels, got {pixels.shape}")
    if pixels.dtype != np.uint8:
        pixels = to_uint8(pixels)
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_image(path):
    """Read a P6 PPM file as float64 values in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from None
    return decode_ppm(buf).astype(np.float64) / 255.0


def save_image(path, img):
    """Write an image in [0, 1] (or uint8) as P6 PPM, atomically."""
    data = encode_ppm(img)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def resize_nearest(img, size):
    h, w = img.shape[:2]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return img[rows][:, cols]


def patchify(img, patch):
    """Split (..., H, W, C) into row-major patches of length ``C * patch**2``.

    Each patch is flattened in (row, column, channel) order, channels
    interleaved; patch 0 is top-left.
    """
    img = np.asarray(img)
    *lead, h, w, c = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = img.reshape(*lead, gh, patch, gw, patch, c)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(tokens, patch, height, width, channels=3):
    tokens = np.asarray(tokens)
    *lead, _, _ = tokens.shape
    gh, gw = height // patch, width // patch
    n = len(lead)
    x = tokens.reshape(*lead, gh, gw, patch, patch, channels)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, height, width, channels)


@dataclass
class ImageEncoderConfig:
    backbone: str = "toy-vit"
    input_size: int = 64
    patch: int = 8
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    activation: str = "gelu"

    @property
    def n_tokens(self):
        return (self.input_size // self.patch) ** 2

    def validate(self):
        if self.backbone not in ("toy-vit", "toy-conv"):
            raise ConfigError(f"unknown image backbone {self.backbone!r}")
        if self.input_size < 8 or self.input_size % self.patch:
            raise ConfigError("input_size must be >= 8 and divisible by patch")
        if self.d_model % self.n_heads:
            raise ConfigError("image d_model must be divisible by n_heads")
        if self.backbone == "toy-conv":
            scale = self.patch // (2 ** self.n_blocks)
            if scale < 1 or scale * 2 ** self.n_blocks != self.patch:
                raise ConfigError("toy-conv needs patch == 2**n_blocks * integer")
        return self

    def to_dict(self):
        return asdict(self)


class ConvBlock(Module):
    """``act(conv3x3(x)) + conv1x1(x)`` followed by 2x2 average pooling."""

    def __init__(self, d, rng, activation="gelu"):
        self.conv = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(9 * d), size=(9, d, d)))
        self.conv_bias = T.parameter(np.zeros(d))
        self.proj = Linear(d, d, rng)
        self.activation = activation

    def __call__(self, x):
        y = T.activate(T.conv3x3(x, self.conv, self.conv_bias), self.activation)
        return T.avg_pool2(T.add(y, self.proj(x)))


class ImageEncoder(Module):
    """Toy image encoders returning (B, tokens, d_model) features.

    ``toy-vit``: linear patch embedding plus learned positions, then
    ``n_blocks`` attention residual blocks.
    ``toy-conv``: the input is average-pooled to ``n_tokens_side * 2**n_blocks``,
    a 3x3 stem lifts it to ``d_model`` channels, and each block halves the
    resolution; the final grid is read out row-major as tokens.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg.validate()
        d = cfg.d_model
        if cfg.backbone == "toy-vit":
            self.embed = Linear(3 * cfg.patch ** 2, d, rng)
            self.pos = T.parameter(rng.normal(0.0, 0.1, size=(cfg.n_tokens, d)))
            self.blocks = [ResidualBlock(d, cfg.n_heads, rng, cfg.activation) for _ in range(cfg.n_blocks)]
        else:
            self.stem = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(27), size=(9, 3, d)))
            self.stem_bias = T.parameter(np.zeros(d))
            self.blocks = [ConvBlock(d, rng, cfg.activation) for _ in range(cfg.n_blocks)]

    def prepare(self, images, resize=False):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        size = self.cfg.input_size
        if images.shape[1:3] != (size, size):
            if not resize:
                raise ShapeError(
                    f"image is {images.shape[1]}x{images.shape[2]}, encoder expects {size}x{size}"
                )
            images = np.stack([resize_nearest(im, size) for im in images])
        return images

    def __call__(self, images, resize=False):
        images = self.prepare(images, resize)
        if self.cfg.backbone == "toy-vit":
            x = T.add(self.embed(patchify(images, self.cfg.patch)), self.pos)
            for block in self.blocks:
                x = block(x)
            return x
        factor = self.cfg.patch // 2 ** self.cfg.n_blocks
        b, s = images.shape[0], self.cfg.input_size
        if factor > 1:
            images = images.reshape(b, s // factor, factor, s // factor, factor, 3).mean(axis=(2, 4))
        x = T.conv3x3(images, self.stem, self.stem_bias)
        for block in self.blocks:
            x = block(x)
        side = x.shape[1]
        return T.reshape(x, (b, side * side, self.cfg.d_model))


def dnn_block(x, block):
    """Apply one encoder block to token (or feature-map) input ``x``."""
    return block(T.as_tensor(x))
