import numpy as np
import pytest

from bmqa import tensor as T
from bmqa.errors import ConfigError, FormatError, ShapeError
from bmqa.image import (
    ImageEncoder, ImageEncoderConfig, decode_ppm, dnn_block, encode_ppm, load_image, patchify, resize_nearest,
    save_image, unpatchify,
)
from bmqa.layers import ResidualBlock


def _ppm(w, h, value):
    return b"P6\n%d %d\n255\n" % (w, h) + bytes([value]) * (w * h * 3)


def test_load_black_and_white(tmp_path):
    for value, expect in ((0, 0.0), (255, 1.0)):
        path = tmp_path / f"{value}.ppm"
        path.write_bytes(_ppm(2, 2, value))
        img = load_image(path)
        assert img.shape == (2, 2, 3) and np.all(img == expect)


def test_ppm_round_trip_within_quantization(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 3))
    save_image(tmp_path / "r.ppm", img)
    back = load_image(tmp_path / "r.ppm")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_ppm_comments_are_skipped():
    pixels = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03")
    assert pixels.tolist() == [[[1, 2, 3]]]


@pytest.mark.parametrize("buf,field", [
    (b"P5\n1 1\n255\n\x00", "magic"),
    (b"P6\nx 1\n255\n\x00\x00\x00", "width"),
    (b"P6\n1 0\n255\n", "height"),
    (b"P6\n1 1\n65535\n\x00\x00\x00", "maxval"),
    (b"P6\n2 2\n255\n\x00\x00", "payload"),
])
def test_malformed_ppm_names_field(buf, field):
    with pytest.raises(FormatError, match=field):
        decode_ppm(buf)


def test_encode_ppm_is_p6():
    assert encode_ppm(np.zeros((1, 2, 3), dtype=np.uint8)).startswith(b"P6\n2 1\n255\n")


def test_patchify_examples():
    img = np.arange(8 * 8 * 3, dtype=float).reshape(8, 8, 3)
    tokens = patchify(img[None], 8)
    assert tokens.shape == (1, 1, 192)
    big = np.random.default_rng(1).random((16, 16, 3))
    t = patchify(big[None], 8)
    assert t.shape == (1, 4, 192)
    assert np.array_equal(t[0, 0], big[:8, :8].reshape(-1))
    assert np.array_equal(t[0, 1], big[:8, 8:].reshape(-1))
    assert np.array_equal(unpatchify(t, 8, 16, 16)[0], big)


def test_patchify_non_divisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 10, 10, 3)), 4)


def test_resize_nearest():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    small = resize_nearest(img, 2)
    assert small.shape == (2, 2, 3)
    assert np.array_equal(resize_nearest(img, 4), img)


def test_dnn_block_zero_parameters_gives_zero():
    block = ResidualBlock(4, 2, np.random.default_rng(2), activation="relu")
    for p in block.parameters():
        p.data[...] = 0.0
    out = dnn_block(np.random.default_rng(3).normal(size=(1, 3, 4)), block)
    assert np.array_equal(out.data, np.zeros((1, 3, 4)))


def test_dnn_block_gradient():
    rng = np.random.default_rng(4)
    block = ResidualBlock(4, 2, rng)
    x = T.Tensor(rng.normal(size=(1, 3, 4)))
    assert T.grad_check(lambda v: T.sum_(dnn_block(v, block)), x) < 1e-4


def test_two_blocks_equal_composition():
    cfg = ImageEncoderConfig(input_size=16, patch=8, d_model=8, n_blocks=2, n_heads=2)
    enc = ImageEncoder(cfg, np.random.default_rng(5))
    img = np.random.default_rng(6).random((1, 16, 16, 3))
    x = T.add(enc.embed(patchify(img, 8)), enc.pos)
    manual = dnn_block(dnn_block(x, enc.blocks[0]), enc.blocks[1])
    assert np.array_equal(manual.data, enc(img).data)


@pytest.mark.parametrize("backbone", ["toy-vit", "toy-conv"])
def test_encoder_shapes_saturation_and_determinism(backbone):
    cfg = ImageEncoderConfig(backbone=backbone)
    enc = ImageEncoder(cfg, np.random.default_rng(7))
    imgs = np.stack([np.zeros((64, 64, 3)), np.ones((64, 64, 3))])
    out = enc(imgs).data
    assert out.shape == (2, 64, 64)
    assert np.all(np.isfinite(out)) and np.abs(out).max() < 1e6
    same = np.random.default_rng(8).random((64, 64, 3))
    a, b = enc(np.stack([same, same])).data
    assert np.array_equal(a, b)


def test_wrong_size_needs_resize_flag():
    enc = ImageEncoder(ImageEncoderConfig(input_size=16, patch=8, d_model=8, n_heads=2), np.random.default_rng(9))
    img = np.random.default_rng(10).random((1, 32, 32, 3))
    with pytest.raises(ShapeError):
        enc(img)
    assert enc(img, resize=True).shape == (1, 4, 8)


def test_config_validation():
    with pytest.raises(ConfigError):
        ImageEncoderConfig(input_size=60, patch=8).validate()
    with pytest.raises(ConfigError):
        ImageEncoderConfig(backbone="resnet").validate()
    assert ImageEncoderConfig().n_tokens == 64
