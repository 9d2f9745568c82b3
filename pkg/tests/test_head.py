import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bmqa import tensor as T
from bmqa.errors import ConfigError, DataError, DegenerateInputError, ShapeError
from bmqa.head import AlignBlock, FusionHead, HeadConfig, align_image, align_qsd, fuse_predict, pairwise_probs, \
    ss_loss, st_loss

CFG = HeadConfig(n_heads=2, d_proj=8, d_ff=8, d_aligned=4, d_fuse=6)


def naive_probs(a, b, tau):
    n = len(a)
    cos = np.array([[a[i] @ b[j] / np.linalg.norm(a[i]) / np.linalg.norm(b[j]) for j in range(n)] for i in range(n)])
    p_img = np.array([[math.exp(cos[i, j] / tau) / sum(math.exp(cos[i, k] / tau) for k in range(n))
                       for j in range(n)] for i in range(n)])
    p_aud = np.array([[math.exp(cos[i, j] / tau) / sum(math.exp(cos[k, j] / tau) for k in range(n))
                       for i in range(n)] for j in range(n)])
    return p_img, p_aud


def test_pairwise_probs_single_and_identical():
    p, q = pairwise_probs(np.ones((1, 3)), np.ones((1, 3)), 0.07)
    assert p.data.tolist() == [[1.0]] and q.data.tolist() == [[1.0]]
    p, q = pairwise_probs(np.ones((4, 3)), np.ones((4, 3)), 0.07)
    assert np.allclose(p.data, 0.25, atol=1e-15) and np.allclose(q.data, 0.25, atol=1e-15)


def test_pairwise_probs_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    p, q = pairwise_probs(a, b, 0.07)
    ref_p, ref_q = naive_probs(a, b, 0.07)
    assert np.abs(p.data - ref_p).max() < 1e-12
    assert np.abs(q.data - ref_q).max() < 1e-12
    assert np.all(np.abs(p.data.sum(axis=1) - 1) < 1e-9)
    assert np.all(np.abs(q.data.sum(axis=1) - 1) < 1e-9)


def test_pairwise_probs_zero_row():
    a = np.ones((3, 2))
    a[1] = 0.0
    with pytest.raises(DegenerateInputError, match="1"):
        pairwise_probs(a, np.ones((3, 2)), 0.07)


def test_pairwise_probs_shape_mismatch():
    with pytest.raises(ShapeError):
        pairwise_probs(np.ones((2, 3)), np.ones((3, 3)), 0.1)


def test_tau_sharpening():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    b = a + 0.01 * rng.normal(size=(4, 3))
    diag = [pairwise_probs(a, b, tau)[0].data[0, 0] for tau in (1.0, 0.1, 0.01)]
    assert diag[0] < diag[1] < diag[2]


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(0.1, 3)), arrays(np.float64, 3, elements=st.floats(0.01, 50)))
def test_probabilities_are_feature_scale_invariant(x, scales):
    y = x[::-1].copy()
    p, q = pairwise_probs(x, y, 0.2)
    p2, q2 = pairwise_probs(x * scales[:, None], y, 0.2)
    assert np.abs(p.data - p2.data).max() < 1e-9 and np.abs(q.data - q2.data).max() < 1e-9


def test_ss_loss_examples():
    one = np.ones((1, 1))
    assert ss_loss(one, one, "paper_sum").item() == pytest.approx(-math.log(2), abs=1e-15)
    assert ss_loss(one, one, "mean_nll").item() == 0.0
    uni = np.full((5, 5), 0.2)
    assert ss_loss(uni, uni, "mean_nll").item() == pytest.approx(math.log(5), abs=1e-12)
    with pytest.raises(ConfigError):
        ss_loss(one, one, "other")


def test_ss_loss_clamps_zero_diagonal():
    p = np.array([[0.0, 1.0], [1.0, 0.0]])
    loss = ss_loss(p, p, "mean_nll").item()
    assert math.isfinite(loss) and loss == pytest.approx(-math.log(1e-30))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2)))
def test_mean_nll_non_negative(logits):
    p, q = T.softmax(logits).data, T.softmax(logits.T).data
    assert ss_loss(p, q, "mean_nll").item() >= 0.0


@pytest.mark.parametrize("mode", ["paper_sum", "mean_nll"])
def test_ss_loss_gradient_through_head(mode):
    rng = np.random.default_rng(2)
    blk_i, blk_q = AlignBlock(4, CFG, rng), AlignBlock(6, CFG, rng)
    img, aud = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 3, 6))
    mask = np.array([[1, 1, 1], [1, 1, 0], [1, 0, 0]], dtype=bool)

    def loss():
        return ss_loss(*pairwise_probs(blk_i(img), blk_q(aud, mask), 0.5), mode)

    for p in blk_i.parameters() + blk_q.parameters():
        assert T.grad_check(lambda _: loss(), p) < 1e-4


def test_align_single_token_attention():
    blk = AlignBlock(4, CFG, np.random.default_rng(3))
    out = align_image(np.random.default_rng(4).normal(size=(1, 1, 4)), blk)
    assert out.shape == (1, 4)
    assert np.allclose(blk.last_attention, 1.0)


def test_align_rows_sum_to_one_and_mask():
    blk = AlignBlock(4, CFG, np.random.default_rng(5))
    x = np.random.default_rng(6).normal(size=(2, 5, 4))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    align_qsd(x, mask, blk)
    att = blk.last_attention
    assert np.all(np.abs(att.sum(axis=-1) - 1) < 1e-9)
    assert np.all(att[0, ..., 3:] == 0.0)


def test_align_qsd_pad_extension_invariance():
    blk = AlignBlock(4, CFG, np.random.default_rng(7))
    x = np.random.default_rng(8).normal(size=(1, 3, 4))
    long = np.concatenate([x, np.random.default_rng(9).normal(size=(1, 4, 4))], axis=1)
    mask = np.array([[1, 1, 1, 0, 0, 0, 0]], dtype=bool)
    a = align_qsd(x, np.ones((1, 3), dtype=bool), blk).data
    b = align_qsd(long, mask, blk).data
    assert np.abs(a - b).max() < 1e-12


def test_align_width_mismatch():
    blk = AlignBlock(4, CFG, np.random.default_rng(10))
    with pytest.raises(ShapeError):
        blk(np.ones((1, 2, 5)))


def test_align_gradient():
    rng = np.random.default_rng(11)
    blk = AlignBlock(4, CFG, rng)
    x = T.Tensor(rng.normal(size=(2, 3, 4)))
    assert T.grad_check(lambda v: T.sum_(align_image(v, blk)), x) < 1e-4


def test_fusion_zero_weights_and_order():
    rng = np.random.default_rng(12)
    fusion = FusionHead(8, 6, rng)
    a, b = rng.normal(size=4), rng.normal(size=4)
    assert fuse_predict(a, b, fusion).item() != fuse_predict(b, a, fusion).item()
    for p in fusion.parameters():
        p.data[...] = 0.0
    assert fuse_predict(a, b, fusion).item() == 0.0


def test_fusion_gradient():
    rng = np.random.default_rng(13)
    fusion = FusionHead(8, 6, rng)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    for p in fusion.parameters():
        assert T.grad_check(lambda _: T.sum_(fuse_predict(a, b, fusion)), p) < 1e-4


def test_st_loss_examples():
    assert st_loss(0.5, 0.5).item() == 0.0
    assert st_loss(0.8, 0.5).item() == pytest.approx(0.09, abs=1e-15)
    assert st_loss(np.array([0.0, 1.0]), np.array([0.0, 0.0])).item() == 0.5
    with pytest.raises(DataError):
        st_loss(0.5, 1.2)


def test_config_validation():
    with pytest.raises(ConfigError):
        HeadConfig(d_proj=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        HeadConfig(tau=0.0).validate()
