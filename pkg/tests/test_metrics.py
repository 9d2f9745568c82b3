import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bmqa.errors import ContractError, DegenerateInputError
from bmqa.metrics import bleu4, plcc, report, rmse, srcc, topk_accuracy


def pearson_oracle(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def rank_oracle(x):
    # average rank (1-based) over every group of equal values
    ranks = []
    for v in x:
        below = sum(1 for u in x if u < v)
        equal = sum(1 for u in x if u == v)
        ranks.append(below + (equal + 1) / 2)
    return ranks


def rmse_oracle(x, y):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y)) / len(x))


def test_plcc_examples():
    x = np.random.default_rng(0).normal(size=20)
    assert plcc(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert plcc(x, -x) == pytest.approx(-1.0, abs=1e-15)
    a, b = np.random.default_rng(1).normal(size=(2, 50))
    assert abs(plcc(a, b) - pearson_oracle(a.tolist(), b.tolist())) < 1e-12


def test_constant_input_is_degenerate():
    with pytest.raises(DegenerateInputError):
        plcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateInputError):
        srcc([1, 2, 3], [5, 5, 5])


def test_srcc_examples():
    x = np.random.default_rng(2).normal(size=30)
    assert srcc(x, x ** 3) == 1.0
    assert srcc(np.arange(10), np.arange(10)[::-1]) == -1.0
    x, y = [1, 2, 2, 3], [1, 3, 2, 4]
    assert srcc(x, y) == pytest.approx(pearson_oracle(rank_oracle(x), rank_oracle(y)), abs=1e-12)


def test_srcc_without_ties_matches_closed_form():
    rng = np.random.default_rng(3)
    x, y = rng.permutation(15), rng.permutation(15)
    n = 15
    d2 = float(np.sum((x - y) ** 2))
    assert srcc(x, y) == pytest.approx(1 - 6 * d2 / (n * (n * n - 1)), abs=1e-12)


def test_rmse_examples():
    assert rmse([0.2, 0.4], [0.2, 0.4]) == 0.0
    assert rmse([0, 0], [1, 1]) == 1.0
    with pytest.raises(ContractError):
        rmse([1, 2], [1])


def test_metrics_match_oracles_on_1000_instances():
    rng = np.random.default_rng(4)
    for i in range(1000):
        n = int(rng.integers(2, 201))
        if i % 2:
            x, y = rng.integers(0, 5, size=n).astype(float), rng.integers(0, 5, size=n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        xl, yl = x.tolist(), y.tolist()
        assert abs(plcc(x, y) - pearson_oracle(xl, yl)) < 1e-12
        assert abs(srcc(x, y) - pearson_oracle(rank_oracle(xl), rank_oracle(yl))) < 1e-12
        assert abs(rmse(x, y) - rmse_oracle(xl, yl)) < 1e-12


finite = st.floats(-100, 100, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_plcc_affine_invariance(x, y, a, b):
    if np.std(x) < 1e-3 or np.std(y) < 1e-3:
        return
    base = plcc(x, y)
    assert abs(plcc(a * x + b, y) - base) < 1e-12
    assert abs(plcc(-a * x + b, y) + base) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, 10, elements=st.integers(-50, 50)), arrays(np.float64, 10, elements=finite))
def test_srcc_monotone_invariance(x, y):
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    # integer inputs keep the cubic exact, so ties survive the transform
    assert srcc(x ** 3 + 7 * x, y) == srcc(x, y)


@settings(max_examples=50)
@given(arrays(np.float64, 8, elements=finite), arrays(np.float64, 8, elements=finite))
def test_rmse_symmetric(x, y):
    assert rmse(x, y) == rmse(y, x)


def bleu_oracle(cand, ref):
    logs = []
    for n in range(1, 5):
        grams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
        ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        if not grams:
            logs.append(math.log(0.5))
            continue
        match = 0
        for g in set(grams):
            match += min(grams.count(g), ref_grams.count(g))
        logs.append(math.log(match / len(grams) if match else 1 / (len(grams) + 1)))
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(sum(logs) / 4)


def test_bleu_examples():
    s = "a dark photo of a street".split()
    assert bleu4(s, s) == 1.0
    # disjoint vocabularies sit on the smoothing floor, which shrinks with length
    floor = (1 / 13 * 1 / 12 * 1 / 11 * 1 / 10) ** 0.25
    disjoint = bleu4([f"x{i}" for i in range(12)], [f"y{i}" for i in range(12)])
    assert disjoint == pytest.approx(floor, abs=1e-12) and disjoint < 0.1
    assert bleu4([], s) == 0.0
    cand, ref = "a b c d e".split(), "a b c d f".split()
    # unigram 4/5, bigram 3/4, trigram 2/3, four-gram 1/2, equal lengths
    expect = (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert bleu4(cand, ref) == pytest.approx(expect, abs=1e-12)
    assert bleu4(cand, ref) == pytest.approx(bleu_oracle(cand, ref), abs=1e-12)


@settings(max_examples=100)
@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=9), st.lists(st.sampled_from("abcd"), max_size=9))
def test_bleu_range_and_oracle(cand, ref):
    value = bleu4(cand, ref)
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(bleu_oracle(cand, ref), abs=1e-12)
    if value == 1.0:
        assert cand == ref and len(cand) >= 4


def topk_oracle(scores, k):
    n_cand, n_tgt = scores.shape
    hits = 0
    for j in range(n_tgt):
        # candidates that beat j, counting equal scores at lower index as ahead
        ahead = sum(1 for i in range(n_cand) if scores[i, j] > scores[j, j] or (scores[i, j] == scores[j, j] and i < j))
        hits += ahead < k
    return hits / n_tgt


def test_topk_examples():
    eye = np.eye(5)
    assert all(topk_accuracy(eye, k) == 1.0 for k in range(1, 6))
    rng = np.random.default_rng(5)
    for _ in range(50):
        s = rng.integers(0, 3, size=(5, 5)).astype(float)
        assert topk_accuracy(s, 5) == 1.0
        for k in range(1, 6):
            assert topk_accuracy(s, k) == topk_oracle(s, k)
    with pytest.raises(ContractError):
        topk_accuracy(eye, 6)


def test_report_groups():
    rng = np.random.default_rng(6)
    mos = rng.random(40)
    pred = mos + 0.1 * rng.normal(size=40)
    one = report(pred, mos, groups=["d1"] * 40)
    assert one.groups["d1"].plcc == one.plcc and one.groups["d1"].n == 40
    two = report(pred, mos, groups=["d1"] * 25 + ["d2"] * 15)
    assert sum(g.n for g in two.groups.values()) == two.n == 40
    flagged = report(pred, mos, groups=["d1"] * 39 + ["d2"])
    assert flagged.flagged == {"d2": 1} and "d2" not in flagged.groups
    assert -1 <= two.plcc <= 1 and two.rmse >= 0


def test_report_text_and_csv_are_deterministic():
    rng = np.random.default_rng(7)
    mos = rng.random(10)
    a = report(mos ** 2, mos, groups=["x", "y"] * 5)
    b = report(mos ** 2, mos, groups=["x", "y"] * 5)
    assert a.to_text() == b.to_text() and a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "metric,group,value" and lines[1].startswith("plcc,all,")


def test_logistic_plcc_is_at_least_raw_for_monotone_curve():
    x = np.linspace(-3, 3, 40)
    y = 1 / (1 + np.exp(-2 * x))
    assert plcc(x, y, logistic=True) >= plcc(x, y) - 1e-12
