import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bmqa.data import QualitySample
from bmqa.errors import DegenerateInputError, EmptyInputError
from bmqa.stats import analyze, gaussian_fit, histogram


def test_symmetric_histogram():
    fit = gaussian_fit([0.2, 0.3, 0.4], [1, 2, 1])
    assert fit.mu == pytest.approx(0.3, abs=1e-15)
    assert fit.sigma == pytest.approx(math.sqrt(0.005), abs=1e-15)
    assert fit.amplitude == pytest.approx(4 / (fit.sigma * math.sqrt(2 * math.pi)))


def test_discretized_gaussian_recovered_within_one_bin():
    centers = np.linspace(0.0, 1.0, 11)
    masses = np.exp(-0.5 * ((centers - 0.5) / 0.1) ** 2)
    fit = gaussian_fit(centers, masses)
    assert abs(fit.mu - 0.5) < 0.1 and abs(fit.sigma - 0.1) < 0.1


def test_degenerate_histograms():
    with pytest.raises(DegenerateInputError):
        gaussian_fit([0.1, 0.2, 0.3], [0, 5, 0])
    with pytest.raises(EmptyInputError):
        gaussian_fit([0.1, 0.2, 0.3], [0, 0, 0])


@settings(max_examples=50)
@given(arrays(np.float64, 6, elements=st.floats(0.5, 10)), st.floats(-5, 5))
def test_shift_equivariance(masses, c):
    centers = np.linspace(0.05, 0.55, 6)
    a = gaussian_fit(centers, masses)
    b = gaussian_fit(centers + c, masses)
    assert b.mu == pytest.approx(a.mu + c, abs=1e-12)
    assert b.sigma == pytest.approx(a.sigma, abs=1e-9)


def test_histogram_mass_equals_count():
    values = np.random.default_rng(0).random(137)
    centers, masses = histogram(values)
    assert masses.sum() == 137 and len(centers) == 20 and centers[0] == pytest.approx(0.025)


def _sample(qsd, mos, raters=None):
    return QualitySample("x.ppm", qsd, mos, "s", "d", raters=raters)


def test_single_luminance_bucket():
    rng = np.random.default_rng(1)
    samples = [_sample("a bright photo of a cat", float(m)) for m in rng.uniform(0.4, 0.9, 30)]
    rep = analyze(samples)
    assert rep.luminance["bright"].sum() == 30
    assert all(rep.luminance[w].sum() == 0 for w in ("dark", "dim", "light"))
    assert rep.mos_hist.sum() == 30 and set(rep.fits) == {"bright"}


def test_count_tables_and_ci():
    samples = [
        _sample("a dark photo in red", 0.3, [0.2, 0.4]),
        _sample("a dark photo in red and blue", 0.5, [0.5, 0.5]),
        _sample("a light photo looking noisy", 0.6, [0.6, 0.6]),
    ]
    rep = analyze(samples)
    assert rep.colors.counts == [0, 1, 2] and rep.colors.mean_mos == [0.6, 0.3, 0.5]
    assert rep.distortion.counts == [0, 1]
    assert rep.ci_halfwidths[0] == pytest.approx(1.96 * math.sqrt(0.02) / math.sqrt(2))
    tables = rep.tables()
    assert tables["color_count"].startswith("count,n,mean_mos\n0,1,0.6")
    assert tables["mos_histogram"].startswith("bin,mass\n")
    assert "ci_histogram" in tables
    assert analyze(samples).to_text() == rep.to_text()
