import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import trapezoid

from rfscope.metrics import (
    EmptyMaskError,
    erf_rate,
    erf_threshold,
    kde_estimate,
    object_rate,
    roi_stats,
    segmentation_scores,
    select_threshold,
    silverman_bandwidth,
)


def _with_std(n, sigma, seed=0):
    x = np.random.default_rng(seed).normal(size=n)
    x = (x - x.mean()) / x.std(ddof=1)
    return 0.5 + sigma * x


def test_silverman_reference_value():
    h = silverman_bandwidth(_with_std(1024, 0.1))
    assert h == pytest.approx(1.06 * 0.1 * 1024**-0.2, rel=1e-12)
    # 1024 ** 0.2 is exactly 4
    assert h == pytest.approx(0.0265, rel=1e-12)


def test_silverman_degenerate():
    with pytest.raises(ValueError):
        silverman_bandwidth(np.full(10, 0.3))
    with pytest.raises(ValueError):
        silverman_bandwidth([1.0])


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.01, 100.0))
def test_silverman_homogeneous(c):
    x = _with_std(200, 0.2, seed=1)
    assert silverman_bandwidth(c * x) == pytest.approx(c * silverman_bandwidth(x), rel=1e-9)


def test_kde_unit_area_and_single_mode():
    rng = np.random.default_rng(2)
    y = 0.4 + 1e-3 * rng.normal(size=500)
    m = kde_estimate(y, silverman_bandwidth(y))
    assert trapezoid(m.density, m.x) == pytest.approx(1.0)
    assert trapezoid(m.smoothed, m.x) == pytest.approx(1.0)
    assert m.x[np.argmax(m.smoothed)] == pytest.approx(0.4, abs=0.01)
    assert len(m.grid) == 512


def test_kde_two_modes():
    rng = np.random.default_rng(3)
    y = np.concatenate([0.01 + 0.01 * rng.normal(size=500), 0.9 + 0.03 * rng.normal(size=500)])
    y = np.abs(y)
    d = select_threshold(kde_estimate(y, silverman_bandwidth(y)))
    assert d.mode == "bimodal_trough"
    assert 0.01 < d.epsilon < 0.9
    assert len(d.diagnostics["peaks"]) == 2


def test_kde_bad_bandwidth():
    with pytest.raises(ValueError):
        kde_estimate([0.1, 0.2], 0.0)


def test_knee_for_decreasing_density():
    y = np.random.default_rng(4).exponential(0.1, size=2000)
    d = erf_threshold(y)
    assert d.mode == "skewed_knee"
    assert d.epsilon > 0


def test_erf_rate_examples():
    assert erf_rate(np.zeros((4, 5)), 0.1) == 0.0
    assert erf_rate(np.ones((3, 7)), 0.5) == 2.0
    assert erf_rate(-np.ones((3, 7)), 0.5) == 2.0
    g = np.random.default_rng(5).normal(size=(8, 8))
    brute = sum(1 + abs(v) for v in g.ravel() if abs(v) > 0.3) / 64
    assert erf_rate(g, 0.3) == pytest.approx(brute, abs=1e-12)
    with pytest.raises(ValueError):
        erf_rate(g, -1)


@settings(max_examples=50, deadline=None)
@given(
    grid=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-5, 5)),
    e1=st.floats(0, 5),
    e2=st.floats(0, 5),
)
def test_erf_rate_monotone_and_sign_invariant(grid, e1, e2):
    lo, hi = sorted((e1, e2))
    assert erf_rate(grid, hi) <= erf_rate(grid, lo)
    assert erf_rate(-grid, lo) == erf_rate(grid, lo)


def _box_mask(shape, t, l, b, r):
    m = np.zeros(shape, dtype=bool)
    m[t : b + 1, l : r + 1] = True
    return m


def test_object_rate_examples():
    assert object_rate(_box_mask((200, 200), 10, 10, 110, 110), 100) == 1.0
    assert object_rate(_box_mask((9, 9), 4, 4, 4, 4), 3) == 0.0
    m = _box_mask((80, 80), 5, 5, 59, 59)
    assert object_rate(m, 54) == 1.0
    assert object_rate(m, 27) == 4.0
    with pytest.raises(EmptyMaskError):
        object_rate(np.zeros((4, 4)), 10)
    with pytest.raises(ValueError):
        object_rate(m, 0)


def test_object_rate_uses_bounding_box():
    m = np.zeros((20, 20), dtype=bool)
    m[2, 3] = m[12, 13] = True
    assert object_rate(m, 10) == 1.0


def test_scores_identical_and_inverse():
    t = _box_mask((10, 10), 2, 2, 6, 6)
    assert all(v == 1.0 for v in segmentation_scores(t, t).values())
    s = segmentation_scores(~t, t)
    assert s["sensitivity"] == 0 and s["specificity"] == 0


def test_scores_half_coverage():
    t = _box_mask((10, 10), 0, 0, 3, 9)
    p = _box_mask((10, 10), 0, 0, 1, 9)
    s = segmentation_scores(p, t)
    assert s["dice"] == pytest.approx(2 / 3)
    assert s["jaccard"] == pytest.approx(1 / 2)
    assert s["sensitivity"] == pytest.approx(1 / 2)
    assert s["specificity"] == 1.0


def test_scores_empty_conventions():
    z = np.zeros((4, 4), dtype=bool)
    assert segmentation_scores(z, z)["dice"] == 1.0
    assert segmentation_scores(z, ~z)["dice"] == 0.0
    assert segmentation_scores(~z, ~z)["specificity"] == 1.0
    with pytest.raises(ValueError):
        segmentation_scores(z, np.zeros((3, 3)))


def test_roi_stats():
    one = roi_stats([_box_mask((300, 300), 10, 10, 270, 270)])
    assert one.average_dimension == 260
    two = roi_stats([_box_mask((400, 400), 0, 0, 100, 100), _box_mask((400, 400), 0, 0, 300, 300), np.zeros((400, 400))])
    assert two.average_dimension == 200
    assert two.empty_count == 1
    assert two.boxes[2] is None
    with pytest.raises(EmptyMaskError):
        roi_stats([np.zeros((3, 3))])


def test_roi_non_square():
    s = roi_stats([_box_mask((50, 50), 0, 0, 4, 9)])
    assert s.average_dimension == pytest.approx(math.sqrt(36))
