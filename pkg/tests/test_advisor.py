import numpy as np
import pytest

from rfscope.advisor import (
    SearchError,
    catalog_trf_range,
    fit_budget,
    geometric_channels,
    recommend_trf,
    search_config,
)
from rfscope.archspec import build_unet, count_parameters
from rfscope.metrics import roi_stats


def test_low_contrast_window():
    rec = recommend_trf(260, "low")
    assert rec.trf_window == pytest.approx((156, 312))
    assert rec.rationale == "low_contrast_roi_matched"
    assert rec.confidence == "normal"


def test_high_contrast_minimal():
    lo, _ = catalog_trf_range()
    for dim in (20.0, 168.0, 329.0):
        rec = recommend_trf(dim, "high")
        assert rec.trf_window[1] == lo == 54
        assert rec.rationale == "high_contrast_minimal"


def test_small_objects_low_confidence():
    assert recommend_trf(101, "low").confidence == "low"


def test_window_clipped_to_catalogue():
    rec = recommend_trf(600, "low")
    assert rec.trf_window == (360.0, 570.0)
    off = recommend_trf(1000, "low")
    assert off.trf_window == (570.0, 570.0) and off.confidence == "low"
    tiny = recommend_trf(20, "low")
    assert tiny.trf_window == (54.0, 54.0) and tiny.confidence == "low"


def test_accepts_roi_stats():
    m = np.zeros((300, 300), dtype=bool)
    m[10:271, 10:271] = True
    assert recommend_trf(roi_stats([m]), "low").average_dimension == 260


def test_bad_inputs():
    with pytest.raises(ValueError):
        recommend_trf(100, "medium")
    with pytest.raises(ValueError):
        recommend_trf(0, "low")


def test_geometric_channels():
    assert geometric_channels(1, 3) == (1, 2, 4, 8)
    assert geometric_channels(1.6, 2) == (2, 3, 6)


def test_fit_budget_within_tolerance():
    chans, params = fit_budget(3, 3, 31_000_000)
    assert abs(params - 31_000_000) <= 0.005 * 31_000_000
    assert all(b >= a for a, b in zip(chans, chans[1:]))


def test_search_prefers_depth_three():
    cands = search_config(100, 31_000_000, [3], [1, 2, 3, 4])
    top = cands[0]
    assert top.config.depth == 3
    assert top.trf == 91.0
    assert count_parameters(build_unet(top.config)) == top.params


def test_search_ordered_by_distance():
    cands = search_config(250, 5_000_000, [3, 4, 5], [2, 3, 4])
    dist = [abs(c.trf - 250) for c in cands]
    assert dist == sorted(dist)


def test_unreachable_budget():
    with pytest.raises(SearchError, match="budget"):
        search_config(187, 1_000, [3], [4])
    with pytest.raises(SearchError):
        search_config(100, 0, [3], [3])
    with pytest.raises(SearchError, match="within 50%"):
        search_config(5000, 31_000_000, [3], [1, 2])
