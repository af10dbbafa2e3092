"""ERF rate, KDE threshold selection, object rate and segmentation scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks

GRID_POINTS = 512
SMOOTH_SIGMA = 2.0  # grid cells
PEAK_PROMINENCE = 0.05  # fraction of the global peak
KNEE_SLOPE = 0.01  # fraction of the steepest descent


class EmptyMaskError(ValueError):
    """Raised when a mask has no foreground pixel."""


def silverman_bandwidth(sample) -> float:
    """Rule-of-thumb Gaussian bandwidth 1.06 * sigma * N ** (-1/5)."""
    x = np.asarray(sample, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("bandwidth needs at least two samples")
    sigma = float(np.std(x, ddof=1))
    if x.min() == x.max() or not sigma > 0:
        raise ValueError("bandwidth undefined for a constant sample")
    return 1.06 * sigma * x.size ** (-0.2)


@dataclass(frozen=True)
class KDEModel:
    sample: np.ndarray
    bandwidth: float
    x: np.ndarray
    density: np.ndarray
    smoothed: np.ndarray

    @property
    def grid(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.density.tolist()))


def _normalize(x: np.ndarray, f: np.ndarray) -> np.ndarray:
    area = trapezoid(f, x)
    return f / area if area > 0 else f


def kde_estimate(sample, h: float, grid_points: int = GRID_POINTS, smooth_sigma: float = SMOOTH_SIGMA) -> KDEModel:
    """Gaussian KDE of ``sample`` on a uniform grid over [0, max(sample)].

    Kernel mass falling outside the grid is discarded and the density is
    renormalised to unit area, before and after the Gaussian smoothing pass.
    """
    if not (h > 0 and math.isfinite(h)):
        raise ValueError(f"bandwidth must be positive, got {h}")
    if grid_points < 16:
        raise ValueError("grid_points must be >= 16")
    y = np.asarray(sample, dtype=np.float64).ravel()
    top = float(y.max()) if y.size else 0.0
    if top <= 0:
        top = h
    x = np.linspace(0.0, top, grid_points)
    dens = np.zeros(grid_points)
    norm = 1.0 / (y.size * h * math.sqrt(2 * math.pi))
    for lo in range(0, y.size, 4096):
        u = (x[None, :] - y[lo : lo + 4096, None]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=0)
    dens = _normalize(x, dens * norm)
    smooth = _normalize(x, gaussian_filter1d(dens, smooth_sigma, mode="nearest"))
    return KDEModel(y, h, x, dens, smooth)


@dataclass(frozen=True)
class ThresholdDecision:
    epsilon: float
    mode: str  # "bimodal_trough" | "skewed_knee"
    diagnostics: dict = field(default_factory=dict)


def _peaks(f: np.ndarray, prominence: float) -> tuple[np.ndarray, np.ndarray]:
    # zero padding lets a mode sitting on either end of the grid register
    padded = np.concatenate([[0.0], f, [0.0]])
    idx, props = find_peaks(padded, prominence=prominence * f.max())
    return idx - 1, props["prominences"]


def select_threshold(model: KDEModel, prominence: float = PEAK_PROMINENCE, knee_slope: float = KNEE_SLOPE) -> ThresholdDecision:
    """Pick the ERF significance threshold from the smoothed density.

    Two or more prominent modes: the density minimum between the two most
    prominent ones. Otherwise: the first point past the steepest descent
    where the descent has flattened to ``knee_slope`` of its steepest value.
    """
    x, f = model.x, model.smoothed
    peaks, prom = _peaks(f, prominence)
    if len(peaks) >= 2:
        top2 = np.sort(peaks[np.argsort(prom, kind="stable")[::-1][:2]])
        lo, hi = int(top2[0]), int(top2[1])
        trough = lo + int(np.argmin(f[lo : hi + 1]))
        return ThresholdDecision(
            float(x[trough]),
            "bimodal_trough",
            {"peaks": [float(x[p]) for p in top2], "trough": float(x[trough])},
        )
    slope = np.diff(f) / np.diff(x)
    start = int(np.argmax(f))
    steep_at = start + int(np.argmin(slope[start:])) if start < slope.size else slope.size - 1
    steepest = float(slope[steep_at]) if slope.size else 0.0
    knee = steep_at
    if steepest < 0:
        flat = np.nonzero(-slope[steep_at:] < knee_slope * -steepest)[0]
        knee = steep_at + int(flat[0]) if flat.size else slope.size
    knee = min(knee, x.size - 1)
    return ThresholdDecision(
        float(x[knee]),
        "skewed_knee",
        {"peaks": [float(x[p]) for p in peaks], "knee": float(x[knee]), "steepest_slope": steepest},
    )


def erf_threshold(values, **kw) -> ThresholdDecision:
    """KDE threshold for a grid of ERF values (uses |values|)."""
    sample = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    return select_threshold(kde_estimate(sample, silverman_bandwidth(sample)), **kw)


def erf_rate(values, epsilon: float) -> float:
    """Weighted share of ERF entries whose magnitude exceeds ``epsilon``.

    Each significant entry y contributes 1 + |y|, and the sum is divided by
    the number of entries, so the rate can exceed 1.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    y = np.abs(np.asarray(getattr(values, "values", values), dtype=np.float64))
    if y.size == 0:
        raise ValueError("empty ERF grid")
    keep = y > epsilon
    return float(np.sum(1.0 + y[keep]) / y.size)


def bounding_box(mask) -> tuple[int, int, int, int] | None:
    """(top, left, bottom, right) of the foreground, or None if empty."""
    m = np.asarray(mask, dtype=bool)
    rows = np.nonzero(m.any(axis=1))[0]
    if rows.size == 0:
        return None
    cols = np.nonzero(m.any(axis=0))[0]
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def object_rate(mask, trf_size: float) -> float:
    """Area of the foreground bounding box (extent convention) over TRF**2."""
    if not trf_size > 0:
        raise ValueError("trf_size must be positive")
    box = bounding_box(mask)
    if box is None:
        raise EmptyMaskError("mask has no foreground pixels")
    t, l, b, r = box
    return (b - t) * (r - l) / trf_size**2


def segmentation_scores(pred, truth) -> dict[str, float]:
    """Dice, Jaccard, sensitivity, specificity and accuracy of binary masks.

    Ratios whose denominator is zero (nothing to find, or nothing to reject)
    score 1.0, so an empty prediction of an empty truth is perfect.
    """
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))

    def ratio(num, den):
        return num / den if den else 1.0

    return {
        "dice": ratio(2 * tp, 2 * tp + fp + fn),
        "jaccard": ratio(tp, tp + fp + fn),
        "sensitivity": ratio(tp, tp + fn),
        "specificity": ratio(tn, tn + fp),
        "accuracy": ratio(tp + tn, p.size),
    }


@dataclass(frozen=True)
class RoIStats:
    boxes: tuple  # per mask: (t, l, b, r) or None when empty
    dimensions: tuple  # per mask: sqrt((b - t) * (r - l)) or None
    average_dimension: float
    empty_count: int

    def to_dict(self) -> dict:
        return {
            "boxes": [list(b) if b is not None else None for b in self.boxes],
            "dimensions": list(self.dimensions),
            "average_dimension": self.average_dimension,
            "empty_count": self.empty_count,
        }


def roi_stats(masks) -> RoIStats:
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one mask")
    boxes, dims = [], []
    for m in masks:
        box = bounding_box(m)
        boxes.append(box)
        dims.append(None if box is None else math.sqrt((box[2] - box[0]) * (box[3] - box[1])))
    present = [d for d in dims if d is not None]
    if not present:
        raise EmptyMaskError("all masks are empty")
    return RoIStats(tuple(boxes), tuple(dims), math.fsum(present) / len(present), len(dims) - len(present))
