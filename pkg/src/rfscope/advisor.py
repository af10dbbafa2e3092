"""TRF window recommendation and equal-budget configuration search."""

from __future__ import annotations

from dataclasses import dataclass, field

from rfscope.archspec import UNetConfig, build_unet, catalog, count_parameters
from rfscope.metrics import RoIStats
from rfscope.rfprop import structural_trf

LOW_COEF = 0.6
HIGH_COEF = 1.2
LOW_CONFIDENCE_BELOW = 150.0
BUDGET_TOLERANCE = 0.005
TRF_TOLERANCE = 0.5


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    config: UNetConfig
    trf: float
    params: int

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "trf": self.trf, "params": self.params}


@dataclass(frozen=True)
class Recommendation:
    trf_window: tuple[float, float]
    rationale: str  # "high_contrast_minimal" | "low_contrast_roi_matched"
    confidence: str  # "normal" | "low"
    candidate_configs: tuple[Candidate, ...] = field(default_factory=tuple)
    average_dimension: float | None = None

    def to_dict(self) -> dict:
        return {
            "trf_window": list(self.trf_window),
            "rationale": self.rationale,
            "confidence": self.confidence,
            "average_dimension": self.average_dimension,
            "candidates": [c.to_dict() for c in self.candidate_configs],
        }


def catalog_trf_range() -> tuple[float, float]:
    sizes = [row.published_trf for row in catalog()]
    return float(min(sizes)), float(max(sizes))


def recommend_trf(stats: RoIStats | float, contrast: str, low_coef: float = LOW_COEF, high_coef: float = HIGH_COEF) -> Recommendation:
    """TRF window for a dataset given its RoI statistics and contrast class.

    High-contrast objects need no context beyond the smallest catalogued TRF.
    Low-contrast objects get a window around the average RoI dimension,
    clipped to the catalogued TRF range.
    """
    dim = stats.average_dimension if isinstance(stats, RoIStats) else float(stats)
    if not dim > 0:
        raise ValueError("average RoI dimension must be positive")
    lo_cat, hi_cat = catalog_trf_range()
    if contrast == "high":
        return Recommendation((0.0, lo_cat), "high_contrast_minimal", "normal", average_dimension=dim)
    if contrast != "low":
        raise ValueError(f"contrast must be 'high' or 'low', got {contrast!r}")
    low, high = max(low_coef * dim, lo_cat), min(high_coef * dim, hi_cat)
    confidence = "low" if dim < LOW_CONFIDENCE_BELOW else "normal"
    if low > high:
        # window falls outside the catalogue: snap to the nearest end
        edge = lo_cat if high_coef * dim < lo_cat else hi_cat
        low = high = edge
        confidence = "low"
    return Recommendation((low, high), "low_contrast_roi_matched", confidence, average_dimension=dim)


def geometric_channels(multiplier: float, depth: int) -> tuple[int, ...]:
    return tuple(max(1, round(multiplier * 2**i)) for i in range(depth + 1))


def _params(k: int, d: int, multiplier: float) -> int:
    cfg = UNetConfig(k, d, geometric_channels(multiplier, d), False, 2**d, 2**d)
    return count_parameters(build_unet(cfg))


def fit_budget(k: int, d: int, budget: int, tol: float = BUDGET_TOLERANCE) -> tuple[tuple[int, ...], int]:
    """Scale the doubling channel profile so the parameter count meets ``budget``.

    The base width multiplier is found by bisection over [1, hi]; the count is
    monotone in the multiplier, so the bracket always closes.
    """
    lo = 1.0
    if _params(k, d, lo) > budget * (1 + tol):
        raise SearchError(f"k={k}, d={d}: even one base channel exceeds the budget of {budget}")
    hi = 2.0
    while _params(k, d, hi) < budget:
        lo, hi = hi, hi * 2
    best = min((lo, hi), key=lambda m: abs(_params(k, d, m) - budget))
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        p = _params(k, d, mid)
        if abs(p - budget) < abs(_params(k, d, best) - budget):
            best = mid
        if p < budget:
            lo = mid
        else:
            hi = mid
    chans = geometric_channels(best, d)
    params = _params(k, d, best)
    if abs(params - budget) > tol * budget:
        raise SearchError(f"k={k}, d={d}: closest count {params} misses the budget by more than {tol:.1%}")
    return chans, params


def search_config(target_trf: float, param_budget: int, k_range, d_range, input_size: int | None = None) -> list[Candidate]:
    """Configurations whose TRF is near ``target_trf`` at a fixed parameter budget.

    Every (k, d) whose structural TRF lies within 50% of the target is kept
    and sized to the budget; results are ordered by TRF distance to target.
    """
    if param_budget <= 0:
        raise SearchError("budget must be positive")
    ks, ds = sorted(set(k_range)), sorted(set(d_range))
    if not ks or not ds:
        raise SearchError("empty k or d range")
    near = []
    for k in ks:
        for d in ds:
            trf = structural_trf(k, d).size()
            if abs(trf - target_trf) <= TRF_TOLERANCE * target_trf:
                near.append((abs(trf - target_trf), k, d, trf))
    if not near:
        raise SearchError(f"no (k, d) in range yields a TRF within 50% of {target_trf}")
    out, failures = [], []
    for _, k, d, trf in sorted(near):
        try:
            chans, params = fit_budget(k, d, param_budget)
        except SearchError as exc:
            failures.append(str(exc))
            continue
        size = input_size if input_size is not None else 2**d * max(1, -(-576 // 2**d))
        out.append(Candidate(UNetConfig(k, d, chans, False, size, size), trf, params))
    if not out:
        raise SearchError("budget unreachable: " + "; ".join(failures))
    return out
