"""Receptive-field analysis for U-Net style encoder-decoder networks."""

from rfscope.archspec import (
    ConfigError,
    LayerNode,
    NetworkGraph,
    UNetConfig,
    build_unet,
    catalog,
    count_parameters,
    parse_config,
)
from rfscope.rfprop import RFBox, RFTensor, TRFReport, analyze

__version__ = "0.1.0"

from rfscope.advisor import Recommendation, recommend_trf, search_config  # noqa: E402
from rfscope.engine import ERFGrid, compute_erf, init_weights  # noqa: E402
from rfscope.metrics import erf_rate, object_rate, roi_stats, segmentation_scores, select_threshold  # noqa: E402

__all__ = [
    "ConfigError",
    "ERFGrid",
    "LayerNode",
    "NetworkGraph",
    "RFBox",
    "RFTensor",
    "Recommendation",
    "TRFReport",
    "UNetConfig",
    "analyze",
    "build_unet",
    "catalog",
    "compute_erf",
    "count_parameters",
    "erf_rate",
    "init_weights",
    "object_rate",
    "parse_config",
    "recommend_trf",
    "roi_stats",
    "search_config",
    "segmentation_scores",
    "select_threshold",
    "__version__",
]
