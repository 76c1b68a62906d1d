"""Rolling multi-horizon forecaster for sparse, zero-inflated count panels."""

from .data import PanelSeries, WindowBatch, build_window, impute_series, ingest_panel
from .model import HyperConfig, ModelState, count_parameters
from .training import TrainConfig, forecast, rolling_fit

__version__ = "0.1.0"

__all__ = [
    "HyperConfig",
    "ModelState",
    "PanelSeries",
    "TrainConfig",
    "WindowBatch",
    "build_window",
    "count_parameters",
    "forecast",
    "impute_series",
    "ingest_panel",
    "rolling_fit",
]
