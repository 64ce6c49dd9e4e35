"""Desk-scale Siamese RPN tracking workbench.

Core pieces: box/anchor geometry, the three cross-correlation variants with
loop-based reference oracles, padded-residual and pad-free feature
extractors, per-level RPN heads with learned layer fusion, spatial-aware
pair sampling, the SGD training loop, the penalized inference tracker, the
center-bias simulation lab, and a one-pass evaluation harness.
"""

from .errors import (
    ConfigError,
    DatasetError,
    DivergenceError,
    NumericError,
    ShapeError,
    SiamTrackError,
    UsageError,
)
from .geometry import AnchorConfig, AnchorSet, BBox, RegressionDelta

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig",
    "AnchorSet",
    "BBox",
    "RegressionDelta",
    "SiamTrackError",
    "ConfigError",
    "ShapeError",
    "UsageError",
    "NumericError",
    "DatasetError",
    "DivergenceError",
    "__version__",
]
