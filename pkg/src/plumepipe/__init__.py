"""Tooling for unorthorectified hyperspectral methane datasets.

Geometry (GLT lookup, back-sampling, nearest fill), band selection and
normalisation, tiling and splits, a matched-filter baseline, evaluation
metrics and a synthetic scene generator, plus the ``plumepipe`` command line.
"""

from .errors import PlumepipeError
from .geometry import CombineRule, Glt, SparseRaster, back_sample, nn_fill, orthorectify, unorthorectify
from .matched_filter import (
    ColumnStats,
    TargetSignature,
    alpha_to_enhancement,
    estimate_background,
    matched_filter,
    threshold_alpha,
)
from .raster import BandSelection, BandStats, HyperCube, band_stats, normalize, select_bands

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "PlumepipeError",
    "HyperCube",
    "BandSelection",
    "BandStats",
    "select_bands",
    "band_stats",
    "normalize",
    "Glt",
    "CombineRule",
    "SparseRaster",
    "orthorectify",
    "back_sample",
    "nn_fill",
    "unorthorectify",
    "TargetSignature",
    "ColumnStats",
    "estimate_background",
    "matched_filter",
    "alpha_to_enhancement",
    "threshold_alpha",
]
