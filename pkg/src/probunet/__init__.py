"""Probabilistic U-Net statistical downscaling toolkit.

Emulates high-resolution daily climate fields (precipitation, minimum and
maximum temperature) from coarse inputs, with four interchangeable training
objectives, physically constrained outputs, and distribution-level
evaluation: return levels, spectra, histograms, CRPS.
"""

__version__ = "0.1.0"

from .fields import (DEFAULT_UNITS, DEFAULT_VARS, FieldTensor, NormStats,
                     SplitSpec, coarsen, compute_norm_stats, denormalize,
                     normalize, read_tensor, upsample_nn, write_tensor)
from .synthetic import SynthConfig, generate_synthetic

__all__ = [
    "DEFAULT_UNITS",
    "DEFAULT_VARS",
    "FieldTensor",
    "NormStats",
    "SplitSpec",
    "SynthConfig",
    "coarsen",
    "compute_norm_stats",
    "denormalize",
    "generate_synthetic",
    "normalize",
    "read_tensor",
    "upsample_nn",
    "write_tensor",
    "__version__",
]
