"""Convolutional compressive sensing toolkit.

Images are sensed by a bank of strided Gaussian convolution filters and
reconstructed either by an alternating analysis-sparsity solver or by a
two-branch unrolled network trained end to end with the sensing filters.
"""

from .sensing import (
    FilterBank,
    MeasurementSet,
    PRESETS,
    SenseMeta,
    adjoint,
    initial_estimate,
    make_filter_bank,
    preset_bank,
    sense,
    sense_image,
)
from .solver import SolverConfig, dct_analysis_bank, reconstruct_iterative
from .network import ConvCSNet, NetConfig, init_params, load_checkpoint, save_checkpoint
from .training import psnr

__version__ = "0.1.0"
