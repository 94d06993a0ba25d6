"""Differentially private fine-tuning at desk scale.

A self-contained DP-SGD engine: per-example gradients and clipping,
Poisson subsampling, Renyi-DP accounting with noise calibration, and
layer-selection fine-tuning strategies, driven by the ``dp`` command line
harness.
"""

__version__ = "0.1.0"

from dpfine.backend import active_backend, available_backends  # noqa: F401
