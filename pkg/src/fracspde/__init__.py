"""Non-stationary anisotropic Gaussian random fields with fractional smoothness.

Sparse-precision Gauss-Markov approximations of fields driven by a fractional,
spatially varying elliptic operator: finite-element discretization on
triangulated rectangles, rational operator approximation for non-integer
smoothness, reverse-mode gradients through every sparse step, MAP estimation,
kriging prediction and proper scoring, plus a reproducible simulation-study
driver and a command-line interface.
"""

__version__ = "0.1.0"
