"""Optimal covariance matching for diffusion denoising distributions, checked against
analytic Gaussian-mixture ground truth."""

__version__ = "0.1.0"
