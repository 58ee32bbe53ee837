"""Debiased inference for functionals of nonparametric IV models via penalized GMM Riesz representers."""

__version__ = "0.1.0"
