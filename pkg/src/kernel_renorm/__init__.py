"""Finite-width kernel renormalization for one-hidden-layer FC, LCN and CNN networks.

The package computes NNGP kernels, solves the saddle-point equations of the
effective action, evaluates the Bayesian predictor and the similarity-matrix
shift, and cross-checks all of it against Langevin sampling of actual networks.
"""

__version__ = "0.1.0"
