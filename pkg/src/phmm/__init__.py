"""Pyramidal hidden Markov model for multivariate time series.

A stack of neuralized HMM layers trained as a sequential variational
autoencoder: layer 1 tracks observations step by step, each higher layer
advances once per k updates of the layer below and attends over the
window of hiddens it consumed. Supports classification heads and
multi-step forecasting by decoder rollout.
"""

__version__ = "0.1.0"
