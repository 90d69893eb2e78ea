"""Count metrics shared by training and evaluation."""

import math

import numpy as np

from .errors import ConfigurationError


def count_from_density(d):
    """Clamp negative density to zero, then sum every pixel."""
    values = getattr(d, "values", None)
    if values is None:
        values = getattr(d, "data", d)
    return float(np.clip(np.asarray(values, dtype=np.float64), 0.0, None).sum())


def _pairs(y, y_hat):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.size != y_hat.size:
        raise ConfigurationError(f"length mismatch: {y.size} ground-truth vs {y_hat.size} estimates")
    if y.size == 0:
        raise ConfigurationError("metrics need at least one sample")
    return y, y_hat


def mae(y, y_hat):
    y, y_hat = _pairs(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def mse(y, y_hat):
    """Root of the mean squared count error (the crowd-counting 'MSE')."""
    y, y_hat = _pairs(y, y_hat)
    return math.sqrt(float(np.mean((y - y_hat) ** 2)))
