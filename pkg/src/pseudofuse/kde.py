"""Weighted 1-D Gaussian kernel density estimates and their sample peaks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gaussian_kernel(u):
    return np.exp(-0.5 * np.square(u)) * _INV_SQRT_2PI


@dataclass(frozen=True)
class WeightedSamples:
    values: np.ndarray
    weights: np.ndarray
    bandwidth: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if values.size == 0 or values.shape != weights.shape:
            raise ValueError("values and weights must be non-empty and the same length")
        if np.any(weights < 0) or not np.any(weights > 0):
            raise ValueError("weights must be non-negative with at least one positive")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    def __len__(self):
        return self.values.size


def density_at(samples: WeightedSamples, x):
    """Evaluate ``(1/h) * sum_i w_i K((x - x_i) / h)``.

    ``x`` may be a scalar or an array; the result has the same shape.
    """
    x_arr = np.asarray(x, dtype=float)
    u = (x_arr[..., None] - samples.values) / samples.bandwidth
    dens = gaussian_kernel(u) @ samples.weights / samples.bandwidth
    return float(dens) if dens.ndim == 0 else dens


def _sample_densities(values: np.ndarray, weights: np.ndarray, bandwidth: float) -> np.ndarray:
    u = (values[:, None] - values[None, :]) / bandwidth
    return gaussian_kernel(u) @ weights / bandwidth


def _peak_index(values: np.ndarray, weights: np.ndarray, bandwidth: float) -> int:
    if values.size == 1:
        return 0
    dens = _sample_densities(values, weights, bandwidth)
    best = dens.max()
    # exact ties only: larger weight wins, then lower index
    tied = np.flatnonzero(dens == best)
    if tied.size == 1:
        return int(tied[0])
    w = weights[tied]
    return int(tied[np.flatnonzero(w == w.max())[0]])


def peak_sample(samples: WeightedSamples) -> tuple[float, int]:
    """Return ``(value, index)`` of the sample with the highest density.

    Candidates are the sample locations themselves, so the result is always one
    of the inputs. Ties go to the larger weight and then the lower index.
    """
    idx = _peak_index(samples.values, samples.weights, samples.bandwidth)
    return float(samples.values[idx]), idx


def weighted_peak_stat(samples: WeightedSamples) -> float:
    return peak_sample(samples)[0]
