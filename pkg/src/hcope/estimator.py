"""Estimator protocol used by the bootstrap.

An estimator is prepared once on the full dataset, then evaluated on many
index resamples at once. ``evaluate`` takes an integer array of shape
``(B, m)`` (each row lists trajectory indices, repeats allowed) and returns
``B`` raw-scale value estimates, with NaN marking a resample on which the
estimator is undefined.

Any plain function ``f(dataset, pi_e, pi_b) -> float`` can be used through
:class:`FunctionEstimator`, which materialises each resampled dataset.
"""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np

from .errors import HcopeError


class Prepared(Protocol):
    n: int

    def evaluate(self, indices: np.ndarray) -> np.ndarray: ...


class Estimator(Protocol):
    name: str

    def prepare(self, ds, pi_e, pi_b) -> Prepared: ...


def multiplicities(indices: np.ndarray, n: int) -> np.ndarray:
    """Count how often each of ``n`` trajectories appears in every row."""
    indices = np.asarray(indices, dtype=np.int64)
    B = indices.shape[0]
    flat = (indices + n * np.arange(B)[:, None]).ravel()
    return np.bincount(flat, minlength=B * n).reshape(B, n).astype(float)


def identity_indices(n: int) -> np.ndarray:
    return np.arange(n)[None, :]


def point_estimate(prepared: Prepared) -> float:
    return float(prepared.evaluate(identity_indices(prepared.n))[0])


class FunctionEstimator:
    """Wrap ``f(ds, pi_e, pi_b)``; failures raised by ``f`` become NaN."""

    def __init__(self, fn: Callable, name: str | None = None):
        self.fn = fn
        self.name = name or getattr(fn, "__name__", "estimator")

    def prepare(self, ds, pi_e, pi_b):
        return _PreparedFunction(self.fn, ds, pi_e, pi_b)


class _PreparedFunction:
    def __init__(self, fn, ds, pi_e, pi_b):
        self.fn, self.ds, self.pi_e, self.pi_b = fn, ds, pi_e, pi_b
        self.n = len(ds)
        self.diagnostics = {}

    def evaluate(self, indices):
        out = np.empty(len(indices))
        for j, row in enumerate(np.asarray(indices)):
            try:
                out[j] = float(self.fn(self.ds.subset(row), self.pi_e, self.pi_b))
            except (HcopeError, ArithmeticError, ValueError):
                out[j] = np.nan
        return out
