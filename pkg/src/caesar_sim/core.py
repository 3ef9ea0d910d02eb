"""Flat parameter vectors, magnitude selection and seeded randomness.

Every model and gradient in the simulator is a 1-D float32 numpy array with
layers flattened in declaration order. Selection helpers break magnitude ties
by lower index so that the codecs are reproducible run to run.
"""

from __future__ import annotations

from typing import Union

import numpy as np

PARAM_DTYPE = np.float32

SeedLike = Union[int, np.random.SeedSequence]


class UsageError(ValueError):
    """A precondition of an operation was violated by the caller."""


class ProtocolError(RuntimeError):
    """A message cannot be processed in the current protocol state."""


def as_param_vector(values, copy: bool = False) -> np.ndarray:
    """Coerce ``values`` to a finite, 1-D float32 array."""
    v = np.array(values, dtype=PARAM_DTYPE) if copy else np.asarray(values, dtype=PARAM_DTYPE)
    if v.ndim != 1:
        raise UsageError(f"parameter vector must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise UsageError("parameter vector contains NaN or Inf")
    return v


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    d = a - b
    return float(np.dot(d, d) / a.size)


def _check_k(v: np.ndarray, k: int) -> None:
    if k < 0 or k > v.size:
        raise UsageError(f"k={k} outside [0, {v.size}]")


def k_smallest_abs_indices(v, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest ``|v|``, ties to the lower index, sorted ascending."""
    v = np.asarray(v)
    _check_k(v, k)
    order = np.argsort(np.abs(v), kind="stable")
    return np.sort(order[:k])


def k_largest_abs_indices(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest ``|v|``, ties to the lower index, sorted ascending."""
    v = np.asarray(v)
    _check_k(v, k)
    # negating keeps the stable sort's lower-index preference among equal magnitudes
    order = np.argsort(-np.abs(v.astype(np.float64)), kind="stable")
    return np.sort(order[:k])


def make_rng(seed: SeedLike, *keys: int) -> np.random.Generator:
    """PCG64 generator for the stream named by ``(seed, *keys)``.

    Streams with different keys are statistically independent, and the same
    key path always yields the same draws on every platform.
    """
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy
        spawn_key = tuple(seed.spawn_key) + tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(entropy, spawn_key=spawn_key)
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
