"""Orthonormal DCT-II / DCT-III along the time axis."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def _dct_matrix_cached(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * t + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    c.setflags(write=False)
    return c


def dct_matrix(n: int) -> np.ndarray:
    """Row k holds the k-th orthonormal cosine basis vector of length n."""
    if n < 1:
        raise ValueError("DCT length must be >= 1")
    return _dct_matrix_cached(int(n))


def dct_forward(signal) -> np.ndarray:
    """Bands of a (T, d) signal; band 0 is the DC component."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("cannot transform an empty signal")
    if x.ndim == 1:
        return dct_matrix(x.shape[0]) @ x
    return np.tensordot(dct_matrix(x.shape[0]), x, axes=(1, 0))


def dct_inverse(spectrum) -> np.ndarray:
    s = np.asarray(spectrum, dtype=np.float64)
    if s.size == 0 or s.shape[0] == 0:
        raise ValueError("cannot invert an empty spectrum")
    if s.ndim == 1:
        return dct_matrix(s.shape[0]).T @ s
    return np.tensordot(dct_matrix(s.shape[0]).T, s, axes=(1, 0))
