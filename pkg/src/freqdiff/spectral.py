"""Orthonormal 2-D DCT-II / DCT-III applied channel-wise to latent grids.

Tensors are channels-last: ``(..., h, w, c)``. The transform is separable,
``F = B_h @ x @ B_w.T`` per channel, using cached basis matrices.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import NumericInputError, ShapeError

__all__ = ["DctPlan", "dct_matrix", "dct2", "idct2"]


@dataclass(frozen=True)
class DctPlan:
    n: int
    basis: np.ndarray

    def __post_init__(self):
        self.basis.setflags(write=False)


@lru_cache(maxsize=64)
def _plan(n, dtype_name):
    i = np.arange(n, dtype=np.float64)
    u = i[:, None]
    basis = np.sqrt(2.0 / n) * np.cos((2.0 * i[None, :] + 1.0) * u * np.pi / (2.0 * n))
    basis[0, :] *= 1.0 / np.sqrt(2.0)
    return DctPlan(n, basis.astype(dtype_name))


def dct_matrix(n, dtype=np.float32):
    """Return the orthonormal DCT-II plan of length ``n``.

    Row ``u`` holds ``sqrt(2/n) * m(u) * cos((2i+1) u pi / 2n)`` with
    ``m(0) = 1/sqrt(2)`` and ``m(u) = 1`` otherwise.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ShapeError(f"DCT length must be a positive integer, got {n!r}")
    return _plan(int(n), np.dtype(dtype).name)


def _prepare(x, dtype):
    x = np.asarray(x)
    if x.ndim < 3:
        raise ShapeError(f"expected (..., h, w, c) array, got shape {x.shape}")
    if dtype is None:
        dtype = np.float64 if x.dtype == np.float64 else np.float32
    x = x.astype(dtype, copy=False)
    if not np.all(np.isfinite(x)):
        raise NumericInputError("transform input contains non-finite values")
    return x


def _apply(x, left, right):
    # move channels in front of the spatial axes so matmul sees stacked (h, w) matrices
    xc = np.moveaxis(x, -1, -3)
    out = left @ xc @ right
    return np.ascontiguousarray(np.moveaxis(out, -3, -1))


def dct2(x, dtype=None):
    """Channel-wise orthonormal 2-D DCT-II of a ``(..., h, w, c)`` array."""
    x = _prepare(x, dtype)
    h, w = x.shape[-3], x.shape[-2]
    bh = dct_matrix(h, x.dtype).basis
    bw = dct_matrix(w, x.dtype).basis
    return _apply(x, bh, bw.T)


def idct2(F, dtype=None):
    """Inverse of :func:`dct2` (orthonormal DCT-III per channel)."""
    F = _prepare(F, dtype)
    h, w = F.shape[-3], F.shape[-2]
    bh = dct_matrix(h, F.dtype).basis
    bw = dct_matrix(w, F.dtype).basis
    return _apply(F, bh.T, bw)
