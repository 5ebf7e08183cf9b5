"""DCT-domain band masks, the filtering pipeline, and the equifrequency shuffle.

Bands are selected by frequency level ``u + v`` (anti-diagonals of the DCT
grid). The four named bands are defined by integer cutoffs on a 64x64 grid;
on other grid sizes the same cutoffs are applied to the normalized level
``(u + v) / (h + w - 2)`` with anchors ``10/126``, ``20/126``, ``40/126`` and
``50/126``. Comparisons are done in integer arithmetic so the 64x64 case
reproduces the integer thresholds exactly.
"""
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .exceptions import NumericInputError, ShapeError, UndefinedMetricError
from .spectral import dct2, idct2

__all__ = [
    "NAMED_BANDS",
    "BandMask",
    "frequency_levels",
    "normalized_level",
    "parse_band",
    "make_mask",
    "apply_mask",
    "equifrequency_shuffle",
    "ffm",
    "band_energy_profile",
    "band_consistency",
]

NAMED_BANDS = ("mini", "low", "mid", "high")

# cutoffs expressed on the 64x64 grid, whose maximum level is 126
_ANCHOR = 126
_MINI, _LOW, _MID, _HIGH = 10, 20, 40, 50


@dataclass(frozen=True)
class BandMask:
    kind: str
    h: int
    w: int
    bits: np.ndarray = field(repr=False, compare=False)
    lo: int = None
    hi: int = None

    def __post_init__(self):
        self.bits.setflags(write=False)

    @property
    def name(self):
        if self.kind == "custom":
            return f"custom:{self.lo}:{self.hi}"
        return self.kind

    def complement(self):
        """Mask selecting every coefficient this one drops."""
        return BandMask("complement", self.h, self.w, (1 - self.bits).astype(np.uint8))


@lru_cache(maxsize=32)
def _levels(h, w):
    grid = np.add.outer(np.arange(h), np.arange(w))
    grid.setflags(write=False)
    return grid


def frequency_levels(h, w):
    """Integer level ``u + v`` for every cell of an ``h x w`` DCT grid."""
    return _levels(int(h), int(w))


def normalized_level(u, v, h, w):
    """``(u + v) / (h + w - 2)``, taken as 0 on a 1x1 grid."""
    top = h + w - 2
    return 0.0 if top == 0 else (u + v) / top


def parse_band(text):
    """Turn a band name such as ``"low"``, ``"full"`` or ``"custom:3:9"`` into make_mask arguments."""
    text = text.strip().lower()
    if text.startswith("custom:"):
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"custom band must look like custom:LO:HI, got {text!r}")
        return ("custom", int(parts[1]), int(parts[2]))
    return text


def make_mask(kind, h, w, lo=None, hi=None):
    """Build a binary band mask.

    ``kind`` is one of ``mini``, ``low``, ``mid``, ``high``, ``full`` or
    ``custom`` (with inclusive level bounds ``lo``/``hi``). A tuple
    ``("custom", lo, hi)`` is also accepted.
    """
    if isinstance(kind, tuple):
        kind, lo, hi = kind
    if h < 1 or w < 1:
        raise ShapeError(f"mask shape must be positive, got {h}x{w}")
    level = frequency_levels(h, w)
    top = h + w - 2
    if kind == "full":
        kind, lo, hi = "custom", 0, top
    if kind == "custom":
        if lo is None or hi is None:
            raise ValueError("custom band requires lo and hi levels")
        if lo > hi:
            raise ValueError(f"custom band has lo={lo} > hi={hi}")
        bits = (level >= lo) & (level <= hi)
        return BandMask("custom", h, w, bits.astype(np.uint8), int(lo), int(hi))

    # level / top <= c / 126  <=>  level * 126 <= c * top
    scaled = level * _ANCHOR
    if top == 0:
        scaled = np.zeros_like(level)
        top = 1
    if kind == "mini":
        bits = scaled <= _MINI * top
    elif kind == "low":
        bits = scaled <= _LOW * top
    elif kind == "mid":
        bits = (scaled > _LOW * top) & (scaled <= _MID * top)
    elif kind == "high":
        bits = scaled >= _HIGH * top
    else:
        raise ValueError(f"unknown band kind {kind!r}")
    return BandMask(kind, h, w, bits.astype(np.uint8))


def _check_mask(F, mask):
    if F.ndim < 3 or F.shape[-3:-1] != mask.bits.shape:
        raise ShapeError(f"mask {mask.bits.shape} does not match tensor {F.shape}")


def apply_mask(F, mask):
    """Zero every coefficient outside ``mask`` (elementwise product per channel)."""
    F = np.asarray(F)
    _check_mask(F, mask)
    return F * mask.bits[:, :, None].astype(F.dtype)


@lru_cache(maxsize=32)
def _level_positions(h, w):
    # flat indices of each anti-diagonal, ordered by row
    flat = frequency_levels(h, w).ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(h + w))
    return tuple(order[bounds[k]:bounds[k + 1]] for k in range(h + w - 1))


def _level_permutation(h, w, seed, channel):
    """Position map for one channel: output cell ``i`` takes input cell ``idx[i]``."""
    idx = np.arange(h * w)
    for level, pos in enumerate(_level_positions(h, w)):
        if len(pos) < 2:
            continue
        key = [seed, level] if channel is None else [seed, channel, level]
        perm = np.random.default_rng(key).permutation(len(pos))
        idx[pos] = pos[perm]
    return idx


def equifrequency_shuffle(F, seed, shared_channels=False):
    """Permute DCT coefficients within each frequency level.

    Each (channel, level) pair gets its own permutation drawn from a stream
    keyed on ``(seed, channel, level)``; with ``shared_channels`` every
    channel uses the permutation keyed on ``(seed, level)``. The multiset of
    coefficients at every level is preserved exactly.
    """
    F = np.asarray(F)
    if F.ndim < 3:
        raise ShapeError(f"expected (..., h, w, c) array, got shape {F.shape}")
    if not np.all(np.isfinite(F)):
        raise NumericInputError("shuffle input contains non-finite values")
    if seed < 0:
        raise ValueError("shuffle seed must be non-negative")
    h, w, c = F.shape[-3:]
    lead = F.shape[:-3]
    flat = F.reshape(lead + (h * w, c))
    out = np.empty_like(flat)
    shared = _level_permutation(h, w, seed, None) if shared_channels else None
    for ch in range(c):
        idx = shared if shared_channels else _level_permutation(h, w, seed, ch)
        out[..., ch] = flat[..., idx, ch]
    return out.reshape(F.shape)


def ffm(z0, mask, shuffle_seed=None, shared_channels=False):
    """Band-limit a latent: ``idct2(shuffle?(apply_mask(dct2(z0), mask)))``.

    The output keeps the input's floating dtype.
    """
    z0 = np.asarray(z0)
    dtype = np.float64 if z0.dtype == np.float64 else np.float32
    F = apply_mask(dct2(z0, dtype=dtype), mask)
    if shuffle_seed is not None:
        F = equifrequency_shuffle(F, shuffle_seed, shared_channels=shared_channels)
    return idct2(F, dtype=dtype)


def band_energy_profile(F):
    """Per-level spectral energy as a list of ``(level, energy)`` pairs.

    Sums run over channels (and any leading batch axes). Each level's energy
    is an exactly rounded sum, so it does not depend on the order of the
    coefficients within the level.
    """
    F = np.asarray(F)
    if F.ndim < 3:
        raise ShapeError(f"expected (..., h, w, c) array, got shape {F.shape}")
    h, w, c = F.shape[-3:]
    sq = np.square(F.astype(np.float64)).reshape((-1, h * w, c))
    return [
        (level, math.fsum(sq[:, pos, :].ravel()))
        for level, pos in enumerate(_level_positions(h, w))
    ]


def band_consistency(x, y, mask):
    """``1 - |M*dct2(x) - M*dct2(y)| / |M*dct2(x)|`` with Frobenius norms.

    Batched inputs ``(n, h, w, c)`` give one value per item.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    fx = apply_mask(dct2(x), mask)
    fy = apply_mask(dct2(y), mask)
    ref = np.sqrt(np.sum(fx ** 2, axis=(-3, -2, -1)))
    diff = np.sqrt(np.sum((fx - fy) ** 2, axis=(-3, -2, -1)))
    if np.any(ref == 0):
        raise UndefinedMetricError("reference spectrum is zero inside the band")
    out = 1.0 - diff / ref
    return float(out) if out.ndim == 0 else out
