"""Independent reference implementations used only by the tests."""
import math

import numpy as np


def dct2_bruteforce(x):
    """Literal double-sum DCT-II with the 2/sqrt(hw) m(u) m(v) normalization."""
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    out = np.zeros((h, w, c))

    def m(k):
        return 1 / math.sqrt(2) if k == 0 else 1.0

    for n in range(c):
        for u in range(h):
            for v in range(w):
                s = 0.0
                for i in range(h):
                    for j in range(w):
                        s += x[i, j, n] * math.cos((2 * i + 1) * u * math.pi / (2 * h)) * math.cos(
                            (2 * j + 1) * v * math.pi / (2 * w)
                        )
                out[u, v, n] = 2 / math.sqrt(h * w) * m(u) * m(v) * s
    return out


def dct_basis_summation(n):
    """1-D orthonormal DCT-II matrix, entry by entry."""
    b = np.zeros((n, n))
    for u in range(n):
        for i in range(n):
            scale = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
            b[u, i] = scale * math.cos((2 * i + 1) * u * math.pi / (2 * n))
    return b


def level_groups(F):
    """{level: sorted list of coefficients} per channel, by direct enumeration."""
    h, w, c = F.shape
    groups = {}
    for n in range(c):
        for u in range(h):
            for v in range(w):
                groups.setdefault((n, u + v), []).append(float(F[u, v, n]))
    return {k: sorted(v) for k, v in groups.items()}


def reference_mask(kind, u, v):
    s = u + v
    return {
        "mini": s <= 10,
        "low": s <= 20,
        "mid": 20 < s <= 40,
        "high": s >= 50,
    }[kind]
