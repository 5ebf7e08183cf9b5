"""Quick invariant checks runnable without pytest (``freqdiff selftest``)."""
import math

import numpy as np

from .control_net import forward_base, forward_controlled, init_params, loss_and_grads
from .diffusion import make_schedule
from .filters import NAMED_BANDS, band_energy_profile, equifrequency_shuffle, frequency_levels, make_mask
from .spectral import dct2, dct_matrix, idct2


def _dct_double_sum(x):
    h, w = x.shape
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    out = np.empty((h, w))
    for u in range(h):
        for v in range(w):
            mu = 1 / math.sqrt(2) if u == 0 else 1.0
            mv = 1 / math.sqrt(2) if v == 0 else 1.0
            basis = np.cos((2 * i + 1) * u * np.pi / (2 * h)) * np.cos((2 * j + 1) * v * np.pi / (2 * w))
            out[u, v] = 2 / math.sqrt(h * w) * mu * mv * np.sum(x * basis)
    return out


def transform_suite(rng):
    x = rng.standard_normal((64, 64, 4)).astype(np.float32)
    F = dct2(x)
    rt = float(np.abs(idct2(F) - x).max())
    e = float(np.sum(x.astype(np.float64) ** 2))
    parseval = abs(float(np.sum(F.astype(np.float64) ** 2)) - e) / e
    small = rng.standard_normal((16, 16))
    brute = float(np.abs(dct2(small[..., None], dtype=np.float64)[..., 0] - _dct_double_sum(small)).max())
    ortho = float(np.abs(dct_matrix(64).basis @ dct_matrix(64).basis.T - np.eye(64)).max())
    return [
        ("dct round trip < 1e-5", rt < 1e-5),
        ("parseval < 1e-6", parseval < 1e-6),
        ("separable == double sum < 1e-4", brute < 1e-4),
        ("basis orthonormal < 1e-5", ortho < 1e-5),
    ]


def mask_suite(rng):
    lv = frequency_levels(64, 64)
    mini, low, mid, high = (make_mask(k, 64, 64).bits.astype(bool) for k in NAMED_BANDS)
    exact = (
        np.array_equal(mini, lv <= 10) and np.array_equal(low, lv <= 20)
        and np.array_equal(mid, (lv > 20) & (lv <= 40)) and np.array_equal(high, lv >= 50)
    )
    gap = (lv >= 41) & (lv <= 49)
    return [
        ("named masks match thresholds", exact),
        ("gap levels 41-49 empty", not (mini | low | mid | high)[gap].any()),
        ("mini within low", not (mini & ~low).any()),
        ("mid, high disjoint from low", not ((mid | high) & low).any() and not (high & mid).any()),
    ]


def shuffle_suite(rng):
    F = rng.standard_normal((16, 16, 12)).astype(np.float32)
    lv = frequency_levels(16, 16)
    ok_sets = ok_energy = ok_dc = True
    before = band_energy_profile(F)
    for seed in range(10):
        out = equifrequency_shuffle(F, seed)
        ok_dc &= bool(np.array_equal(out[0, 0], F[0, 0]))
        ok_energy &= band_energy_profile(out) == before
        for level in range(31):
            sel = lv == level
            ok_sets &= bool(np.array_equal(np.sort(out[sel], axis=0), np.sort(F[sel], axis=0)))
    same = np.array_equal(equifrequency_shuffle(F, 3), equifrequency_shuffle(F, 3))
    return [
        ("per-level multisets preserved", ok_sets),
        ("per-level energy preserved", ok_energy),
        ("dc fixed", ok_dc),
        ("seed determinism", bool(same)),
    ]


def _live(seed, rng):
    # the head starts at zero, which would make both checks vacuous
    p = init_params(seed)
    k = p["base.head.kernel"]
    p["base.head.kernel"] = (rng.standard_normal(k.shape) * np.sqrt(2 / 288)).astype(k.dtype)
    return p.attach_branch("low", seed=seed)


def model_suite(rng):
    p = _live(0, rng)
    z = rng.standard_normal((2, 16, 16, 12)).astype(np.float32)
    C = rng.standard_normal(z.shape).astype(np.float32)
    nontrivial = bool(forward_base(p, z, [5, 700], [0, 3]).any())
    same = nontrivial and np.array_equal(forward_controlled(p, "low", z, [5, 700], [0, 3], C), forward_base(p, z, [5, 700], [0, 3]))

    q = _live(1, rng).astype(np.float64)
    for k in q.group("low"):
        if ".zero" in k:
            q[k] = 0.1 * rng.standard_normal(q[k].shape)
    sched = make_schedule()
    batch = (rng.uniform(-1, 1, (2, 8, 8, 12)), np.array([1, 2]), np.array([40, 600]),
             rng.standard_normal((2, 8, 8, 12)))
    names = list(q)
    _, grads = loss_and_grads(q, batch, sched, branch="low", trainable=names)
    worst = 0.0
    for name in names[::3]:
        idx = tuple(int(rng.integers(s)) for s in q[name].shape)
        if name == "embed.cond.table":
            idx = (1, idx[1])
        old = q[name][idx]
        q[name][idx] = old + 1e-6
        lp = loss_and_grads(q, batch, sched, branch="low", trainable=[])[0]
        q[name][idx] = old - 1e-6
        lm = loss_and_grads(q, batch, sched, branch="low", trainable=[])[0]
        q[name][idx] = old
        g = grads[name][idx]
        worst = max(worst, abs(g - (lp - lm) / 2e-6) / max(1e-6, abs(g)))
    return [
        ("zero-init branch equals base", bool(same)),
        ("gradients match finite differences", worst < 1e-3),
    ]


SUITES = {
    "transform": transform_suite,
    "mask": mask_suite,
    "shuffle": shuffle_suite,
    "model": model_suite,
}


def run(seed=0):
    """Run every suite; returns ``[(suite, check, passed), ...]``."""
    rng = np.random.default_rng(seed)
    return [(suite, name, bool(ok)) for suite, fn in SUITES.items() for name, ok in fn(rng)]
