import numpy as np
import pytest

from freqdiff.diffusion import (
    NoiseSchedule,
    SamplerConfig,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    initial_noise,
    make_schedule,
    q_sample,
)
from freqdiff.exceptions import BranchError, ShapeError

# independent product loop over the linear betas, frozen
ALPHA_BAR_1000 = 4.0358297653756754e-05


def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    assert s.alpha_bar[1] == 0.5


def test_default_schedule():
    s = make_schedule()
    assert s.T == 1000
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[1000] < 0.05
    assert s.alpha_bar[1000] == pytest.approx(ALPHA_BAR_1000, rel=1e-9)
    assert s.beta[1] == 1e-4 and s.beta[1000] == pytest.approx(0.02, abs=1e-15)


@pytest.mark.parametrize("args", [(1000, 1e-4, 0.02), (200, 1e-3, 0.05), (7, 0.1, 0.9)])
def test_alpha_plus_beta_exactly_one(args):
    s = make_schedule(*args)
    assert np.all(s.alpha[1:] + s.beta[1:] == 1.0)
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_args(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_q_sample_zero_noise(rng):
    s = make_schedule()
    z0 = rng.standard_normal((4, 4, 2)).astype(np.float32)
    out = q_sample(z0, 300, np.zeros_like(z0), s)
    np.testing.assert_allclose(out, np.sqrt(s.alpha_bar[300]) * z0, rtol=1e-6)


def test_q_sample_no_noise_limit(rng):
    ones = np.ones(3)
    s = NoiseSchedule(2, np.zeros(3), ones, ones)
    z0 = rng.standard_normal((4, 4, 2))
    assert np.array_equal(q_sample(z0, 2, rng.standard_normal(z0.shape), s), z0)


def test_q_sample_variance_preserving():
    s = make_schedule()
    rng = np.random.default_rng(0)
    trials = 1000
    z0 = rng.standard_normal((trials, 8, 8, 3))
    eps = rng.standard_normal(z0.shape)
    for t in (1, 250, 700, 1000):
        zt = q_sample(z0, np.full(trials, t), eps, s)
        ratio = np.mean(np.sum(zt ** 2, axis=(1, 2, 3)) / zt[0].size)
        assert abs(ratio - 1) < 0.05


def test_q_sample_per_item_timesteps(rng):
    s = make_schedule()
    z0 = rng.standard_normal((3, 2, 2, 1))
    eps = rng.standard_normal(z0.shape)
    out = q_sample(z0, np.array([1, 50, 999]), eps, s)
    np.testing.assert_allclose(out[1], q_sample(z0[1], 50, eps[1], s))


def test_q_sample_errors(rng):
    s = make_schedule(10)
    z = np.zeros((2, 2, 1))
    with pytest.raises(IndexError):
        q_sample(z, 0, z, s)
    with pytest.raises(IndexError):
        q_sample(z, 11, z, s)
    with pytest.raises(ShapeError):
        q_sample(z, 1, np.zeros((2, 3, 1)), s)


def test_ddim_step_inverts_forward_for_all_t():
    s = make_schedule()
    rng = np.random.default_rng(3)
    z0 = rng.uniform(-1, 1, (8, 8, 4)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    worst = 0.0
    for t in range(1, 1001):
        zt = q_sample(z0, t, eps, s)
        worst = max(worst, np.abs(ddim_step(zt, t, 0, eps, s) - z0).max())
    assert worst < 1e-4


def test_ddim_step_exact_eps_within_1e5(rng):
    s = make_schedule()
    z0 = rng.uniform(-1, 1, (6, 6, 2)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    zt = q_sample(z0, 400, eps, s)
    assert np.abs(ddim_step(zt, 400, 0, eps, s) - z0).max() < 1e-5


def test_ddim_step_t1_formula(rng):
    s = make_schedule(1, 0.3, 0.3)
    z = rng.standard_normal((4, 4, 1))
    e = rng.standard_normal((4, 4, 1))
    expected = (z - np.sqrt(0.3) * e) / np.sqrt(0.7)
    np.testing.assert_allclose(ddim_step(z, 1, 0, e, s), expected, rtol=1e-14)


def test_ddim_step_intermediate_formula(rng):
    s = make_schedule()
    z = rng.standard_normal((4, 4, 1))
    e = rng.standard_normal((4, 4, 1))
    a, b = s.alpha_bar[500], s.alpha_bar[480]
    x0 = (z - np.sqrt(1 - a) * e) / np.sqrt(a)
    expected = np.sqrt(b) * x0 + np.sqrt(1 - b) * e
    np.testing.assert_allclose(ddim_step(z, 500, 480, e, s), expected, rtol=1e-12)
    out1 = ddim_step(z, 500, 480, e, s)
    assert np.array_equal(out1, ddim_step(z, 500, 480, e, s))


def test_ddim_step_stochastic(rng):
    s = make_schedule()
    z = rng.standard_normal((4, 4, 1))
    e = rng.standard_normal((4, 4, 1))
    det = ddim_step(z, 500, 480, e, s)
    sto = ddim_step(z, 500, 480, e, s, eta=1.0, rng=np.random.default_rng(0))
    assert not np.allclose(det, sto)
    with pytest.raises(ValueError):
        ddim_step(z, 500, 480, e, s, eta=1.0)


def test_ddim_step_ordering():
    s = make_schedule()
    z = np.zeros((2, 2, 1))
    for t, tp in ((5, 5), (5, 7), (5, -1)):
        with pytest.raises(ValueError):
            ddim_step(z, t, tp, z, s)


def test_ddim_step_clip(rng):
    s = make_schedule()
    z = 5 * rng.standard_normal((4, 4, 1))
    e = rng.standard_normal((4, 4, 1))
    out = ddim_step(z, 900, 0, e, s, clip=(-1, 1))
    assert out.max() <= 1 and out.min() >= -1


def test_timesteps():
    ts = ddim_timesteps(1000, 50)
    assert ts[0] == 1000 and ts[-1] == 20 and len(ts) == 50
    assert np.all(np.diff(ts) < 0)
    ts = ddim_timesteps(1000, 30)
    assert ts[0] == 990 and ts[-1] == 33
    assert ddim_timesteps(10, 10).tolist() == list(range(10, 0, -1))
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


def test_initial_noise_per_item_seeds():
    a = initial_noise((3, 2, 2, 1), [4, 5, 6])
    b = initial_noise((1, 2, 2, 1), [5])
    assert np.array_equal(a[1], b[0])
    with pytest.raises(ShapeError):
        initial_noise((3, 2, 2, 1), [1, 2])


class Counter:
    def __init__(self):
        self.calls = []

    def __call__(self, z, t):
        self.calls.append(int(t[0]))
        return 0.1 * z


def test_sample_calls_once_per_step():
    s = make_schedule()
    fn = Counter()
    ddim_sample(fn, [0], cfg=SamplerConfig(num_steps=1), sched=s, shape=(1, 4, 4, 2))
    assert fn.calls == [1000]
    fn = Counter()
    ddim_sample(fn, [0], cfg=SamplerConfig(num_steps=50), sched=s, shape=(1, 4, 4, 2))
    assert fn.calls == ddim_timesteps(1000, 50).tolist()


def test_sample_deterministic():
    s = make_schedule(200)
    a = ddim_sample(Counter(), [0, 1], sched=s, shape=(2, 4, 4, 2), seed=8)
    b = ddim_sample(Counter(), [0, 1], sched=s, shape=(2, 4, 4, 2), seed=8)
    c = ddim_sample(Counter(), [0, 1], sched=s, shape=(2, 4, 4, 2), seed=9)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sample_stochastic_reproducible():
    s = make_schedule(100)
    cfg = SamplerConfig(num_steps=10, eta=0.5)
    a = ddim_sample(Counter(), [0], cfg=cfg, sched=s, shape=(1, 4, 4, 2), seed=1)
    b = ddim_sample(Counter(), [0], cfg=cfg, sched=s, shape=(1, 4, 4, 2), seed=1)
    assert np.array_equal(a, b)


def test_sample_argument_errors():
    s = make_schedule(100)
    with pytest.raises(ShapeError):
        ddim_sample(Counter(), [0], sched=s)
    with pytest.raises(ShapeError):
        ddim_sample(Counter(), [0, 1, 2], sched=s, shape=(2, 4, 4, 1))
    with pytest.raises(BranchError):
        ddim_sample(Counter(), [0], control=np.zeros((4, 4, 1)), sched=s)
    with pytest.raises(ValueError):
        ddim_sample(Counter(), [0], cfg=SamplerConfig(num_steps=101), sched=s, shape=(1, 2, 2, 1))
