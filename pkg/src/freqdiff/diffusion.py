"""DDPM forward process, linear noise schedule, and the DDIM reverse sampler."""
from dataclasses import dataclass, field

import numpy as np

from .exceptions import BranchError, ShapeError

__all__ = [
    "NoiseSchedule",
    "SamplerConfig",
    "make_schedule",
    "q_sample",
    "ddim_timesteps",
    "ddim_step",
    "initial_noise",
    "ddim_sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Schedule tables indexed by timestep ``t`` in ``0..T``.

    Index 0 is the clean state (``beta = 0``, ``alpha_bar = 1``) so that a
    DDIM jump to ``t_prev = 0`` needs no special casing in the tables.
    """

    T: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"timestep out of range 1..{self.T}: {t}")
        return t


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    eta: float = 0.0
    clip_denoised: bool = False

    def validate(self, T):
        if not 1 <= self.num_steps <= T:
            raise ValueError(f"num_steps must lie in 1..{T}, got {self.num_steps}")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


def make_schedule(T=1000, beta_min=1e-4, beta_max=0.02):
    """Linear beta schedule over ``t = 1..T`` with running-product ``alpha_bar``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if T == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def q_sample(z0, t, eps, sched):
    """Noise a clean latent: ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` is a scalar or one timestep per leading batch item.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {z0.shape} and eps {eps.shape} differ")
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    dtype = z0.dtype if np.issubdtype(z0.dtype, np.floating) else np.float32
    a = np.sqrt(ab).astype(dtype)
    b = np.sqrt(1.0 - ab).astype(dtype)
    return a * z0.astype(dtype) + b * eps.astype(dtype)


def ddim_timesteps(T, num_steps):
    """Descending uniform-stride subsequence ``stride*k`` for ``k = num_steps..1``."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in 1..{T}")
    stride = T // num_steps
    return stride * np.arange(num_steps, 0, -1)


def ddim_step(z_t, t, t_prev, eps_hat, sched, eta=0.0, rng=None, clip=None):
    """One DDIM update from ``t`` to ``t_prev`` (``t_prev = 0`` returns the clean estimate).

    ``clip=(lo, hi)`` clamps the clean estimate to the data range; the
    noise direction is then re-derived from the clamped estimate so the
    step stays on the forward-process manifold.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z_t = np.asarray(z_t)
    eps_hat = np.asarray(eps_hat)
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"z_t {z_t.shape} and eps_hat {eps_hat.shape} differ")
    sched.check_t(t)
    dtype = z_t.dtype
    ab = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    z0_hat = (z_t - dtype.type(np.sqrt(1.0 - ab)) * eps_hat) / dtype.type(np.sqrt(ab))
    if clip is not None:
        z0_hat = np.clip(z0_hat, clip[0], clip[1])
        eps_hat = (z_t - dtype.type(np.sqrt(ab)) * z0_hat) / dtype.type(np.sqrt(1.0 - ab))
    if t_prev == 0:
        return z0_hat
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
    out = dtype.type(np.sqrt(ab_prev)) * z0_hat
    out = out + dtype.type(np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))) * eps_hat
    if sigma > 0:
        if rng is None:
            raise ValueError("eta > 0 needs a random generator")
        out = out + dtype.type(sigma) * rng.standard_normal(z_t.shape).astype(dtype)
    return out


def initial_noise(shape, seed, dtype=np.float32):
    """Standard-normal start ``z_T``.

    ``seed`` may be one int for the whole batch or one int per batch item,
    in which case each item's noise depends only on its own seed.
    """
    if np.ndim(seed) == 0:
        return np.random.default_rng(int(seed)).standard_normal(shape).astype(dtype)
    seeds = list(seed)
    if len(seeds) != shape[0]:
        raise ShapeError(f"{len(seeds)} seeds for batch of {shape[0]}")
    return np.stack(
        [np.random.default_rng(int(s)).standard_normal(shape[1:]) for s in seeds]
    ).astype(dtype)


def ddim_sample(model, cond, control=None, branch=None, cfg=None, sched=None, seed=0, shape=None):
    """Run the DDIM reverse process from seeded noise down to ``t = 0``.

    ``model`` is either a :class:`~freqdiff.control_net.ModelParams` or a
    callable ``eps_fn(z_t, t_vector)``. ``cond`` holds one token per batch
    item. With ``control`` given, the controlled denoiser of ``branch`` is
    used at every step.
    """
    cfg = cfg or SamplerConfig()
    sched = sched or make_schedule()
    cfg.validate(sched.T)
    cond = np.atleast_1d(np.asarray(cond))
    if control is not None:
        control = np.asarray(control, dtype=np.float32)
        if control.ndim == 3:
            control = control[None]
        if branch is None:
            raise BranchError("a control signal needs a branch name")
        shape = control.shape
    if shape is None:
        raise ShapeError("latent shape is required when no control signal is given")
    if len(cond) != shape[0]:
        raise ShapeError(f"{len(cond)} tokens for batch of {shape[0]}")

    if callable(model):
        eps_fn = model
    else:
        if control is not None and not model.has_branch(branch):
            raise BranchError(f"branch {branch!r} is not attached")

        def eps_fn(z, tt):
            return model.eps(z, tt, cond, control=control, branch=branch)

    rng = np.random.default_rng(np.atleast_1d(seed).tolist() + [1]) if cfg.eta > 0 else None
    z = initial_noise(shape, seed)
    clip = (-1.0, 1.0) if cfg.clip_denoised else None
    steps = ddim_timesteps(sched.T, cfg.num_steps)
    for k, t in enumerate(steps):
        t_prev = int(steps[k + 1]) if k + 1 < len(steps) else 0
        eps_hat = eps_fn(z, np.full(shape[0], t))
        z = ddim_step(z, int(t), t_prev, eps_hat, sched, eta=cfg.eta, rng=rng, clip=clip)
    return z
