"""Two-stage training (base denoiser, then frozen-base control branches),
translation, and desk-scale evaluation."""
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .control_net import init_params, load_checkpoint, loss_and_grads
from .data import PALETTES, DatasetSpec, decode, encode, generate, labels_of
from .diffusion import ddim_sample, make_schedule
from .exceptions import BranchError, DataError, NumericFailure, StateError
from .filters import apply_mask, band_consistency, ffm, make_mask
from .spectral import dct2

__all__ = [
    "TrainConfig",
    "TrainReport",
    "Adam",
    "pretrain",
    "train_branch",
    "translate",
    "translate_latent",
    "pixel_correlation",
    "mean_color_distance",
    "high_band_share",
    "evaluate",
]


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    model_seed: int = 0
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    widths: tuple = (32, 64)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def schedule(self):
        return make_schedule(self.T, self.beta_min, self.beta_max)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str = None

    @property
    def first_loss(self):
        return self.losses[0]

    @property
    def final_loss(self):
        return self.losses[-1]

    def write_log(self, path):
        with open(path, "w") as fh:
            for step, loss in enumerate(self.losses, start=1):
                fh.write(f"{step}\t{float(loss)!r}\n")


class Adam:
    """Adaptive-moment updates with bias correction, applied in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, names):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in names:
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            params[name] -= update.astype(params[name].dtype)


def _check_dataset(dataset):
    latents, tokens = dataset
    latents = np.asarray(latents, dtype=np.float32)
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(latents) == 0:
        raise DataError("dataset is empty")
    if len(latents) != len(tokens):
        raise DataError(f"{len(latents)} latents but {len(tokens)} tokens")
    return latents, tokens


def _run(cfg, params, latents, tokens, names, branch=None, controls=None, log=None):
    sched = cfg.schedule
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    report = TrainReport()
    n = len(latents)
    started = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batch_seed = [cfg.seed, step]
        rng = np.random.default_rng(batch_seed)
        idx = rng.integers(0, n, cfg.batch_size)
        t = rng.integers(1, sched.T + 1, cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size,) + latents.shape[1:], dtype=np.float32)
        batch = (latents[idx], tokens[idx], t, eps)
        control = None if controls is None else controls[idx]
        loss, grads = loss_and_grads(params, batch, sched, branch=branch, trainable=names, control=control)
        if not np.isfinite(loss):
            raise NumericFailure("non-finite training loss", step=step, batch_seed=batch_seed)
        opt.step(params, grads, names)
        report.losses.append(loss)
        if log is not None:
            log(step, loss)
    report.wall_time = time.perf_counter() - started
    return report


def pretrain(cfg, dataset, vocab=None, params=None, log=None):
    """Fit the base denoiser and embeddings on ``(latents, tokens)``.

    Returns ``(params, report)``; the result depends only on ``cfg`` and the data.
    """
    latents, tokens = _check_dataset(dataset)
    if params is None:
        vocab = int(tokens.max()) + 1 if vocab is None else vocab
        params = init_params(cfg.model_seed, c=latents.shape[-1], V=vocab, widths=cfg.widths)
    else:
        params = params.copy()
    names = params.group("base")
    report = _run(cfg, params, latents, tokens, names, log=log)
    return params, report


def train_branch(cfg, base, dataset, log=None):
    """Train the control branch named by ``cfg.stage`` on top of a frozen base.

    ``base`` is a :class:`ModelParams` or a checkpoint path. Only the branch's
    own encoder copy, hint convolution and zero convolutions change.
    """
    if base is None:
        raise StateError("branch training needs a pretrained base checkpoint")
    if isinstance(base, (str, bytes)) or hasattr(base, "__fspath__"):
        try:
            base = load_checkpoint(base)
        except FileNotFoundError:
            raise StateError(f"base checkpoint {base!r} does not exist") from None
    kind = cfg.stage
    if kind == "pretrain":
        raise ValueError("train_branch needs cfg.stage set to a band name")
    latents, tokens = _check_dataset(dataset)
    params = base.copy()
    if not params.has_branch(kind):
        params.attach_branch(kind, seed=cfg.model_seed)
    mask = _branch_mask(kind, latents.shape[1], latents.shape[2])
    controls = ffm(latents, mask)
    report = _run(cfg, params, latents, tokens, params.group(kind), branch=kind,
                  controls=controls, log=log)
    return params, report


def _branch_mask(kind, h, w):
    if kind.startswith("custom:"):
        _, lo, hi = kind.split(":")
        return make_mask("custom", h, w, int(lo), int(hi))
    return make_mask(kind, h, w)


def translate_latent(params, source, token, branch=None, sampler=None, sched=None, seed=0,
                     shuffle=False, allow_shuffle=False, shared_channels=False):
    """Latent-space translation; see :func:`translate`."""
    source = np.asarray(source)
    single = source.ndim == 3
    if single:
        source = source[None]
    n = len(source)
    seeds = [int(seed)] * n if np.ndim(seed) == 0 else [int(s) for s in seed]
    tokens = np.broadcast_to(np.asarray(token, dtype=np.int64), (n,))
    if np.any(tokens < 0) or np.any(tokens >= params.vocab):
        raise ValueError(f"target token out of range 0..{params.vocab - 1}")
    z0 = encode(source)
    sched = sched or make_schedule()
    if branch is None:
        if shuffle:
            raise ValueError("shuffle needs a control branch")
        z = ddim_sample(params, tokens, cfg=sampler, sched=sched, seed=seeds, shape=z0.shape)
    else:
        if not params.has_branch(branch):
            raise BranchError(f"branch {branch!r} is not attached")
        if shuffle and branch != "mini" and not allow_shuffle:
            raise ValueError("equifrequency shuffle is only defined for the mini branch "
                             "(pass allow_shuffle to override)")
        mask = _branch_mask(branch, z0.shape[1], z0.shape[2])
        if shuffle:
            C = np.stack([ffm(z0[i], mask, shuffle_seed=seeds[i], shared_channels=shared_channels)
                          for i in range(n)])
        else:
            C = ffm(z0, mask)
        z = ddim_sample(params, tokens, control=C, branch=branch, cfg=sampler, sched=sched, seed=seeds)
    return z[0] if single else z


def translate(params, source, token, branch=None, sampler=None, sched=None, seed=0,
              shuffle=False, allow_shuffle=False, shared_channels=False):
    """Translate source image(s) toward ``token`` under the control of ``branch``.

    The source is encoded, band-limited with the branch mask (optionally
    equifrequency-shuffled with ``seed``, mini branch only unless
    ``allow_shuffle``), and the controlled sampler is run from noise seeded
    by ``seed``. With ``branch=None`` the source is ignored apart from its
    shape and an uncontrolled sample is drawn. ``seed`` may be one int per
    image.
    """
    z = translate_latent(params, source, token, branch, sampler, sched, seed,
                         shuffle, allow_shuffle, shared_channels)
    return decode(z)


def pixel_correlation(a, b):
    """Pearson correlation of two images over all pixels and channels."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    return 0.0 if den == 0 else float(np.dot(a, b) / den)


def mean_color_distance(a, b):
    """Euclidean distance between the mean RGB vectors of two images."""
    ma = np.asarray(a, dtype=np.float64).reshape(-1, 3).mean(axis=0)
    mb = np.asarray(b, dtype=np.float64).reshape(-1, 3).mean(axis=0)
    return float(np.linalg.norm(ma - mb))


def high_band_share(image):
    """Fraction of the non-mini spectral energy of ``encode(image)`` in the high band."""
    z = encode(image)
    F = np.square(dct2(z, dtype=np.float64))
    h, w = z.shape[-3:-1]
    high = apply_mask(F, make_mask("high", h, w)).sum(axis=(-3, -2, -1))
    rest = F.sum(axis=(-3, -2, -1)) - apply_mask(F, make_mask("mini", h, w)).sum(axis=(-3, -2, -1))
    return np.where(rest > 0, high / np.where(rest > 0, rest, 1), 0.0)


def _label_references(spec, n=64):
    """Per-palette mean colors and per-shape high-band shares from the generator."""
    palette_colors = np.array(
        [np.mean(PALETTES[name], axis=0) for name in spec.palettes], dtype=np.float64
    )
    ref_spec = replace(spec, num_images=n, seed=spec.seed + 7919)
    images, tokens = zip(*(generate(ref_spec, i) for i in range(n)))
    shares = high_band_share(np.stack(images))
    shape_ids = np.array([labels_of(spec, t)[1] for t in tokens])
    shape_refs = np.array([
        shares[shape_ids == s].mean() if np.any(shape_ids == s) else np.inf
        for s in range(len(spec.shapes))
    ])
    return palette_colors, shape_refs


def evaluate(params, sources, targets, branch, sampler=None, sched=None, seed=0, spec=None,
             shuffle=False):
    """Band-consistency and label-agreement statistics of branch translations.

    Returns a dict mapping metric name to ``(mean, std)``.
    """
    sources = np.asarray(sources)
    if sources.ndim == 3:
        sources = sources[None]
    if len(sources) == 0:
        raise DataError("evaluation set is empty")
    if not params.has_branch(branch):
        raise BranchError(f"branch {branch!r} is not attached")
    spec = spec or DatasetSpec()
    n = len(sources)
    seeds = [int(seed) + i for i in range(n)] if np.ndim(seed) == 0 else list(seed)
    outputs = translate(params, sources, targets, branch, sampler, sched, seeds, shuffle=shuffle)
    zs, zo = encode(sources), encode(outputs)
    mask = _branch_mask(branch, zs.shape[1], zs.shape[2])
    metrics = {
        "band_consistency": band_consistency(zs, zo, mask),
        "complement_consistency": band_consistency(zs, zo, mask.complement()),
    }
    palette_colors, shape_refs = _label_references(spec)
    means = outputs.reshape(n, -1, 3).mean(axis=1)
    pal_pred = np.argmin(((means[:, None, :] - palette_colors[None]) ** 2).sum(-1), axis=1)
    shape_pred = np.argmin(np.abs(high_band_share(outputs)[:, None] - shape_refs[None]), axis=1)
    labels = np.array([labels_of(spec, t) for t in np.broadcast_to(targets, (n,))])
    metrics["palette_agreement"] = (pal_pred == labels[:, 0]).astype(float)
    metrics["shape_agreement"] = (shape_pred == labels[:, 1]).astype(float)
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in metrics.items()}
