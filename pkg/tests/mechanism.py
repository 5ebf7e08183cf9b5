"""Desk-scale training run and paired mechanism statistics shared by the slow tests."""
from dataclasses import replace

import numpy as np

from freqdiff.data import DatasetSpec, encode, generate_dataset, labels_of, split_indices, token_of
from freqdiff.diffusion import SamplerConfig
from freqdiff.filters import band_consistency, make_mask
from freqdiff.training import TrainConfig, mean_color_distance, pixel_correlation, pretrain, train_branch, translate

SPEC = DatasetSpec(num_images=512)
CONFIG = TrainConfig(steps=2000, batch_size=8, lr=1e-3, seed=0, model_seed=0)
SAMPLER = SamplerConfig(num_steps=50, clip_denoised=True)
BRANCHES = ("low", "mini")
N_EVAL = 32
EVAL_SEEDS = list(range(100, 100 + N_EVAL))


def load_data(spec=SPEC):
    images, tokens = generate_dataset(spec)
    train, held = split_indices(len(images))
    return images, tokens, train, held


def train_all(cfg=CONFIG, spec=SPEC):
    """Pretrain, then each branch on the frozen base. Returns params and the loss logs."""
    images, tokens, train, _ = load_data(spec)
    data = (encode(images[train]), tokens[train])
    base, rep = pretrain(cfg, data, vocab=spec.vocab)
    losses = {"pretrain": rep.losses}
    params = base
    for kind in BRANCHES:
        params, rep = train_branch(replace(cfg, stage=kind), params, data)
        losses[kind] = rep.losses
    return base, params, losses


def shifted_shape_targets(spec, tokens):
    """Same palette, next shape label: a target that asks for new structure only."""
    out = []
    for t in tokens:
        p, s = labels_of(spec, t)
        out.append(token_of(spec, p, (s + 1) % len(spec.shapes)))
    return np.array(out)


def mechanism(params, spec=SPEC):
    """Paired statistics over the first 32 held-out sources."""
    images, tokens, _, held = load_data(spec)
    idx = held[:N_EVAL]
    src, own = images[idx], tokens[idx]
    zs = encode(src)
    low = make_mask("low", *zs.shape[1:3])

    controlled = translate(params, src, own, "low", SAMPLER, CONFIG.schedule, EVAL_SEEDS)
    free = translate(params, src, own, None, SAMPLER, CONFIG.schedule, EVAL_SEEDS)
    bc_ctrl = band_consistency(zs, encode(controlled), low)
    bc_free = band_consistency(zs, encode(free), low)

    target = shifted_shape_targets(spec, own)
    shuffled = translate(params, src, target, "mini", SAMPLER, CONFIG.schedule, EVAL_SEEDS, shuffle=True)
    plain = translate(params, src, target, "mini", SAMPLER, CONFIG.schedule, EVAL_SEEDS)
    free_t = translate(params, src, target, None, SAMPLER, CONFIG.schedule, EVAL_SEEDS)
    color_shuf = np.array([mean_color_distance(a, b) for a, b in zip(shuffled, src)])
    color_free = np.array([mean_color_distance(a, b) for a, b in zip(free_t, src)])
    corr_shuf = np.array([pixel_correlation(a, b) for a, b in zip(shuffled, src)])
    corr_plain = np.array([pixel_correlation(a, b) for a, b in zip(plain, src)])
    return {
        "bc_ctrl": bc_ctrl, "bc_free": bc_free,
        "color_shuf": color_shuf, "color_free": color_free,
        "corr_shuf": corr_shuf, "corr_plain": corr_plain,
        "outputs": {"low": controlled, "free": free, "shuffled": shuffled, "plain": plain},
    }
