"""Command-line entry point: ``freqdiff <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Diagnostics go to stderr; data goes to files or stdout.
"""
import argparse
import logging
import os
import sys
import numpy as np

from . import selftest
from .control_net import load_checkpoint, save_checkpoint
from .data import (
    DatasetSpec, decode, encode, generate_dataset, labels_of, read_ppm, read_tensor,
    split_indices, write_ppm, write_tensor,
)
from .diffusion import SamplerConfig
from .exceptions import (
    BranchError, DataError, FormatError, NumericFailure, NumericInputError, ShapeError, StateError,
)
from .filters import apply_mask, band_energy_profile, ffm, make_mask, parse_band
from .spectral import dct2
from .training import TrainConfig, evaluate, pretrain, train_branch, translate

log = logging.getLogger("freqdiff")

# key -> (default, parser); README documents the same table
DEFAULTS = {
    "T": (1000, int),
    "beta_min": (1e-4, float),
    "beta_max": (0.02, float),
    "width1": (32, int),
    "width2": (64, int),
    "num_images": (512, int),
    "image_size": (32, int),
    "data_seed": (0, int),
    "steps": (2000, int),
    "batch_size": (8, int),
    "lr": (1e-3, float),
    "beta1": (0.9, float),
    "beta2": (0.999, float),
    "adam_eps": (1e-8, float),
    "seed": (0, int),
    "model_seed": (0, int),
    "sampling_steps": (50, int),
    "eta": (0.0, float),
    "clip_denoised": (True, "bool"),
    "shuffle_shared_channels": (False, "bool"),
    "allow_shuffle_any_branch": (False, "bool"),
}

SUBCOMMANDS = ("filter", "shuffle", "spectrum", "gen-data", "pretrain", "train-branch",
               "translate", "sample", "eval", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _coerce(key, text):
    if key not in DEFAULTS:
        raise UsageError(f"unknown config key {key!r}")
    kind = DEFAULTS[key][1]
    try:
        return _parse_bool(text) if kind == "bool" else kind(text.strip())
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text, source="<config>"):
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def resolve_config(path=None, overrides=(), flags=None):
    """Defaults < config file < ``--set`` overrides < dedicated flags."""
    cfg = {k: v for k, (v, _) in DEFAULTS.items()}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config_text(text, path))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _coerce(key.strip(), value)
    for key, value in (flags or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def _train_config(cfg, stage):
    return TrainConfig(
        stage=stage, steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], adam_eps=cfg["adam_eps"], seed=cfg["seed"],
        model_seed=cfg["model_seed"], T=cfg["T"], beta_min=cfg["beta_min"],
        beta_max=cfg["beta_max"], widths=(cfg["width1"], cfg["width2"]),
    )


def _sampler(cfg):
    return SamplerConfig(cfg["sampling_steps"], cfg["eta"], cfg["clip_denoised"])


def _dataset_spec(cfg):
    return DatasetSpec(num_images=cfg["num_images"], size=cfg["image_size"], seed=cfg["data_seed"])


# -- file helpers -------------------------------------------------------------

def _is_tensor_file(path):
    with open(path, "rb") as fh:
        return fh.read(4) == b"FCDT"


def _load_latent(path):
    """A latent ``(h, w, c)`` from an FCDT tensor or an encoded PPM image."""
    if _is_tensor_file(path):
        t = read_tensor(path)
        if t.ndim != 3:
            raise ShapeError(f"{path}: expected a rank-3 tensor, got rank {t.ndim}")
        return t
    return encode(read_ppm(path))


def _save_latent(path, z):
    if str(path).lower().endswith(".fcdt"):
        write_tensor(path, z)
    else:
        write_ppm(path, decode(z))


def _load_dataset_dir(path, spec):
    """Images and tokens listed in ``labels.tsv`` of a ``gen-data`` directory."""
    table = os.path.join(path, "labels.tsv")
    if not os.path.exists(table):
        raise DataError(f"{path} has no labels.tsv")
    images, tokens = [], []
    with open(table) as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno == 1 or not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise DataError(f"{table}:{lineno}: expected file<TAB>token")
            images.append(read_ppm(os.path.join(path, parts[0])))
            tokens.append(int(parts[1]))
    if not images:
        raise DataError(f"{path} lists no images")
    return np.stack(images), np.array(tokens, dtype=np.int64)


def _dataset(args, cfg):
    spec = _dataset_spec(cfg)
    if args.inp:
        return _load_dataset_dir(args.inp, spec)
    return generate_dataset(spec)


def _loss_writer(path):
    fh = open(path, "w") if path else sys.stdout

    def write(step, loss):
        fh.write(f"{step}\t{float(loss)!r}\n")

    return fh, write


# -- subcommands --------------------------------------------------------------

def cmd_filter(args, cfg):
    z = _load_latent(args.inp)
    mask = make_mask(parse_band(args.band), z.shape[0], z.shape[1])
    seed = args.seed if args.shuffle else None
    _save_latent(args.out, ffm(z, mask, seed, cfg["shuffle_shared_channels"]))


def cmd_shuffle(args, cfg):
    z = _load_latent(args.inp)
    mask = make_mask(parse_band(args.band or "full"), z.shape[0], z.shape[1])
    _save_latent(args.out, ffm(z, mask, args.seed, cfg["shuffle_shared_channels"]))


def cmd_spectrum(args, cfg):
    z = _load_latent(args.inp)
    F = dct2(z)
    if args.band:
        F = apply_mask(F, make_mask(parse_band(args.band), z.shape[0], z.shape[1]))
    out = open(args.out, "w") if args.out else sys.stdout
    for level, energy in band_energy_profile(F):
        out.write(f"{level}\t{energy!r}\n")
    if args.out:
        out.close()


def cmd_gen_data(args, cfg):
    spec = _dataset_spec(cfg)
    os.makedirs(args.out, exist_ok=True)
    images, tokens = generate_dataset(spec)
    held = set(split_indices(len(images))[1].tolist())
    with open(os.path.join(args.out, "labels.tsv"), "w") as fh:
        fh.write("file\ttoken\tpalette\tshape\tsplit\n")
        for i, (img, tok) in enumerate(zip(images, tokens)):
            name = f"{i:05d}.ppm"
            write_ppm(os.path.join(args.out, name), img)
            p, s = labels_of(spec, tok)
            split = "heldout" if i in held else "train"
            fh.write(f"{name}\t{tok}\t{spec.palettes[p]}\t{spec.shapes[s]}\t{split}\n")


def _training_data(args, cfg):
    images, tokens = _dataset(args, cfg)
    train, _ = split_indices(len(images))
    return encode(images[train]), tokens[train], _dataset_spec(cfg).vocab


def cmd_pretrain(args, cfg):
    latents, tokens, vocab = _training_data(args, cfg)
    fh, write = _loss_writer(args.log)
    try:
        params, report = pretrain(_train_config(cfg, "pretrain"), (latents, tokens),
                                  vocab=max(vocab, int(tokens.max()) + 1), log=write)
    finally:
        if args.log:
            fh.close()
    save_checkpoint(args.out, params)
    log.info("pretrain: %d steps in %.1fs, final loss %.5f", len(report.losses), report.wall_time,
             report.final_loss)


def cmd_train_branch(args, cfg):
    if not args.branch:
        raise UsageError("train-branch needs --branch")
    if not args.base:
        raise StateError("train-branch needs --base CHECKPOINT from a pretrain run")
    latents, tokens, _ = _training_data(args, cfg)
    fh, write = _loss_writer(args.log)
    try:
        params, report = train_branch(_train_config(cfg, _branch_name(args.branch)), args.base,
                                      (latents, tokens), log=write)
    finally:
        if args.log:
            fh.close()
    save_checkpoint(args.out, params)
    log.info("train-branch %s: %d steps in %.1fs, final loss %.5f", args.branch,
             len(report.losses), report.wall_time, report.final_loss)


def _branch_name(text):
    band = parse_band(text)
    if isinstance(band, tuple):
        return f"custom:{band[1]}:{band[2]}"
    if band == "full":
        raise UsageError("'full' is not a trainable branch")
    return band


def _load_model(path):
    if not path:
        raise StateError("this subcommand needs --ckpt CHECKPOINT")
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise StateError(f"checkpoint {path!r} does not exist") from None


def cmd_translate(args, cfg):
    params = _load_model(args.ckpt)
    if args.token is None:
        raise UsageError("translate needs --token")
    source = read_ppm(args.inp)
    branch = _branch_name(args.branch) if args.branch else None
    out = translate(
        params, source, args.token, branch, _sampler(cfg), _train_config(cfg, "pretrain").schedule,
        seed=args.seed, shuffle=args.shuffle, allow_shuffle=cfg["allow_shuffle_any_branch"],
        shared_channels=cfg["shuffle_shared_channels"],
    )
    write_ppm(args.out, out)


def cmd_sample(args, cfg):
    params = _load_model(args.ckpt)
    if args.token is None:
        raise UsageError("sample needs --token")
    size = cfg["image_size"]
    blank = np.zeros((size, size, 3), np.uint8)
    out = translate(params, blank, args.token, None, _sampler(cfg),
                    _train_config(cfg, "pretrain").schedule, seed=args.seed)
    write_ppm(args.out, out)


def cmd_eval(args, cfg):
    params = _load_model(args.ckpt)
    if not args.branch:
        raise UsageError("eval needs --branch")
    images, tokens = _dataset(args, cfg)
    _, held = split_indices(len(images))
    held = held[: args.count]
    if len(held) == 0:
        raise DataError("no held-out images to evaluate on")
    stats = evaluate(
        params, images[held], tokens[held], _branch_name(args.branch), _sampler(cfg),
        _train_config(cfg, "pretrain").schedule, seed=args.seed, spec=_dataset_spec(cfg),
        shuffle=args.shuffle,
    )
    out = open(args.out, "w") if args.out else sys.stdout
    out.write("metric\tmean\tstd\n")
    for name, (mean, std) in stats.items():
        out.write(f"{name}\t{mean!r}\t{std!r}\n")
    if args.out:
        out.close()


def cmd_selftest(args, cfg):
    results = selftest.run(args.seed or 0)
    for suite, name, ok in results:
        log.info("%s %s: %s", "PASS" if ok else "FAIL", suite, name)
    failed = [r for r in results if not r[2]]
    if failed:
        raise NumericFailure(f"{len(failed)} selftest check(s) failed")


COMMANDS = {
    "filter": cmd_filter,
    "shuffle": cmd_shuffle,
    "spectrum": cmd_spectrum,
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-branch": cmd_train_branch,
    "translate": cmd_translate,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "selftest": cmd_selftest,
}

# which flags each subcommand requires
REQUIRED = {
    "filter": ("inp", "out", "band"),
    "shuffle": ("inp", "out"),
    "spectrum": ("inp",),
    "gen-data": ("out",),
    "pretrain": ("out",),
    "train-branch": ("out",),
    "translate": ("inp", "out"),
    "sample": ("out",),
}


def build_parser():
    parser = _Parser(prog="freqdiff", description="Frequency-controlled toy diffusion toolkit.")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--band", help="mini|low|mid|high|full|custom:LO:HI")
    parser.add_argument("--branch", help="control branch band name")
    parser.add_argument("--shuffle", action="store_true", help="equifrequency-shuffle the control")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--config", metavar="PATH")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--in", dest="inp", metavar="PATH")
    parser.add_argument("--out", metavar="PATH")
    parser.add_argument("--base", metavar="CKPT", help="pretrained checkpoint (train-branch)")
    parser.add_argument("--ckpt", metavar="CKPT", help="model checkpoint (translate, sample, eval)")
    parser.add_argument("--token", type=int, help="target condition token")
    parser.add_argument("--log", metavar="PATH", help="loss log file (default stdout)")
    parser.add_argument("--count", type=int, default=32, help="held-out images to evaluate")
    return parser


def run(argv=None):
    """Run one subcommand; returns the process exit code."""
    if not logging.getLogger().handlers and not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
    try:
        args = build_parser().parse_args(argv)
        for name in REQUIRED.get(args.command, ()):
            if getattr(args, name) is None:
                flag = "--in" if name == "inp" else f"--{name}"
                raise UsageError(f"{args.command} needs {flag}")
        if args.band:
            make_mask(parse_band(args.band), 2, 2)
        flags = {"steps": args.steps}
        if args.command in ("pretrain", "train-branch"):
            flags["seed"] = args.seed
        cfg = resolve_config(args.config, args.set, flags)
        if args.seed is None:
            args.seed = cfg["seed"]
        log.info("config %s", " ".join(f"{k}={cfg[k]}" for k in DEFAULTS))
        COMMANDS[args.command](args, cfg)
        return 0
    except UsageError as exc:
        log.error("usage: %s", exc)
        return 1
    except (NumericFailure, NumericInputError, FloatingPointError, ArithmeticError) as exc:
        log.error("numeric failure: %s", exc)
        return 3
    except (FormatError, DataError, ShapeError, StateError, BranchError, OSError) as exc:
        log.error("data error: %s", exc)
        return 2
    except ValueError as exc:
        log.error("usage: %s", exc)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
