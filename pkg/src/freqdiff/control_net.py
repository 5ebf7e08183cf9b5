"""Toy conditional denoiser with per-band control branches and manual gradients.

Layout is channels-last, ``(batch, h, w, c)``. The base denoiser is a
two-level U-Net::

    h0 = stem(z)
    h1 = h0 + relu(block1(h0) + bias1)          full resolution
    d  = down(h1)                                stride 2
    h2 = d + relu(block2(d) + bias2)             half resolution
    u  = up(upsample(h2 + inj1)) + (h1 + inj0)
    h3 = u + relu(block3(u) + bias3)
    eps = head(h3)

``bias_k`` are per-channel biases projected from the time embedding and the
condition-token embedding. A control branch is a trainable copy of the
encoder half (stem .. block2) fed with ``z`` plus a hint convolution of the
control signal; its two feature maps go through zero-initialized 1x1
convolutions and produce ``inj0``/``inj1``. Without a branch both
injections are absent, and with a freshly attached branch they are exact
zeros, so the controlled output equals the base output bit for bit.
"""
import struct
from collections import OrderedDict

import numpy as np

from .exceptions import BranchError, FormatError, ShapeError
from .filters import NAMED_BANDS, ffm, make_mask

__all__ = [
    "EMBED_DIM",
    "ModelParams",
    "time_embed",
    "init_params",
    "forward_base",
    "forward_controlled",
    "control_features",
    "loss_and_grads",
    "save_checkpoint",
    "load_checkpoint",
]

EMBED_DIM = 32
ENCODER_LAYERS = ("stem", "block1", "down", "block2")
CHECKPOINT_MAGIC = b"FCCK"
CHECKPOINT_VERSION = 1


def time_embed(t, dim=EMBED_DIM):
    """Sinusoidal timestep features: ``[sin(t w_k), cos(t w_k)]``.

    ``w_k = 10000 ** (-k / (dim/2 - 1))`` spans 1 down to 1e-4.
    Accepts a scalar or a vector of timesteps; returns float64.
    """
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    arg = t[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


class ModelParams:
    """Named parameter tensors plus the architecture they describe.

    Names follow ``base.<layer>.kernel``, ``embed.<...>`` and
    ``branch.<band>.<layer>.kernel``.
    """

    def __init__(self, tensors, channels, vocab, widths=(32, 64), dim=EMBED_DIM):
        self.tensors = OrderedDict(tensors)
        self.channels = channels
        self.vocab = vocab
        self.widths = tuple(widths)
        self.dim = dim

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    @property
    def dtype(self):
        return self.tensors["base.stem.kernel"].dtype

    @property
    def branches(self):
        names = []
        for key in self.tensors:
            if key.startswith("branch."):
                kind = key.split(".")[1]
                if kind not in names:
                    names.append(kind)
        return names

    def has_branch(self, kind):
        return f"branch.{kind}.zero0.kernel" in self.tensors

    def group(self, name):
        """Parameter names belonging to ``"base"`` (base + embeddings) or a branch."""
        if name == "base":
            return [k for k in self.tensors if not k.startswith("branch.")]
        if not self.has_branch(name):
            raise BranchError(f"branch {name!r} is not attached")
        return [k for k in self.tensors if k.startswith(f"branch.{name}.")]

    def copy(self):
        return ModelParams(
            {k: v.copy() for k, v in self.tensors.items()},
            self.channels, self.vocab, self.widths, self.dim,
        )

    def astype(self, dtype):
        return ModelParams(
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            self.channels, self.vocab, self.widths, self.dim,
        )

    def attach_branch(self, kind, seed=0):
        """Add a control branch initialized from the current base encoder.

        The encoder copy is exact, the hint convolution is random and the two
        zero convolutions are exactly zero.
        """
        if self.has_branch(kind):
            raise BranchError(f"branch {kind!r} already attached")
        w1, w2 = self.widths
        dtype = self.dtype
        rng = np.random.default_rng([seed, 1 + _branch_index(kind)])
        prefix = f"branch.{kind}."
        self.tensors[prefix + "hint.kernel"] = _kaiming(rng, (3, 3, self.channels, w1), dtype)
        for layer in ENCODER_LAYERS:
            for part in ("kernel", "bias"):
                self.tensors[f"{prefix}{layer}.{part}"] = self.tensors[f"base.{layer}.{part}"].copy()
        self.tensors[prefix + "zero0.kernel"] = np.zeros((1, 1, w1, w1), dtype)
        self.tensors[prefix + "zero0.bias"] = np.zeros(w1, dtype)
        self.tensors[prefix + "zero1.kernel"] = np.zeros((1, 1, w2, w2), dtype)
        self.tensors[prefix + "zero1.bias"] = np.zeros(w2, dtype)
        return self

    def eps(self, z_t, t, cond, control=None, branch=None):
        if control is None:
            return forward_base(self, z_t, t, cond)
        return forward_controlled(self, branch, z_t, t, cond, control)


def _branch_index(kind):
    if kind in NAMED_BANDS:
        return NAMED_BANDS.index(kind)
    return sum(kind.encode()) + len(NAMED_BANDS)


def _kaiming(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_params(seed=0, c=12, V=16, widths=(32, 64), dim=EMBED_DIM, branches=(), dtype=np.float32):
    """Fresh base denoiser, deterministic in ``seed``.

    Kernels are He-scaled (``std = sqrt(2 / fan_in)``) except the output
    head, which starts at zero; all conv biases start at zero.
    """
    w1, w2 = widths
    rng = np.random.default_rng(seed)
    t = OrderedDict()
    convs = [
        ("stem", c, w1), ("block1", w1, w1), ("down", w1, w2), ("block2", w2, w2),
        ("up", w2, w1), ("block3", w1, w1), ("head", w1, c),
    ]
    for name, cin, cout in convs:
        t[f"base.{name}.kernel"] = _kaiming(rng, (3, 3, cin, cout), dtype)
        if name == "head":
            t[f"base.{name}.kernel"][...] = 0
        t[f"base.{name}.bias"] = np.zeros(cout, dtype)
    t["embed.time.fc1.weight"] = _kaiming(rng, (dim, dim), dtype)
    t["embed.time.fc1.bias"] = np.zeros(dim, dtype)
    t["embed.time.fc2.weight"] = (rng.standard_normal((dim, dim)) / np.sqrt(dim)).astype(dtype)
    t["embed.time.fc2.bias"] = np.zeros(dim, dtype)
    t["embed.cond.table"] = rng.standard_normal((V, dim)).astype(dtype)
    for block, width in (("block1", w1), ("block2", w2), ("block3", w1)):
        for source in ("time", "cond"):
            t[f"embed.{block}.{source}"] = (
                rng.standard_normal((dim, width)) / np.sqrt(2 * dim)
            ).astype(dtype)
    p = ModelParams(t, c, V, widths, dim)
    for kind in branches:
        p.attach_branch(kind, seed=seed)
    return p


# -- convolution primitives -------------------------------------------------

def _conv(x, k, b=None, stride=1):
    """Same-padded convolution via im2col. Returns output and the column matrix."""
    kh = k.shape[0]
    pad = kh // 2
    B, H, W, C = x.shape
    Ho, Wo = (H + stride - 1) // stride, (W + stride - 1) // stride
    if kh == 1:
        cols = x[:, ::stride, ::stride, :].reshape(-1, C)
    else:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        cols = np.concatenate(
            [xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
             for i in range(kh) for j in range(kh)],
            axis=-1,
        ).reshape(-1, kh * kh * C)
    out = cols @ k.reshape(-1, k.shape[-1])
    if b is not None:
        out += b
    return out.reshape(B, Ho, Wo, k.shape[-1]), cols


def _conv_back(dout, cols, k, x_shape, stride=1, need_dx=True, need_dw=True):
    kh = k.shape[0]
    pad = kh // 2
    cout = k.shape[-1]
    d2 = dout.reshape(-1, cout)
    dk = db = dx = None
    if need_dw:
        dk = (cols.T @ d2).reshape(k.shape)
        db = d2.sum(axis=0)
    if need_dx:
        B, H, W, C = x_shape
        Ho, Wo = dout.shape[1], dout.shape[2]
        dcols = (d2 @ k.reshape(-1, cout).T).reshape(B, Ho, Wo, kh * kh, C)
        if kh == 1:
            dx = np.zeros(x_shape, dout.dtype)
            dx[:, ::stride, ::stride, :] = dcols[:, :, :, 0, :]
        else:
            dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dout.dtype)
            n = 0
            for i in range(kh):
                for j in range(kh):
                    dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[:, :, :, n, :]
                    n += 1
            dx = dxp[:, pad:pad + H, pad:pad + W, :]
    return dx, dk, db


def _upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample_back(d):
    B, H, W, C = d.shape
    return d.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


# -- forward ----------------------------------------------------------------

def _as_batch(p, z, t, cond, C=None):
    z = np.asarray(z)
    single = z.ndim == 3
    if single:
        z = z[None]
    if z.ndim != 4 or z.shape[-1] != p.channels:
        raise ShapeError(f"latent must be (h, w, {p.channels}), got {z.shape}")
    if z.shape[1] % 2 or z.shape[2] % 2:
        raise ShapeError(f"latent height and width must be even, got {z.shape[1:3]}")
    B = z.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    cond = np.broadcast_to(np.asarray(cond), (B,)).astype(np.int64)
    if np.any(cond < 0) or np.any(cond >= p.vocab):
        raise ValueError(f"condition token out of range 0..{p.vocab - 1}")
    if C is not None:
        C = np.asarray(C)
        if C.ndim == 3:
            C = C[None]
        if C.shape != z.shape:
            raise ShapeError(f"control signal {C.shape} does not match latent {z.shape}")
        C = C.astype(p.dtype, copy=False)
    return z.astype(p.dtype, copy=False), t, cond, C, single


def _embed(p, t, cond, cache):
    dtype = p.dtype
    s = time_embed(t, p.dim).astype(dtype)
    a = s @ p["embed.time.fc1.weight"] + p["embed.time.fc1.bias"]
    r = np.maximum(a, 0)
    temb = r @ p["embed.time.fc2.weight"] + p["embed.time.fc2.bias"]
    cvec = p["embed.cond.table"][cond]
    biases = {
        blk: temb @ p[f"embed.{blk}.time"] + cvec @ p[f"embed.{blk}.cond"]
        for blk in ("block1", "block2", "block3")
    }
    cache.update(s=s, fc1_pre=a, fc1_out=r, temb=temb, cvec=cvec, cond=cond)
    return biases


def _res_block(x, prefix, p, bias, cache, tag):
    a, cols = _conv(x, p[prefix + ".kernel"], p[prefix + ".bias"])
    a += bias[:, None, None, :]
    cache[tag] = (x.shape, cols, a > 0)
    return x + np.maximum(a, 0)


def _forward(p, z, t, cond, branch=None, C=None):
    cache = {}
    biases = _embed(p, t, cond, cache)

    h0, cols = _conv(z, p["base.stem.kernel"], p["base.stem.bias"])
    cache["stem"] = (z.shape, cols)
    h1 = _res_block(h0, "base.block1", p, biases["block1"], cache, "block1")
    d, cols = _conv(h1, p["base.down.kernel"], p["base.down.bias"], stride=2)
    cache["down"] = (h1.shape, cols)
    h2 = _res_block(d, "base.block2", p, biases["block2"], cache, "block2")

    if branch is not None:
        pre = f"branch.{branch}."
        g0, cols = _conv(z, p[pre + "stem.kernel"], p[pre + "stem.bias"])
        cache["b_stem"] = (z.shape, cols)
        hint, cols = _conv(C, p[pre + "hint.kernel"])
        cache["b_hint"] = (C.shape, cols)
        g0 = g0 + hint
        g1 = _res_block(g0, pre + "block1", p, biases["block1"], cache, "b_block1")
        gd, cols = _conv(g1, p[pre + "down.kernel"], p[pre + "down.bias"], stride=2)
        cache["b_down"] = (g1.shape, cols)
        g2 = _res_block(gd, pre + "block2", p, biases["block2"], cache, "b_block2")
        inj0, cols = _conv(g1, p[pre + "zero0.kernel"], p[pre + "zero0.bias"])
        cache["b_zero0"] = (g1.shape, cols)
        inj1, cols = _conv(g2, p[pre + "zero1.kernel"], p[pre + "zero1.bias"])
        cache["b_zero1"] = (g2.shape, cols)
        cache["features"] = (g1, g2)
        cache["deltas"] = (inj0, inj1)
        h1 = h1 + inj0
        h2 = h2 + inj1

    up_in = _upsample(h2)
    u, cols = _conv(up_in, p["base.up.kernel"], p["base.up.bias"])
    cache["up"] = (up_in.shape, cols)
    u += h1
    h3 = _res_block(u, "base.block3", p, biases["block3"], cache, "block3")
    out, cols = _conv(h3, p["base.head.kernel"], p["base.head.bias"])
    cache["head"] = (h3.shape, cols)
    return out, cache


def forward_base(p, z_t, t, cond):
    """Predicted noise of the base denoiser for ``z_t`` at step ``t`` under token ``cond``."""
    z, t, cond, _, single = _as_batch(p, z_t, t, cond)
    out, _ = _forward(p, z, t, cond)
    return out[0] if single else out


def _check_branch(p, branch):
    if not p.has_branch(branch):
        raise BranchError(f"branch {branch!r} is not attached")


def forward_controlled(p, branch, z_t, t, cond, C):
    """Predicted noise with the control signal ``C`` routed through ``branch``."""
    _check_branch(p, branch)
    z, t, cond, C, single = _as_batch(p, z_t, t, cond, C)
    out, _ = _forward(p, z, t, cond, branch=branch, C=C)
    return out[0] if single else out


def control_features(p, branch, z_t, t, cond, C):
    """Branch feature maps before the zero convolutions and the deltas they inject.

    Returns ``{"features": (full_res, half_res), "deltas": (inj0, inj1)}``.
    """
    _check_branch(p, branch)
    z, t, cond, C, _ = _as_batch(p, z_t, t, cond, C)
    _, cache = _forward(p, z, t, cond, branch=branch, C=C)
    return {"features": cache["features"], "deltas": cache["deltas"]}


# -- backward ---------------------------------------------------------------

def _res_block_back(dy, prefix, p, cache, tag, grads, train, dbias):
    x_shape, cols, active = cache[tag]
    da = dy * active
    need_w = prefix + ".kernel" in train
    dx, dk, db = _conv_back(da, cols, p[prefix + ".kernel"], x_shape, need_dw=need_w)
    if need_w:
        grads[prefix + ".kernel"] += dk
        grads[prefix + ".bias"] += db
    dbias += da.sum(axis=(1, 2))
    return dy + dx


def _conv_layer_back(dy, name, p, cache, tag, grads, train, stride=1, need_dx=True, has_bias=True):
    x_shape, cols = cache[tag]
    need_w = name + ".kernel" in train
    if not (need_w or need_dx):
        return None
    dx, dk, db = _conv_back(dy, cols, p[name + ".kernel"], x_shape, stride, need_dx, need_w)
    if need_w:
        grads[name + ".kernel"] += dk
        if has_bias:
            grads[name + ".bias"] += db
    return dx


def _backward(p, cache, dout, train, branch=None):
    grads = OrderedDict((k, np.zeros_like(v)) for k, v in p.tensors.items())
    dbias = {blk: 0 for blk in ("block1", "block2", "block3")}
    B = dout.shape[0]
    for blk, w in (("block1", p.widths[0]), ("block2", p.widths[1]), ("block3", p.widths[0])):
        dbias[blk] = np.zeros((B, w), dout.dtype)

    dh3 = _conv_layer_back(dout, "base.head", p, cache, "head", grads, train)
    du = _res_block_back(dh3, "base.block3", p, cache, "block3", grads, train, dbias["block3"])
    dh1 = du
    dup = _conv_layer_back(du, "base.up", p, cache, "up", grads, train)
    dh2 = _upsample_back(dup)

    if branch is not None:
        pre = f"branch.{branch}."
        dg2 = _conv_layer_back(dh2, pre + "zero1", p, cache, "b_zero1", grads, train)
        dg1 = _conv_layer_back(dh1, pre + "zero0", p, cache, "b_zero0", grads, train)
        dgd = _res_block_back(dg2, pre + "block2", p, cache, "b_block2", grads, train, dbias["block2"])
        dg1 = dg1 + _conv_layer_back(dgd, pre + "down", p, cache, "b_down", grads, train, stride=2)
        dg0 = _res_block_back(dg1, pre + "block1", p, cache, "b_block1", grads, train, dbias["block1"])
        _conv_layer_back(dg0, pre + "hint", p, cache, "b_hint", grads, train, need_dx=False, has_bias=False)
        _conv_layer_back(dg0, pre + "stem", p, cache, "b_stem", grads, train, need_dx=False)

    base_enc = any(n in train for n in (
        "base.stem.kernel", "base.block1.kernel", "base.down.kernel", "base.block2.kernel",
    )) or any(n.startswith("embed.") for n in train)
    if base_enc:
        dd = _res_block_back(dh2, "base.block2", p, cache, "block2", grads, train, dbias["block2"])
        dh1 = dh1 + _conv_layer_back(dd, "base.down", p, cache, "down", grads, train, stride=2)
        dh0 = _res_block_back(dh1, "base.block1", p, cache, "block1", grads, train, dbias["block1"])
        _conv_layer_back(dh0, "base.stem", p, cache, "stem", grads, train, need_dx=False)

    if any(n.startswith("embed.") for n in train):
        _embed_back(p, cache, dbias, grads)
    for name in grads:
        if name not in train:
            grads[name][...] = 0
    return grads


def _embed_back(p, cache, dbias, grads):
    temb, cvec = cache["temb"], cache["cvec"]
    dtemb = np.zeros_like(temb)
    dcvec = np.zeros_like(cvec)
    for blk, db in dbias.items():
        grads[f"embed.{blk}.time"] += temb.T @ db
        grads[f"embed.{blk}.cond"] += cvec.T @ db
        dtemb += db @ p[f"embed.{blk}.time"].T
        dcvec += db @ p[f"embed.{blk}.cond"].T
    np.add.at(grads["embed.cond.table"], cache["cond"], dcvec)
    grads["embed.time.fc2.weight"] += cache["fc1_out"].T @ dtemb
    grads["embed.time.fc2.bias"] += dtemb.sum(axis=0)
    da = (dtemb @ p["embed.time.fc2.weight"].T) * (cache["fc1_pre"] > 0)
    grads["embed.time.fc1.weight"] += cache["s"].T @ da
    grads["embed.time.fc1.bias"] += da.sum(axis=0)


def loss_and_grads(p, batch, sched, branch=None, mask=None, trainable=None, control=None):
    """Mean squared noise-prediction error and its exact gradients.

    ``batch`` is ``(z0, cond, t, eps)`` with ``z0``/``eps`` shaped
    ``(n, h, w, c)``. With ``branch`` set, the controlled denoiser is used and
    the control signal is ``ffm(z0, mask)`` (``mask`` defaults to the branch's
    own band) unless ``control`` is passed explicitly. Gradients cover every
    parameter; those outside ``trainable`` are zero. ``trainable`` defaults to
    the base group without a branch and to the branch's own group with one.
    """
    from .diffusion import q_sample

    z0, cond, t, eps = batch
    z0 = np.asarray(z0, dtype=p.dtype)
    eps = np.asarray(eps, dtype=p.dtype)
    if z0.ndim != 4 or len(z0) == 0:
        raise ShapeError("batch must hold at least one (h, w, c) latent")
    z_t = q_sample(z0, t, eps, sched)
    C = None
    if branch is not None:
        _check_branch(p, branch)
        if control is not None:
            C = np.asarray(control, dtype=p.dtype)
        else:
            if mask is None:
                mask = make_mask(branch, z0.shape[1], z0.shape[2])
            C = ffm(z0, mask)
    if trainable is None:
        trainable = p.group("base") if branch is None else p.group(branch)
    train = set(trainable)

    z, tt, cc, C, _ = _as_batch(p, z_t, t, cond, C)
    out, cache = _forward(p, z, tt, cc, branch=branch, C=C)
    diff = out - eps
    loss = float(np.mean(np.square(diff)))
    dout = (2.0 / diff.size) * diff
    grads = _backward(p, cache, dout.astype(p.dtype), train, branch=branch)
    return loss, grads


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, p):
    """Write ``FCCK`` v1: count, then (name, rank, dims, float32 LE values) records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(p.tensors)))
        for name, arr in p.tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}", offset=0)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError("truncated checkpoint", offset=pos)
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    tensors = OrderedDict()
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(data):
            raise FormatError("truncated parameter name", offset=pos)
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"truncated values for {name}", offset=pos)
        tensors[name] = np.frombuffer(data, "<f4", int(nbytes // 4), pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise FormatError("trailing bytes after last record", offset=pos)
    try:
        c = tensors["base.stem.kernel"].shape[2]
        widths = (tensors["base.stem.kernel"].shape[3], tensors["base.down.kernel"].shape[3])
        vocab, dim = tensors["embed.cond.table"].shape
    except KeyError as exc:
        raise FormatError(f"checkpoint lacks parameter {exc.args[0]}") from None
    return ModelParams(tensors, c, vocab, widths, dim)
