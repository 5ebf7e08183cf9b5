"""Synthetic palette x shape images, the space-to-depth latent codec, and file I/O.

Each image has a smooth two-color gradient background whose colors come
from a palette label, overlaid with 3-6 hard-edged shapes of one shape
label. The palette lives mostly in the lowest DCT levels of the latent and
the shapes in the higher ones. Token id is ``palette * n_shapes + shape``.
"""
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .exceptions import FormatError, ShapeError

__all__ = [
    "PALETTES",
    "SHAPES",
    "DatasetSpec",
    "generate",
    "generate_dataset",
    "token_of",
    "labels_of",
    "heldout_mask",
    "split_indices",
    "encode",
    "decode",
    "read_ppm",
    "write_ppm",
    "read_tensor",
    "write_tensor",
]

# (start color, end color) for each palette; per-image jitter is added
PALETTES = {
    "warm": ((235, 90, 40), (250, 200, 70)),
    "cool": ((30, 70, 210), (70, 200, 235)),
    "mono": ((40, 40, 40), (215, 215, 215)),
    "green": ((30, 120, 40), (150, 225, 90)),
}
SHAPES = ("circles", "squares", "stripes", "triangles")
SHAPE_CONTRAST = 90.0
COLOR_JITTER = 25.0


@dataclass(frozen=True)
class DatasetSpec:
    num_images: int = 512
    size: int = 32
    seed: int = 0
    palettes: tuple = tuple(PALETTES)
    shapes: tuple = SHAPES

    @property
    def vocab(self):
        return len(self.palettes) * len(self.shapes)


def token_of(spec, palette, shape):
    return palette * len(spec.shapes) + shape


def labels_of(spec, token):
    """Inverse of :func:`token_of`: ``(palette_index, shape_index)``."""
    return divmod(int(token), len(spec.shapes))


def _background(rng, palette, size):
    start, end = (np.asarray(c, dtype=np.float64) for c in PALETTES[palette])
    start = start + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3)
    end = end + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    img = start + ramp[..., None] * (end - start)
    return np.clip(img, 0, 255)


def _shape_mask(rng, shape, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), bool)
    count = int(rng.integers(3, 7))
    if shape == "stripes":
        # thin diagonal lines put energy at the largest u + v levels
        sign = 1 if rng.random() < 0.5 else -1
        diag = yy + sign * xx
        for _ in range(count):
            pos = rng.uniform(diag.min(), diag.max())
            mask |= np.abs(diag - pos) <= 0.75
        return mask
    for _ in range(count):
        cy, cx = rng.uniform(4, size - 4, 2)
        if shape == "circles":
            r = rng.uniform(2.0, 4.0)
            mask |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif shape == "squares":
            # snapped to the 2-pixel codec grid, so edges fall between latent cells
            half = 2 * rng.integers(2, 4)
            y0, x0 = 2 * int(cy // 2), 2 * int(cx // 2)
            mask |= (yy >= y0 - half) & (yy < y0 + half) & (xx >= x0 - half) & (xx < x0 + half)
        elif shape == "triangles":
            half = rng.uniform(3.0, 6.0)
            # upward isosceles triangle: apex at top, base at bottom
            dy = yy - (cy - half)
            inside = (dy >= 0) & (dy <= 2 * half)
            mask |= inside & (np.abs(xx - cx) <= dy / 2)
        else:
            raise ValueError(f"unknown shape label {shape!r}")
    return mask


def generate(spec, index, draw_shapes=True):
    """Render image ``index`` of ``spec``; returns ``(uint8 image, token)``.

    ``draw_shapes=False`` gives the bare background of the same image.
    """
    if not 0 <= index < spec.num_images:
        raise IndexError(f"image index {index} out of range 0..{spec.num_images - 1}")
    rng = np.random.default_rng([spec.seed, index])
    p = int(rng.integers(len(spec.palettes)))
    s = int(rng.integers(len(spec.shapes)))
    img = _background(rng, spec.palettes[p], spec.size)
    mask = _shape_mask(rng, spec.shapes[s], spec.size)
    if not draw_shapes:
        mask[:] = False
    # constant-magnitude contrast, pushed toward the middle of the range
    shifted = np.where(img < 128, img + SHAPE_CONTRAST, img - SHAPE_CONTRAST)
    img = np.where(mask[..., None], shifted, img)
    return np.rint(img).astype(np.uint8), token_of(spec, p, s)


def generate_dataset(spec):
    """All images of ``spec`` as ``(n, H, W, 3)`` uint8 plus their tokens."""
    pairs = [generate(spec, i) for i in range(spec.num_images)]
    return np.stack([im for im, _ in pairs]), np.array([tok for _, tok in pairs], dtype=np.int64)


def heldout_mask(n):
    """Deterministic ~1-in-10 held-out selection by CRC32 of the index."""
    return np.array([zlib.crc32(struct.pack("<I", i)) % 10 == 0 for i in range(n)])


def split_indices(n):
    held = heldout_mask(n)
    idx = np.arange(n)
    return idx[~held], idx[held]


def encode(X):
    """Space-to-depth by 2 with ``[0, 255] -> [-1, 1]``: ``(H, W, 3) -> (H/2, W/2, 12)``.

    Latent channel ``(di*2 + dj)*3 + color`` holds pixel ``(2i+di, 2j+dj)``.
    Works on a leading batch axis too.
    """
    X = np.asarray(X)
    if X.ndim < 3 or X.shape[-1] != 3:
        raise ShapeError(f"expected (..., H, W, 3) image, got {X.shape}")
    H, W = X.shape[-3:-1]
    if H % 2 or W % 2:
        raise ShapeError(f"image height and width must be even, got {H}x{W}")
    lead = X.shape[:-3]
    z = X.reshape(lead + (H // 2, 2, W // 2, 2, 3))
    z = np.moveaxis(z, -4, -3).reshape(lead + (H // 2, W // 2, 12))
    return z.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def decode(z):
    """Inverse of :func:`encode`; values are rounded and clipped to uint8."""
    z = np.asarray(z)
    if z.ndim < 3 or z.shape[-1] != 12:
        raise ShapeError(f"expected (..., h, w, 12) latent, got {z.shape}")
    h, w = z.shape[-3:-1]
    lead = z.shape[:-3]
    x = (z.astype(np.float32) + np.float32(1.0)) * np.float32(127.5)
    x = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    x = x.reshape(lead + (h, w, 2, 2, 3))
    return np.moveaxis(x, -3, -4).reshape(lead + (2 * h, 2 * w, 3))


# -- PPM --------------------------------------------------------------------

def _ppm_tokens(data):
    """Yield the four header fields and the offset just past the header."""
    pos = 0
    fields = []
    n = len(data)
    while len(fields) < 4:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", offset=pos)
        fields.append((data[start:pos], start))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PPM header", offset=pos)
    return fields, pos + 1


def read_ppm(path):
    """Read a binary P6 PPM with maxval 255 as an ``(H, W, 3)`` uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise FormatError(f"bad PPM magic {data[:2]!r}, expected b'P6'", offset=0)
    fields, pos = _ppm_tokens(data)
    values = []
    for raw, off in fields[1:]:
        if not raw.isdigit():
            raise FormatError(f"non-numeric PPM header field {raw!r}", offset=off)
        values.append(int(raw))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}, only 255", offset=fields[3][1])
    if width < 1 or height < 1:
        raise FormatError("PPM dimensions must be positive", offset=fields[1][1])
    need = width * height * 3
    if len(data) - pos < need:
        raise FormatError(f"truncated PPM pixel data: need {need} bytes, have {len(data) - pos}",
                          offset=len(data))
    pixels = np.frombuffer(data, np.uint8, need, pos)
    return pixels.reshape(height, width, 3).copy()


def write_ppm(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ShapeError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


# -- FCDT tensors -----------------------------------------------------------

TENSOR_MAGIC = b"FCDT"


def write_tensor(path, t):
    """``FCDT``, u32 rank, u32 dims, then row-major float32 little-endian values."""
    t = np.ascontiguousarray(t, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", t.ndim))
        fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
        fh.write(t.tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {data[:4]!r}", offset=0)
    if len(data) < 8:
        raise FormatError("truncated tensor header", offset=len(data))
    (rank,) = struct.unpack_from("<I", data, 4)
    head = 8 + 4 * rank
    if len(data) < head:
        raise FormatError("truncated tensor dims", offset=len(data))
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - head != 4 * count:
        raise FormatError(
            f"tensor payload has {len(data) - head} bytes, dims {dims} need {4 * count}",
            offset=head,
        )
    return np.frombuffer(data, "<f4", count, head).reshape(dims).astype(np.float32)
