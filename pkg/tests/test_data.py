import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from freqdiff.data import (
    PALETTES, SHAPES, DatasetSpec, decode, encode, generate, generate_dataset, heldout_mask,
    labels_of, read_ppm, read_tensor, split_indices, token_of, write_ppm, write_tensor,
)
from freqdiff.exceptions import FormatError, ShapeError
from freqdiff.filters import apply_mask, make_mask
from freqdiff.spectral import dct2
from freqdiff.training import high_band_share


def band_energy(image, band):
    z = encode(image)
    F = dct2(z, dtype=np.float64)
    return float(np.sum(apply_mask(F, make_mask(band, *z.shape[:2])) ** 2))


def variance_ratio(values, labels):
    """Between-class variance of the class means over mean within-class variance."""
    values, labels = np.asarray(values, float), np.asarray(labels)
    classes = np.unique(labels)
    means = np.array([values[labels == c].mean() for c in classes])
    weights = np.array([np.mean(labels == c) for c in classes])
    between = np.sum(weights * (means - values.mean()) ** 2)
    within = np.sum([np.sum((values[labels == c] - m) ** 2) for c, m in zip(classes, means)]) / len(values)
    return between / within


# -- codec ---------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6).map(lambda k: 2 * k),
                                  st.integers(1, 6).map(lambda k: 2 * k), st.just(3))))
def test_codec_lossless(X):
    z = encode(X)
    assert z.shape == (X.shape[0] // 2, X.shape[1] // 2, 12)
    assert z.dtype == np.float32
    assert z.min() >= -1 and z.max() <= 1
    assert np.array_equal(decode(z), X)


def test_codec_endpoints_and_shape():
    assert np.all(encode(np.zeros((32, 32, 3), np.uint8)) == -1)
    assert np.all(encode(np.full((32, 32, 3), 255, np.uint8)) == 1)
    assert encode(np.zeros((32, 32, 3), np.uint8)).shape == (16, 16, 12)
    assert encode(np.zeros((5, 32, 32, 3), np.uint8)).shape == (5, 16, 16, 12)


def test_codec_channel_layout():
    X = np.zeros((4, 4, 3), np.uint8)
    X[3, 2, 1] = 255  # block (1, 1), di=1, dj=0, green
    z = encode(X)
    hot = np.argwhere(z > -1)
    assert hot.tolist() == [[1, 1, (1 * 2 + 0) * 3 + 1]]


def test_codec_is_permutation_plus_affine(rng):
    X = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    z = encode(X)
    assert sorted(z.ravel().tolist()) == sorted((X.astype(np.float32) / np.float32(127.5) - 1).ravel().tolist())


def test_codec_errors():
    with pytest.raises(ShapeError):
        encode(np.zeros((5, 4, 3), np.uint8))
    with pytest.raises(ShapeError):
        encode(np.zeros((4, 4, 4), np.uint8))
    with pytest.raises(ShapeError):
        decode(np.zeros((4, 4, 3)))


def test_decode_clips_and_rounds():
    z = np.full((1, 1, 12), 2.0, np.float32)
    z[..., 0] = -3
    z[..., 1] = 0.0
    x = decode(z)
    assert x[0, 0, 0] == 0 and x[0, 0, 1] == 128 and x[1, 1, 2] == 255


# -- PPM ------------------------------------------------------------------------

def test_ppm_round_trip(tmp_path, rng):
    X = rng.integers(0, 256, (6, 10, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", X)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n10 6\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), X)


def test_ppm_header_comments(tmp_path):
    pixels = bytes(range(12))
    (tmp_path / "c.ppm").write_bytes(b"P6 # comment\n2\t# w\n2\n255\n" + pixels)
    assert read_ppm(tmp_path / "c.ppm").ravel().tolist() == list(range(12))


@pytest.mark.parametrize("raw,offset", [
    (b"P5\n1 1\n255\n\0", 0),
    (b"P6\n1 1\n65535\n\0\0\0\0\0\0", 7),
    (b"P6\n2 2\n255\n\0\0\0", 14),
    (b"P6\n2", 4),
    (b"P6\nx 1\n255\n\0\0\0", 3),
])
def test_ppm_errors(tmp_path, raw, offset):
    (tmp_path / "bad.ppm").write_bytes(raw)
    with pytest.raises(FormatError) as info:
        read_ppm(tmp_path / "bad.ppm")
    assert info.value.offset == offset
    assert "offset" in str(info.value)


def test_write_ppm_rejects_wrong_dtype(tmp_path):
    with pytest.raises(ShapeError):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2, 3), np.float32))


# -- FCDT -------------------------------------------------------------------------

def test_tensor_round_trip(tmp_path, rng):
    t = rng.standard_normal((3, 4, 5)).astype(np.float32)
    write_tensor(tmp_path / "t.fcdt", t)
    raw = (tmp_path / "t.fcdt").read_bytes()
    assert raw[:4] == b"FCDT"
    assert struct.unpack("<4I", raw[4:20]) == (3, 3, 4, 5)
    assert len(raw) == 20 + 4 * 60
    back = read_tensor(tmp_path / "t.fcdt")
    assert back.dtype == np.float32 and np.array_equal(back, t)


def test_tensor_scalar_rank0(tmp_path):
    write_tensor(tmp_path / "s.fcdt", np.float32(2.5))
    assert read_tensor(tmp_path / "s.fcdt") == np.float32(2.5)


def test_tensor_errors(tmp_path):
    write_tensor(tmp_path / "t.fcdt", np.zeros((2, 3), np.float32))
    raw = (tmp_path / "t.fcdt").read_bytes()
    for name, data in (("magic", b"FCDX" + raw[4:]), ("short", raw[:-4]), ("long", raw + b"\0" * 4),
                       ("dims", raw[:8] + struct.pack("<2I", 2, 4) + raw[16:]), ("header", raw[:6])):
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError):
            read_tensor(tmp_path / name)


# -- generator ---------------------------------------------------------------------

def test_generate_deterministic():
    spec = DatasetSpec()
    a, ta = generate(spec, 17)
    b, tb = generate(spec, 17)
    assert a.tobytes() == b.tobytes() and ta == tb
    assert a.shape == (32, 32, 3) and a.dtype == np.uint8
    c, _ = generate(DatasetSpec(seed=1), 17)
    assert not np.array_equal(a, c)


def test_generate_index_range():
    spec = DatasetSpec(num_images=4)
    with pytest.raises(IndexError):
        generate(spec, 4)
    with pytest.raises(IndexError):
        generate(spec, -1)


def test_tokens_and_labels():
    spec = DatasetSpec()
    assert spec.vocab == 16 and len(PALETTES) >= 4 and len(SHAPES) >= 4
    for p in range(4):
        for s in range(4):
            assert labels_of(spec, token_of(spec, p, s)) == (p, s)
    _, tokens = generate_dataset(DatasetSpec(num_images=200))
    assert set(tokens.tolist()) == set(range(16))


def test_warm_images_red_over_blue():
    spec = DatasetSpec(num_images=50, palettes=("warm",))
    for i in range(spec.num_images):
        img, _ = generate(spec, i)
        assert img[..., 0].mean() > img[..., 2].mean()


def test_stripes_beat_gradient_in_high_band():
    spec = DatasetSpec(num_images=100, shapes=("stripes",))
    for i in range(spec.num_images):
        striped, _ = generate(spec, i)
        plain, _ = generate(spec, i, draw_shapes=False)
        assert band_energy(striped, "high") > band_energy(plain, "high")


def test_dataset_separability():
    spec = DatasetSpec(num_images=160)
    images, tokens = generate_dataset(spec)
    palettes, shapes = np.array([labels_of(spec, t) for t in tokens]).T
    mini = [band_energy(im, "mini") for im in images]
    assert variance_ratio(mini, palettes) > 1
    assert variance_ratio(high_band_share(images), shapes) > 1


def test_split_is_deterministic_and_disjoint():
    train, held = split_indices(512)
    assert len(set(train) & set(held)) == 0 and len(train) + len(held) == 512
    assert 32 <= len(held) <= 80
    assert np.array_equal(heldout_mask(512)[:100], heldout_mask(100))
