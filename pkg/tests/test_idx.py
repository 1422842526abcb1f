import gzip
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from permland.idx import (IMAGE_MAGIC, LABEL_MAGIC, IdxFormatError, IdxLengthError, encode_idx, load_idx,
                          load_mnist_pair, mean_pool, parse_idx, write_idx)

DATA = Path(__file__).parent / "data"
IMAGES = DATA / "tiny-images.idx3-ubyte"
LABELS = DATA / "tiny-labels.idx1-ubyte"


def test_fixture_parses_to_known_bytes():
    t = load_idx(IMAGES, IMAGE_MAGIC)
    assert t.magic == 0x00000803 and t.dims == (2, 2, 2)
    assert t.data.tolist() == [[[0, 255], [16, 32]], [[7, 8], [9, 200]]]
    lab = load_idx(LABELS, LABEL_MAGIC)
    assert lab.dims == (2,) and lab.data.tolist() == [3, 9]


def test_fixture_roundtrip_bit_exact(tmp_path):
    for src in (IMAGES, LABELS):
        raw = src.read_bytes()
        assert encode_idx(parse_idx(raw).data) == raw
        out = tmp_path / src.name
        write_idx(out, load_idx(src).data)
        assert out.read_bytes() == raw


def test_gzip(tmp_path):
    p = tmp_path / "x.idx3-ubyte.gz"
    p.write_bytes(gzip.compress(IMAGES.read_bytes()))
    assert np.array_equal(load_idx(p).data, load_idx(IMAGES).data)


def test_label_magic_rejected_by_image_loader():
    with pytest.raises(IdxFormatError):
        load_idx(LABELS, IMAGE_MAGIC)
    with pytest.raises(IdxFormatError):
        load_mnist_pair(LABELS, LABELS)


def test_malformed_headers():
    raw = IMAGES.read_bytes()
    with pytest.raises(IdxFormatError):
        parse_idx(b"\x01" + raw[1:])  # nonzero leading byte
    with pytest.raises(IdxFormatError):
        parse_idx(raw[:2] + b"\x0d" + raw[3:])  # float type code
    with pytest.raises(IdxFormatError):
        parse_idx(raw[:3] + b"\x02" + raw[4:], IMAGE_MAGIC)  # 2-d file where images are expected
    with pytest.raises(IdxFormatError):
        parse_idx(b"\x00\x00")


@pytest.mark.parametrize("cut", [1, 4, 8, 10])
def test_truncation_is_a_length_error(cut):
    raw = IMAGES.read_bytes()
    with pytest.raises(IdxLengthError):
        parse_idx(raw[:-cut])
    with pytest.raises(IdxLengthError):
        parse_idx(raw + b"\x00")


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 1000))
def test_encode_parse_roundtrip(shape, seed):
    data = np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)
    t = parse_idx(encode_idx(data))
    assert t.dims == tuple(shape) and np.array_equal(t.data, data)


def test_mean_pool_matches_loops():
    x = np.random.default_rng(0).random((3, 28, 28))
    for f in (2, 4):
        p = mean_pool(x, f)
        naive = np.empty((3, 28 // f, 28 // f))
        for n in range(3):
            for i in range(28 // f):
                for j in range(28 // f):
                    naive[n, i, j] = x[n, i * f:(i + 1) * f, j * f:(j + 1) * f].mean()
        assert np.allclose(p, naive, atol=1e-15)
    with pytest.raises(ValueError):
        mean_pool(x, 3)


def test_load_mnist_pair(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", np.array([0, 1, 2, 3, 9], dtype=np.uint8))
    d = load_mnist_pair(tmp_path / "i", tmp_path / "l", "4x", limit=4)
    assert d.inputs.shape == (4, 49) and d.targets.shape == (4, 10)
    assert d.inputs[0, 0] == pytest.approx(imgs[0, :4, :4].mean() / 255.0)
    assert d.labels.tolist() == [0, 1, 2, 3]
    assert np.all(d.targets.argmax(axis=1) == d.labels)
    full = load_mnist_pair(tmp_path / "i", tmp_path / "l", "none", limit=None)
    assert full.inputs.shape == (5, 784) and full.inputs.max() <= 1.0
    write_idx(tmp_path / "l2", np.array([0, 1], dtype=np.uint8))
    with pytest.raises(IdxLengthError):
        load_mnist_pair(tmp_path / "i", tmp_path / "l2")
    with pytest.raises(ValueError):
        load_mnist_pair(tmp_path / "i", tmp_path / "l", "3x")
