import gzip
import struct

import numpy as np
import pytest

from ccsnet.data import Dataset, load_dataset, load_idx, save_dataset, subset, write_idx
from ccsnet.errors import FormatError, LengthError


def _idx_pair(tmp_path, images, labels):
    ip, lp = tmp_path / "img", tmp_path / "lab"
    write_idx(images, labels, ip, lp)
    return ip, lp


def test_idx_known_bytes(tmp_path):
    # hand-built file: 2 images of 2x3, header bytes written independently
    pixels = bytes([0, 255, 51, 102, 153, 204, 255, 0, 0, 0, 0, 255])
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x803, 2, 2, 3) + pixels)
    (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 2) + bytes([7, 1]))
    data = load_idx(tmp_path / "i", tmp_path / "l")
    assert data.inputs.shape == (2, 6)
    np.testing.assert_allclose(data.inputs[0], [-0.5, 0.5, -0.3, -0.1, 0.1, 0.3], atol=1e-15)
    assert data.labels.tolist() == [7, 1]


def test_idx_roundtrip_and_gzip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 4, 4), dtype=np.uint8)
    labels = np.array([0, 1, 2, 9, 3], dtype=np.uint8)
    ip, lp = _idx_pair(tmp_path, images, labels)
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    a, b = load_idx(ip, lp), load_idx(gz, lp)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.inputs, images.reshape(5, -1) / 255.0 - 0.5)


def test_idx_bad_magic_reports_value(tmp_path):
    ip, lp = _idx_pair(tmp_path, np.zeros((1, 2, 2), np.uint8), np.zeros(1, np.uint8))
    with pytest.raises(FormatError, match="0x00000801"):
        load_idx(lp, lp)


def test_idx_truncated(tmp_path):
    ip, lp = _idx_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(3, np.uint8))
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(LengthError):
        load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, _ = _idx_pair(tmp_path, np.zeros((3, 2, 2), np.uint8), np.zeros(3, np.uint8))
    write_idx(np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8), tmp_path / "x", tmp_path / "y")
    with pytest.raises(FormatError):
        load_idx(ip, tmp_path / "y")


def _labels_data(counts):
    labels = np.repeat(np.arange(len(counts)), counts)
    return Dataset(np.arange(labels.size, dtype=float)[:, None], labels, len(counts))


def test_subset_stratified_counts():
    data = _labels_data([50, 30, 20])
    sub = subset(data, 10, seed=1)
    assert np.bincount(sub.labels).tolist() == [5, 3, 2]
    assert np.unique(sub.inputs).size == 10


def test_subset_every_class_and_deterministic():
    data = _labels_data([97, 1, 2])
    a, b = subset(data, 5, seed=3), subset(data, 5, seed=3)
    assert set(a.labels) == {0, 1, 2}
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert not np.array_equal(a.inputs, subset(data, 5, seed=4).inputs)


def test_subset_full_and_errors():
    data = _labels_data([4, 4])
    assert sorted(subset(data, 8).inputs[:, 0]) == list(range(8))
    with pytest.raises(ValueError):
        subset(data, 9)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0]), 3)


def test_dsb_roundtrip(tmp_path):
    data = _labels_data([3, 2])
    save_dataset(data, tmp_path / "d.dsb")
    back = load_dataset(tmp_path / "d.dsb")
    np.testing.assert_array_equal(back.inputs, data.inputs)
    np.testing.assert_array_equal(back.labels, data.labels)
    assert back.n_classes == 2


def test_dsb_corrupt(tmp_path):
    data = _labels_data([3, 2])
    save_dataset(data, tmp_path / "d.dsb")
    raw = (tmp_path / "d.dsb").read_bytes()
    (tmp_path / "t.dsb").write_bytes(raw[:-3])
    with pytest.raises(LengthError):
        load_dataset(tmp_path / "t.dsb")
    (tmp_path / "m.dsb").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "m.dsb")
