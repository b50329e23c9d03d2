import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import cifar_record
from rocl import data as D


@pytest.fixture
def two_records(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(cifar_record(3, lambda c, y, x: (c * 80 + y + x) % 256)
                     + cifar_record(9, lambda c, y, x: 255 if c == 2 else 0))
    return path


def test_cifar_binary_parses(two_records):
    ds = D.load_cifar10_binary(two_records)
    assert ds.images.shape == (2, 3, 32, 32) and ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.labels, [3, 9])
    assert ds.images[0, 1, 2, 5] == np.float32((80 + 2 + 5) / 255)
    np.testing.assert_array_equal(ds.images[1, 2], 1.0)
    np.testing.assert_array_equal(ds.images[1, :2], 0.0)
    assert ds.num_classes == 10


def test_cifar_multiple_files(two_records):
    ds = D.load_cifar10_binary([two_records, two_records])
    np.testing.assert_array_equal(ds.labels, [3, 9, 3, 9])


def test_cifar_truncated_names_offset(two_records):
    two_records.write_bytes(two_records.read_bytes()[:-100])
    with pytest.raises(D.DatasetFormatError, match="byte offset 3073"):
        D.load_cifar10_binary(two_records)


def test_cifar_bad_label(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(cifar_record(1, lambda *a: 0) + cifar_record(12, lambda *a: 0))
    with pytest.raises(D.DatasetFormatError, match="label byte 12 > 9 at byte offset 3073"):
        D.load_cifar10_binary(p)


def test_cifar_write_roundtrip(two_records, tmp_path):
    ds = D.load_cifar10_binary(two_records)
    D.write_cifar10_binary(ds, tmp_path / "copy.bin")
    assert (tmp_path / "copy.bin").read_bytes() == two_records.read_bytes()


def test_dataset_dir_roundtrip_bit_exact(tmp_path):
    ds = D.generate_toy_dataset(2, 5, 8, seed=1)
    D.save_dataset(ds, tmp_path / "a")
    back = D.load_dataset(tmp_path / "a")
    assert back.images.tobytes() == ds.images.tobytes() and back.images.dtype == ds.images.dtype
    assert np.array_equal(back.labels, ds.labels) and back.num_classes == 2 and back.name == "toy"
    D.save_dataset(back, tmp_path / "b")
    for f in ("images.npy", "labels.npy", "meta.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_unlabeled_dataset_roundtrip(tmp_path):
    ds = D.generate_toy_dataset(2, 3, 8, seed=1).unlabeled()
    D.save_dataset(ds, tmp_path)
    assert D.load_dataset(tmp_path).labels is None


def test_load_dataset_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_dataset(tmp_path / "nope")


def test_toy_generator_properties():
    ds = D.generate_toy_dataset(classes=3, samples_per_class=20, image_size=16, seed=5)
    assert ds.images.shape == (60, 3, 16, 16) and ds.images.dtype == np.float32
    assert np.bincount(ds.labels).tolist() == [20, 20, 20]
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    np.testing.assert_allclose(ds.images * 255, np.rint(ds.images * 255), atol=1e-4)
    same = D.generate_toy_dataset(classes=3, samples_per_class=20, image_size=16, seed=5)
    assert same.images.tobytes() == ds.images.tobytes()
    other = D.generate_toy_dataset(classes=3, samples_per_class=20, image_size=16, seed=6)
    assert other.images.tobytes() != ds.images.tobytes()


def test_toy_classes_limit():
    with pytest.raises(ValueError):
        D.generate_toy_dataset(classes=len(D.SHAPES) + 1, samples_per_class=1)


@given(st.sampled_from(D.SHAPES), st.floats(3, 6))
def test_every_shape_marks_pixels(kind, r):
    grid = np.arange(16) + 0.5 - 8
    mask = D._shape_mask(kind, grid[:, None], grid[None, :], r, 1.5)
    assert 0 < mask.sum() < mask.size


def test_split():
    ds = D.generate_toy_dataset(2, 10, 8, seed=0)
    tr, te = D.train_test_split(ds, 4)
    assert (len(tr), len(te), te.split) == (16, 4, "test")
    np.testing.assert_array_equal(te.images, ds.images[16:])
    with pytest.raises(ValueError):
        D.train_test_split(ds, 0)


@pytest.mark.parametrize("kwargs", [
    {"images": np.zeros((2, 3, 4))},
    {"images": np.full((1, 1, 2, 2), 1.5)},
    {"images": np.zeros((2, 1, 2, 2)), "labels": [0]},
    {"images": np.zeros((2, 1, 2, 2)), "labels": [0, 3], "num_classes": 2},
])
def test_dataset_validation(kwargs):
    with pytest.raises(ValueError):
        D.Dataset(**kwargs)
