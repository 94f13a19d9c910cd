import gzip
import json

import numpy as np
import pytest
import torch

from uaprepair.data import (
    BlobConfig,
    DatasetError,
    LabeledDataset,
    _read_idx,
    generate_blobs,
    load_dataset,
    sample_clean_subset,
)


def _dataset_with_histogram(hist):
    labels = torch.cat([torch.full((c,), k) for k, c in enumerate(hist)])
    images = torch.zeros(len(labels), 1, 2, 2)
    return LabeledDataset(images, labels, len(hist), "train", "hist")


@pytest.mark.parametrize("hist, fraction, quota", [
    ([500, 300, 200], 0.05, [25, 15, 10]),
    # 50 slots over exact shares 16.65 / 16.65 / 16.70: floors 16 each, the two
    # leftover slots go to the largest remainders (class 2, then class 0)
    ([333, 333, 334], 0.05, [17, 16, 17]),
    ([100, 100, 100, 100], 0.01, [1, 1, 1, 1]),
])
def test_clean_subset_quotas(hist, fraction, quota):
    sub = sample_clean_subset(_dataset_with_histogram(hist), fraction, seed=0)
    assert sub.split_tag == "clean_subset"
    assert np.bincount(sub.labels.numpy(), minlength=len(hist)).tolist() == quota


def test_clean_subset_is_seeded_and_without_replacement():
    data = _dataset_with_histogram([400, 400])
    data.images = torch.arange(800, dtype=torch.float32).reshape(800, 1, 1, 1) / 800
    a = sample_clean_subset(data, 0.05, seed=1)
    b = sample_clean_subset(data, 0.05, seed=1)
    c = sample_clean_subset(data, 0.05, seed=2)
    assert torch.equal(a.images, b.images)
    assert not torch.equal(a.images, c.images)
    assert len(set(a.images.flatten().tolist())) == len(a)


def test_clean_subset_guards():
    data = _dataset_with_histogram([50, 50])
    with pytest.raises(ValueError):
        sample_clean_subset(data, 0.06, seed=0)
    with pytest.raises(ValueError):
        sample_clean_subset(data, 0.0, seed=0)
    with pytest.raises(ValueError, match="num_classes"):
        sample_clean_subset(_dataset_with_histogram([10, 10, 10]), 0.05, seed=0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(torch.zeros(2, 1, 2, 2), torch.tensor([0, 3]), 3)
    with pytest.raises(ValueError):
        LabeledDataset(torch.full((1, 1, 2, 2), 1.5), torch.tensor([0]), 1)
    with pytest.raises(ValueError):
        LabeledDataset(torch.zeros(1, 1, 2, 2), torch.tensor([0]), 1, split_tag="val")


def test_blobs_are_deterministic_balanced_and_in_range():
    cfg = BlobConfig(n_train=80, n_test=40, image_size=16)
    tr1, te1 = generate_blobs(cfg)
    tr2, _ = generate_blobs(cfg)
    assert torch.equal(tr1.images, tr2.images) and torch.equal(tr1.labels, tr2.labels)
    assert tr1.input_shape == (3, 16, 16) and len(te1) == 40
    assert np.bincount(tr1.labels.numpy()).tolist() == [20, 20, 20, 20]
    assert 0.0 <= float(tr1.images.min()) and float(tr1.images.max()) <= 1.0
    assert tr1.split_tag == "train" and te1.split_tag == "test"


def test_synthetic_cache_regenerates_on_parameter_change(tmp_path):
    cfg = BlobConfig(n_train=40, n_test=8, image_size=8)
    tr, _ = load_dataset("synthetic-blobs", tmp_path, cfg)
    meta = json.loads((tmp_path / "synthetic-blobs" / "metadata.json").read_text())
    assert meta["n_train"] == 40
    again, _ = load_dataset("synthetic-blobs", tmp_path, cfg)
    assert torch.equal(again.images, tr.images)
    bigger, _ = load_dataset("synthetic-blobs", tmp_path, BlobConfig(n_train=48, n_test=8, image_size=8))
    assert len(bigger) == 48


def test_missing_real_datasets_raise(tmp_path):
    with pytest.raises(DatasetError, match="CIFAR-10"):
        load_dataset("cifar10", tmp_path)
    with pytest.raises(DatasetError, match="MNIST"):
        load_dataset("mnist", tmp_path)
    with pytest.raises(ValueError):
        load_dataset("imagenet", tmp_path)


def _idx_bytes(arr):
    header = bytes([0, 0, 8, arr.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in arr.shape)
    return header + arr.astype(np.uint8).tobytes()


def test_idx_reader(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    (tmp_path / "a").write_bytes(_idx_bytes(arr))
    np.testing.assert_array_equal(_read_idx(tmp_path / "a"), arr)
    with gzip.open(tmp_path / "b.gz", "wb") as fh:
        fh.write(_idx_bytes(arr))
    np.testing.assert_array_equal(_read_idx(tmp_path / "b.gz"), arr)
    (tmp_path / "c").write_bytes(_idx_bytes(arr)[:-1])
    with pytest.raises(DatasetError, match="truncated"):
        _read_idx(tmp_path / "c")


def test_mnist_count_check(tmp_path):
    folder = tmp_path / "mnist"
    folder.mkdir()
    for prefix in ("train", "t10k"):
        (folder / f"{prefix}-images-idx3-ubyte").write_bytes(_idx_bytes(np.zeros((3, 28, 28))))
        (folder / f"{prefix}-labels-idx1-ubyte").write_bytes(_idx_bytes(np.zeros(3)))
    with pytest.raises(DatasetError, match="60000"):
        load_dataset("mnist", tmp_path)
