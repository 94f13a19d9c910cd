"""Dataset loading, the synthetic blob generator and clean-subset sampling.

All images are float32 tensors shaped ``(N, C, H, W)`` with pixels in [0, 1].
"""

from __future__ import annotations

import gzip
import json
import logging
import math
import pickle
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "test", "clean_subset")
DATASETS = ("mnist", "cifar10", "synthetic-blobs")
MAX_CLEAN_FRACTION = 0.05


class DatasetError(IOError):
    """Raised when dataset files are missing, corrupt or unknown."""


@dataclass
class LabeledDataset:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    split_tag: str = "train"
    name: str = ""

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        if self.images.ndim != 4:
            raise ValueError(f"images must be 4-D (N, C, H, W), got shape {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree on count")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")
        if len(self.images) and (float(self.images.min()) < 0.0 or float(self.images.max()) > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split_tag=None) -> "LabeledDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.num_classes, split_tag or self.split_tag, self.name
        )

    def batches(self, batch_size: int, generator: torch.Generator | None = None):
        """Yield ``(images, labels)`` minibatches, shuffled when a generator is given."""
        n = len(self)
        order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


# --------------------------------------------------------------------------- synthetic


@dataclass
class BlobConfig:
    """Parameters of the synthetic Gaussian-blob dataset.

    Every class owns a coloured Gaussian blob near a fixed center (jittered
    per sample). On top sits a faint tiled texture drawn from a bank of one
    texture per class; with probability ``texture_agreement`` a sample
    carries its own class texture, otherwise a uniformly random one. The
    blob survives small perturbations, the texture does not.
    """

    num_classes: int = 4
    image_size: int = 32
    channels: int = 3
    n_train: int = 2000
    n_test: int = 400
    blob_amplitude: float = 0.3
    blob_sigma: float = 3.0
    jitter: int = 4
    texture_amplitude: float = 0.03
    texture_tile: int = 4
    texture_agreement: float = 1.0
    noise: float = 0.2
    background: float = 0.5
    seed: int = 0
    centers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.centers:
            self.centers = default_centers(self.num_classes, self.image_size)
        self.centers = [tuple(int(v) for v in c) for c in self.centers]
        if len(self.centers) != self.num_classes:
            raise ValueError("need one blob center per class")
        if not 0.0 <= self.texture_agreement <= 1.0:
            raise ValueError("texture_agreement must lie in [0, 1]")

    def to_dict(self):
        d = dict(self.__dict__)
        d["centers"] = [list(c) for c in self.centers]
        return d


def default_centers(num_classes: int, size: int) -> list[tuple[int, int]]:
    if num_classes == 4:
        q, r = size // 4, 3 * size // 4
        return [(q, q), (q, r), (r, q), (r, r)]
    rad = size / 3
    return [
        (int(round(size / 2 + rad * math.sin(2 * math.pi * k / num_classes))),
         int(round(size / 2 + rad * math.cos(2 * math.pi * k / num_classes))))
        for k in range(num_classes)
    ]


def class_colours(num_classes: int, channels: int) -> np.ndarray:
    """Signed unit colour per class; distinct sign patterns first."""
    if channels == 1:
        return np.ones((num_classes, 1), dtype=np.float32)
    codes = [[(k >> b) & 1 for b in range(channels)] for k in range(1, 2 ** channels)]
    codes.sort(key=lambda c: (sum(c) != 1, c))
    cols = np.asarray([[1.0 if b else -1.0 for b in c] for c in codes], dtype=np.float32)
    return cols[np.arange(num_classes) % len(cols)]


def generate_blobs(cfg: BlobConfig) -> tuple[LabeledDataset, LabeledDataset]:
    rng = np.random.default_rng(cfg.seed)
    c, s, t = cfg.channels, cfg.image_size, cfg.texture_tile
    tiles = np.sign(rng.standard_normal((cfg.num_classes, c, t, t))).astype(np.float32)
    reps = s // t + 2
    tiled = np.tile(tiles, (1, 1, reps, reps))
    colours = class_colours(cfg.num_classes, c)
    yy, xx = np.meshgrid(np.arange(s, dtype=np.float32), np.arange(s, dtype=np.float32), indexing="ij")

    def make(n, split):
        labels = np.arange(n) % cfg.num_classes
        rng.shuffle(labels)
        centers = np.asarray(cfg.centers, dtype=np.float32)[labels]
        jit = rng.integers(-cfg.jitter, cfg.jitter + 1, size=(n, 2)).astype(np.float32)
        amp = cfg.blob_amplitude * (0.7 + 0.6 * rng.random(n, dtype=np.float32))
        cy = (centers[:, 0] + jit[:, 0])[:, None, None]
        cx = (centers[:, 1] + jit[:, 1])[:, None, None]
        blob = amp[:, None, None] * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * cfg.blob_sigma ** 2))
        x = np.full((n, c, s, s), cfg.background, dtype=np.float32)
        x += blob[:, None] * colours[labels][:, :, None, None]
        agree = rng.random(n) < cfg.texture_agreement
        tex_id = np.where(agree, labels, rng.integers(0, cfg.num_classes, size=n))
        phase = rng.integers(0, t, size=(n, 2))
        for i in range(n):
            py, px = phase[i]
            x[i] += cfg.texture_amplitude * tiled[tex_id[i], :, py:py + s, px:px + s]
        x += cfg.noise * rng.standard_normal(x.shape, dtype=np.float32)
        x = np.clip(x, 0.0, 1.0).astype(np.float32)
        return LabeledDataset(torch.from_numpy(x), torch.from_numpy(labels.astype(np.int64)),
                              cfg.num_classes, split, "synthetic-blobs")

    train = make(cfg.n_train, "train")
    test = make(cfg.n_test, "test")
    return train, test


def _load_synthetic(root: Path, cfg: BlobConfig | None):
    cfg = cfg or BlobConfig()
    folder = root / "synthetic-blobs"
    meta_path = folder / "metadata.json"
    cache = folder / "blobs.npz"
    if meta_path.exists() and cache.exists():
        try:
            cached_meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"corrupt metadata file {meta_path}: {exc}") from exc
        if cached_meta == cfg.to_dict():
            try:
                with np.load(cache) as z:
                    arrays = {k: z[k] for k in z.files}
            except (OSError, ValueError) as exc:
                raise DatasetError(f"corrupt dataset cache {cache}: {exc}") from exc
            train = LabeledDataset(torch.from_numpy(arrays["train_x"]), torch.from_numpy(arrays["train_y"]),
                                   cfg.num_classes, "train", "synthetic-blobs")
            test = LabeledDataset(torch.from_numpy(arrays["test_x"]), torch.from_numpy(arrays["test_y"]),
                                  cfg.num_classes, "test", "synthetic-blobs")
            return train, test
        log.info("synthetic-blobs parameters changed, regenerating cache at %s", folder)
    train, test = generate_blobs(cfg)
    folder.mkdir(parents=True, exist_ok=True)
    np.savez(cache, train_x=train.images.numpy(), train_y=train.labels.numpy(),
             test_x=test.images.numpy(), test_y=test.labels.numpy())
    meta_path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return train, test


# --------------------------------------------------------------------------- real datasets


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 8:
        raise DatasetError(f"{path} is not an unsigned-byte IDX file")
    ndim = raw[3]
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise DatasetError(f"{path} is truncated")
    return body.reshape(dims)


def _find(folder: Path, stem: str) -> Path:
    for cand in (folder / stem, folder / f"{stem}.gz", folder / "raw" / stem, folder / "raw" / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise DatasetError(
        f"missing {stem} under {folder}; place the standard MNIST IDX files there (gzipped or not)"
    )


def _load_mnist(root: Path):
    folder = root / "mnist"
    parts = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        x = _read_idx(_find(folder, f"{prefix}-images-idx3-ubyte"))
        y = _read_idx(_find(folder, f"{prefix}-labels-idx1-ubyte"))
        images = torch.from_numpy(x.astype(np.float32) / 255.0).unsqueeze(1)
        parts[split] = LabeledDataset(images, torch.from_numpy(y.astype(np.int64)), 10, split, "mnist")
    _check_counts(parts, 60000, 10000, "mnist")
    return parts["train"], parts["test"]


def _load_cifar10(root: Path):
    folder = root / "cifar10"
    batch_dir = folder / "cifar-10-batches-py"
    if not batch_dir.exists():
        archive = folder / "cifar-10-python.tar.gz"
        if not archive.exists():
            raise DatasetError(
                f"missing CIFAR-10 under {folder}; expected cifar-10-batches-py/ or cifar-10-python.tar.gz"
            )
        try:
            with tarfile.open(archive) as tar:
                tar.extractall(folder, filter="data")
        except (tarfile.TarError, OSError) as exc:
            raise DatasetError(f"corrupt archive {archive}: {exc}") from exc

    def read(names, split):
        xs, ys = [], []
        for name in names:
            path = batch_dir / name
            try:
                with open(path, "rb") as fh:
                    batch = pickle.load(fh, encoding="latin1")
            except (OSError, pickle.UnpicklingError, EOFError) as exc:
                raise DatasetError(f"cannot read CIFAR-10 batch {path}: {exc}") from exc
            xs.append(np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(batch["labels"], dtype=np.int64))
        x = torch.from_numpy(np.concatenate(xs).astype(np.float32) / 255.0)
        return LabeledDataset(x, torch.from_numpy(np.concatenate(ys)), 10, split, "cifar10")

    parts = {
        "train": read([f"data_batch_{i}" for i in range(1, 6)], "train"),
        "test": read(["test_batch"], "test"),
    }
    _check_counts(parts, 50000, 10000, "cifar10")
    return parts["train"], parts["test"]


def _check_counts(parts, n_train, n_test, name):
    got = (len(parts["train"]), len(parts["test"]))
    if got != (n_train, n_test):
        raise DatasetError(f"{name}: expected {n_train}/{n_test} train/test samples, found {got[0]}/{got[1]}")


def load_dataset(name: str, root, blob_config: BlobConfig | None = None):
    """Return ``(train, test)`` for one of :data:`DATASETS`.

    Real datasets are read from ``<root>/<name>/`` and never downloaded
    implicitly; a missing or damaged file raises :class:`DatasetError`.
    """
    root = Path(root)
    if name == "synthetic-blobs":
        return _load_synthetic(root, blob_config)
    if name == "mnist":
        return _load_mnist(root)
    if name == "cifar10":
        return _load_cifar10(root)
    raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")


def sample_clean_subset(train: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Draw a stratified ``fraction`` of ``train`` for the defender.

    The per-class quota is the largest-remainder apportionment of
    ``round(fraction * len(train))`` over the class histogram, so every class
    gets within one sample of its proportional share.
    """
    n = len(train)
    if n == 0:
        raise ValueError("empty training set")
    if not 0 < fraction <= MAX_CLEAN_FRACTION:
        raise ValueError(f"fraction must lie in (0, {MAX_CLEAN_FRACTION}], got {fraction}")
    total = int(round(fraction * n))
    if total < train.num_classes:
        raise ValueError(f"fraction*count = {fraction * n:.1f} is below num_classes={train.num_classes}")

    labels = train.labels.numpy()
    rng = np.random.default_rng(seed)
    classes = np.arange(train.num_classes)
    counts = np.bincount(labels, minlength=train.num_classes)
    exact = counts / n * total
    quota = np.floor(exact).astype(int)
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[: total - quota.sum()]] += 1
    quota = np.minimum(quota, counts)

    chosen = []
    for k in classes:
        pool = np.flatnonzero(labels == k)
        chosen.append(rng.choice(pool, size=quota[k], replace=False))
    idx = np.sort(np.concatenate(chosen))
    return train.subset(idx, split_tag="clean_subset")
