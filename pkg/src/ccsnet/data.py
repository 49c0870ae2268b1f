"""Dataset container, MNIST IDX parsing, subsetting and a small binary cache.

Pixels are mapped to ``byte / 255 - 0.5`` so every MNIST input lies in
``[-0.5, 0.5]``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ccsnet.errors import FormatError, LengthError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DSB_MAGIC = b"DSB1"
DSB_VERSION = 1

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ValueError(
                f"{inputs.shape[0]} inputs but labels have shape {labels.shape}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise LengthError(f"{what}: file is {len(raw)} bytes, too short for a header")
    observed = struct.unpack(">I", raw[:4])[0]
    if observed != magic:
        raise FormatError(f"{what}: expected magic 0x{magic:08x}, got 0x{observed:08x}")
    ndim = observed & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise LengthError(
            f"{what}: header declares {count} bytes of data, file holds {len(raw) - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped) into a Dataset."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0 - 0.5
    return Dataset(inputs, labels.astype(np.int64), n_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ValueError("images must be a uint8 array of shape (n, rows, cols)")
    if labels.shape != (images.shape[0],):
        raise ValueError("labels must be a vector with one entry per image")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(np.ascontiguousarray(images).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def find_mnist(directory, split: str) -> tuple[Path, Path]:
    """Locate the standard MNIST file pair for ``split`` in ``directory``."""
    directory = Path(directory)
    found = []
    for stem in MNIST_FILES[split]:
        for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            if (directory / candidate).exists():
                found.append(directory / candidate)
                break
        else:
            raise FileNotFoundError(f"no {stem}[.gz] in {directory}")
    return found[0], found[1]


def load_mnist(directory, split: str = "train") -> Dataset:
    return load_idx(*find_mnist(directory, split))


def subset(data: Dataset, n: int, seed: int = 0, stratify: bool = True) -> Dataset:
    """Seeded sample of ``n`` rows without replacement.

    With ``stratify`` and ``n`` at least the number of classes present, each
    present class gets one sample first and the remainder is split in
    proportion to class frequency (largest remainder).
    """
    total = len(data)
    if n < 0 or n > total:
        raise ValueError(f"cannot take {n} samples from a dataset of {total}")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(data.labels, return_counts=True)
    if not stratify or n < classes.size:
        return data.take(rng.permutation(total)[:n])

    alloc = np.ones_like(counts)
    spare = counts - 1
    remaining = n - classes.size
    if remaining:
        share = remaining * spare / spare.sum()
        extra = np.minimum(np.floor(share).astype(np.int64), spare)
        short = remaining - extra.sum()
        order = np.lexsort((np.arange(classes.size), -(share - extra)))
        for c in order:
            if short == 0:
                break
            if extra[c] < spare[c]:
                extra[c] += 1
                short -= 1
        alloc += extra

    picked = []
    for cls, m in zip(classes, alloc):
        members = np.flatnonzero(data.labels == cls)
        picked.append(members[rng.permutation(members.size)[:m]])
    idx = np.concatenate(picked)
    return data.take(idx[rng.permutation(idx.size)])


def save_dataset(data: Dataset, path) -> None:
    """Write the little-endian ``DSB1`` cache format."""
    n, d = data.inputs.shape
    with open(path, "wb") as fh:
        fh.write(DSB_MAGIC)
        fh.write(struct.pack("<IQII", DSB_VERSION, n, d, data.n_classes))
        fh.write(data.inputs.astype("<f8").tobytes())
        fh.write(data.labels.astype("<i8").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DSB_MAGIC:
        raise FormatError(f"{path}: expected magic {DSB_MAGIC!r}, got {raw[:4]!r}")
    head = struct.calcsize("<IQII")
    if len(raw) < 4 + head:
        raise LengthError(f"{path}: truncated header")
    version, n, d, n_classes = struct.unpack("<IQII", raw[4 : 4 + head])
    if version != DSB_VERSION:
        raise FormatError(f"{path}: unsupported DSB version {version}")
    offset = 4 + head
    if len(raw) != offset + 8 * n * d + 8 * n:
        raise LengthError(f"{path}: payload size does not match header ({n}x{d})")
    inputs = np.frombuffer(raw, dtype="<f8", count=n * d, offset=offset).reshape(n, d)
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=offset + 8 * n * d)
    return Dataset(inputs.astype(np.float64), labels.astype(np.int64), n_classes)


def write_mnist_sample(out_dir, n_test: int = 1000) -> tuple[int, int]:
    """Write IDX files from the 5,000-digit MNIST sample shipped with mlxtend.

    The sample is ordered by class, so the split is taken per class: the last
    ``n_test / 10`` rows of every digit go to the test files. Returns the
    (train, test) sizes.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    images = x.astype(np.uint8).reshape(-1, 28, 28)
    labels = y.astype(np.uint8)
    classes = np.unique(labels)
    per_class = n_test // classes.size
    is_test = np.zeros(labels.size, dtype=bool)
    for cls in classes:
        is_test[np.flatnonzero(labels == cls)[-per_class:]] = True
    os.makedirs(out_dir, exist_ok=True)
    out_dir = Path(out_dir)
    for split, mask in (("train", ~is_test), ("test", is_test)):
        img_name, lab_name = MNIST_FILES[split]
        write_idx(images[mask], labels[mask], out_dir / img_name, out_dir / lab_name)
    return int((~is_test).sum()), int(is_test.sum())
