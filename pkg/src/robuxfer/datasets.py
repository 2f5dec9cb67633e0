"""Labeled image datasets: loading, synthesis, partitioning and preprocessing.

Images are float arrays ``[N, C, H, W]`` with values in ``[0, 1]``; labels
are dense integer class ids.
"""
from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import UsageError, make_rng


class FormatError(ValueError):
    """A data file does not match its declared binary layout."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: list | None = None
    split_tag: str = "train"
    ids: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise UsageError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.uint64)
        if self.num_classes is None:
            self.num_classes = len(self.class_names) if self.class_names else (
                int(self.labels.max()) + 1 if len(self.labels) else 0)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, idx, split_tag: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx], ids=self.ids[idx],
                       split_tag=split_tag or self.split_tag)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class SubsetSpec:
    class_fraction: float = 1.0
    per_class_count: int | str = "all"
    seed: int = 0


@dataclass
class ClassSplit:
    """Class-id mapping produced by :func:`split_classes`, reusable on other splits."""

    a_classes: list[int]
    b_classes: list[int]
    num_classes: int = field(default=0)

    def apply(self, d: Dataset) -> tuple[Dataset, Dataset]:
        return _select_classes(d, self.a_classes), _select_classes(d, self.b_classes)


# --------------------------------------------------------------------------
# loaders

def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX (MNIST-family) file of unsigned bytes into an array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise FormatError(f"{path}: bad IDX magic")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(shape, dtype=np.int64))
    body = raw[4 + 4 * ndim:]
    if len(body) != count:
        raise FormatError(f"{path}: expected {count} bytes of data, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    blob = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(blob)


def load_idx(images_path, labels_path, split_tag: str = "train") -> Dataset:
    """IDX image + label files (optionally gzipped) as a ``[N,1,H,W]`` dataset."""
    imgs = read_idx(images_path)
    labels = read_idx(labels_path)
    if imgs.ndim != 3:
        raise FormatError(f"{images_path}: expected a 3-d image array, got rank {imgs.ndim}")
    if labels.ndim != 1 or len(labels) != len(imgs):
        raise FormatError(f"label count {labels.shape} does not match image count {len(imgs)}")
    images = (imgs.astype(np.float32) / 255.0)[:, None]
    return Dataset(images, labels.astype(np.int64), split_tag=split_tag,
                   num_classes=int(labels.max()) + 1 if len(labels) else 0)


def load_cifar_binary(path, coarse: bool = False, split_tag: str = "train") -> Dataset:
    """CIFAR-10 (3073-byte records) or CIFAR-100 (3074-byte records).

    ``path`` is a ``.bin`` file or a directory of them. CIFAR-100 is detected
    by a ``cifar100`` hint in the path or by a record length that only 3074
    divides; its fine label is used unless ``coarse`` is set.
    """
    files = sorted(os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin")) \
        if os.path.isdir(path) else [path]
    files = [f for f in files if "meta" not in os.path.basename(f)]
    blobs = []
    for f in files:
        with open(f, "rb") as fh:
            blobs.append(fh.read())
    raw = b"".join(blobs)
    hint100 = "100" in os.path.basename(os.path.normpath(str(path)))
    if hint100 or (len(raw) % 3073 and not len(raw) % 3074):
        rec, nlab = 3074, 2
    else:
        rec, nlab = 3073, 1
    if len(raw) % rec:
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of the {rec}-byte record")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0] if (nlab == 1 or coarse) else arr[:, 1]
    images = arr[:, nlab:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels.astype(np.int64), split_tag=split_tag,
                   num_classes=100 if (nlab == 2 and not coarse) else (20 if coarse else 10))


def encode_cifar_records(images: np.ndarray, labels: np.ndarray, coarse: np.ndarray | None = None) -> bytes:
    """Inverse of :func:`load_cifar_binary` for uint8 ``[N,3,32,32]`` images."""
    out = []
    for i in range(len(labels)):
        head = bytes([int(coarse[i]), int(labels[i])]) if coarse is not None else bytes([int(labels[i])])
        out.append(head + np.asarray(images[i], dtype=np.uint8).tobytes())
    return b"".join(out)


def synth_blobs(classes: int, dim: tuple[int, int, int], per_class: int, separation: float = 1.0,
                noise: float = 0.1, seed: int = 0) -> Dataset:
    """Gaussian clusters around class means, clipped to [0, 1].

    Class means are drawn uniformly in ``[0.5 - separation/2, 0.5 + separation/2]``
    per pixel (clipped to [0, 1]), so larger ``separation`` spreads them apart.
    """
    if separation <= 0:
        raise UsageError("separation must be positive")
    rng = make_rng(seed, "synth_blobs")
    lo, hi = max(0.0, 0.5 - separation / 2), min(1.0, 0.5 + separation / 2)
    means = rng.uniform(lo, hi, size=(classes,) + tuple(dim))
    labels = np.repeat(np.arange(classes), per_class)
    images = means[labels] + noise * rng.standard_normal((len(labels),) + tuple(dim))
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels, num_classes=classes)


# --------------------------------------------------------------------------
# partitioning

def _select_classes(d: Dataset, classes: list[int]) -> Dataset:
    mapping = {c: i for i, c in enumerate(classes)}
    idx = np.flatnonzero(np.isin(d.labels, classes))
    out = d.take(idx)
    out.labels = np.array([mapping[int(c)] for c in out.labels], dtype=np.int64)
    out.num_classes = len(classes)
    if d.class_names:
        out.class_names = [d.class_names[c] for c in classes]
    return out


def split_classes(d: Dataset, spec: SubsetSpec) -> tuple[Dataset, Dataset, ClassSplit]:
    """Partition classes at random into A (``ceil(fraction * C)`` classes) and B (the rest).

    Labels are re-indexed densely from 0 in each part, in increasing order of
    original class id. The returned :class:`ClassSplit` applies the same
    partition to other splits of the dataset.
    """
    if not 0.0 < spec.class_fraction < 1.0:
        raise UsageError("class_fraction must lie strictly between 0 and 1")
    C = d.num_classes
    n_a = math.ceil(spec.class_fraction * C)
    if n_a >= C:
        raise UsageError(f"fraction {spec.class_fraction} leaves no classes for B")
    perm = make_rng(spec.seed, "split_classes").permutation(C)
    a = sorted(int(c) for c in perm[:n_a])
    b = sorted(int(c) for c in perm[n_a:])
    cs = ClassSplit(a, b, C)
    da, db = cs.apply(d)
    return da, db, cs


def subsample_per_class(d: Dataset, n: int | str, seed: int = 0) -> Dataset:
    """Exactly ``n`` random samples of every class, deterministically shuffled."""
    counts = d.class_counts()
    if n == "all":
        n = None
    elif n < 1 or n > counts.min():
        raise UsageError(f"cannot take {n} per class; smallest class has {counts.min()}")
    rng = make_rng(seed, "subsample")
    idx = []
    for c in range(d.num_classes):
        members = np.flatnonzero(d.labels == c)
        idx.append(members if n is None else rng.choice(members, size=n, replace=False))
    idx = np.concatenate(idx)
    return d.take(idx[rng.permutation(len(idx))])


def train_val_split(d: Dataset, val_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split into disjoint train and val parts."""
    rng = make_rng(seed, "train_val")
    tr, va = [], []
    for c in range(d.num_classes):
        members = rng.permutation(np.flatnonzero(d.labels == c))
        k = int(round(val_fraction * len(members)))
        va.append(members[:k])
        tr.append(members[k:])
    tr, va = np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))
    return d.take(tr, "train"), d.take(va, "val")


def apply_subset(d: Dataset, spec: SubsetSpec) -> Dataset:
    if spec.per_class_count == "all":
        return d
    return subsample_per_class(d, spec.per_class_count, spec.seed)


# --------------------------------------------------------------------------
# preprocessing

def augment(batch: np.ndarray, pad: int = 4, flip: bool = True, seed: int = 0,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Reflect-pad, random crop back to size, and random horizontal flip (p=0.5)."""
    if pad < 0:
        raise UsageError("pad must be >= 0")
    if pad == 0 and not flip:
        return batch
    rng = rng or make_rng(seed, "augment")
    B, C, H, W = batch.shape
    out = np.empty_like(batch)
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect") if pad else batch
    oy = rng.integers(0, 2 * pad + 1, size=B)
    ox = rng.integers(0, 2 * pad + 1, size=B)
    flips = rng.random(B) < 0.5 if flip else np.zeros(B, dtype=bool)
    for i in range(B):
        crop = padded[i, :, oy[i]:oy[i] + H, ox[i]:ox[i] + W]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def upsample(batch: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour enlargement by an integer factor."""
    if int(factor) != factor or factor < 1:
        raise UsageError("upsample factor must be an integer >= 1")
    if factor == 1:
        return batch
    return np.repeat(np.repeat(batch, factor, axis=-2), factor, axis=-1)


def iterate_minibatches(n: int, batch_size: int, seed: int, epoch: int):
    """Index batches over a fresh permutation; the last short batch is dropped when ``n >= batch_size``."""
    perm = make_rng(seed, "shuffle", epoch).permutation(n)
    stop = n - n % batch_size if n >= batch_size else n
    for i in range(0, max(stop, 1), batch_size):
        chunk = perm[i:i + batch_size]
        if len(chunk):
            yield chunk


# --------------------------------------------------------------------------
# bundled digit data

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))), "data")


def digits_paths(data_dir: str | None = None) -> tuple[str, str]:
    root = data_dir or os.environ.get("ROBUXFER_DATA", DATA_DIR)
    return (os.path.join(root, "digits5k-images-idx3-ubyte.gz"),
            os.path.join(root, "digits5k-labels-idx1-ubyte.gz"))


def load_digits(data_dir: str | None = None) -> Dataset:
    """The 5000-image MNIST subset shipped under ``data/`` (500 per digit)."""
    return load_idx(*digits_paths(data_dir))
