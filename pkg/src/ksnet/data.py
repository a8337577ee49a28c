"""Dataset decoding (IDX and CIFAR binaries), synthesis, and batching.

Decoders are bit-exact and fail with :class:`FormatError` carrying the byte
offset of the problem. Loaded pixels are scaled to [0, 1] and normalized with
per-dataset channel statistics; synthetic datasets are generated already in
unit scale.
"""

import gzip
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence, Tuple

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .rng import StreamHub
from .tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

NORM_STATS = {
    "mnist": ((0.1307,), (0.3081,)),
    "fmnist": ((0.2860,), (0.3530,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}


@dataclass
class Dataset:
    images: np.ndarray          # [N, C, H, W] float32, normalized
    labels: np.ndarray          # [N] int64
    num_classes: int
    split: str
    mean: Tuple[float, ...] = (0.0,)
    std: Tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise DataError(f"label {self.labels.max()} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class BatchPlan:
    batch_size: int
    seed: int = 0
    drop_last: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")


def normalize(pixels: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """u8 pixels [N, C, H, W] -> float32 in normalized range."""
    x = pixels.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return (x - m) / s


def denormalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return images * s + m


def _read_file(path: str) -> bytes:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def _u32(blob: bytes, offset: int, what: str) -> int:
    if offset + 4 > len(blob):
        raise FormatError(f"truncated while reading {what}", len(blob))
    return struct.unpack_from(">I", blob, offset)[0]


def load_idx(images_path: str, labels_path: str, dataset: str = "mnist",
             num_classes: int = 10, split: str = "train") -> Dataset:
    """Decode an IDX image/label file pair (big-endian, u8 payload)."""
    img = _read_file(images_path)
    magic = _u32(img, 0, "image magic")
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(
            f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}", 0)
    n = _u32(img, 4, "image count")
    h = _u32(img, 8, "image rows")
    w = _u32(img, 12, "image cols")
    need = 16 + n * h * w
    if len(img) < need:
        raise FormatError(f"image payload needs {need} bytes, file has {len(img)}",
                          len(img))
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * h * w, offset=16)

    lab = _read_file(labels_path)
    lmagic = _u32(lab, 0, "label magic")
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(
            f"bad label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}", 0)
    ln = _u32(lab, 4, "label count")
    if ln != n:
        raise FormatError(f"label count {ln} != image count {n}", 4)
    if len(lab) < 8 + ln:
        raise FormatError(f"label payload needs {8 + ln} bytes, file has {len(lab)}",
                          len(lab))
    labels = np.frombuffer(lab, dtype=np.uint8, count=ln, offset=8).astype(np.int64)

    mean, std = NORM_STATS[dataset]
    images = normalize(pixels.reshape(n, 1, h, w), mean, std)
    return Dataset(images, labels, num_classes, split, mean, std)


def load_cifar(paths: Sequence[str], variant: str = "c10",
               split: str = "train") -> Dataset:
    """Decode CIFAR binary batch files.

    c10 records are 1 label byte + 3072 pixel bytes; c100 records carry a
    coarse then a fine label byte (the fine label is used).
    """
    if variant not in ("c10", "c100"):
        raise ParameterError(f"variant must be c10 or c100, got {variant!r}")
    label_bytes = 1 if variant == "c10" else 2
    record = label_bytes + 3072
    num_classes = 10 if variant == "c10" else 100
    dataset = "cifar10" if variant == "c10" else "cifar100"

    all_images, all_labels = [], []
    for path in paths:
        blob = _read_file(path)
        if len(blob) % record:
            raise FormatError(
                f"{path}: length {len(blob)} is not a multiple of record size {record}",
                len(blob) // record * record)
        n = len(blob) // record
        raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, record)
        labels = raw[:, label_bytes - 1].astype(np.int64)
        bad = np.nonzero(labels >= num_classes)[0]
        if bad.size:
            first = int(bad[0])
            raise FormatError(
                f"{path}: label {labels[first]} out of range for {variant}",
                first * record + label_bytes - 1)
        all_images.append(raw[:, label_bytes:].reshape(n, 3, 32, 32))
        all_labels.append(labels)

    pixels = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    mean, std = NORM_STATS[dataset]
    return Dataset(normalize(pixels, mean, std), labels, num_classes, split, mean, std)


# ---------------------------------------------------------------------------
# synthetic datasets

def synth_dataset(kind: str, n: int, classes: int, image_shape: Tuple[int, int, int],
                  rng: np.random.Generator, noise: float = 1.0,
                  separation: float = 4.0, split: str = "train",
                  means_rng: np.random.Generator = None) -> Dataset:
    """Separable-by-construction images with known class structure.

    ``gaussian_blobs`` put class means at mutually equidistant points
    (pairwise distance ``separation``) and add isotropic noise; ``striped``
    marks a class-dependent row band. Pass the same ``means_rng`` when
    generating multiple splits of one task so they share class means.
    """
    c, h, w = image_shape
    dim = c * h * w
    if kind == "gaussian_blobs":
        if classes > dim:
            raise ParameterError(f"{classes} classes need image dim >= {classes}")
        means = blob_means(means_rng if means_rng is not None else rng,
                           classes, dim, separation)
        labels = (np.arange(n) % classes).astype(np.int64)
        flat = means[labels] + noise * rng.standard_normal((n, dim))
        images = flat.astype(np.float32).reshape(n, c, h, w)
        return Dataset(images, labels, classes, split)
    if kind == "striped":
        if classes > h:
            raise ParameterError(f"{classes} classes need at least {classes} rows")
        labels = (np.arange(n) % classes).astype(np.int64)
        images = noise * rng.standard_normal((n, c, h, w)).astype(np.float32)
        for i, y in enumerate(labels):
            images[i, :, y::classes, :] += 2.0
        return Dataset(images, labels, classes, split)
    raise ParameterError(f"unknown synthetic kind {kind!r}")


def blob_means(rng: np.random.Generator, classes: int, dim: int,
               separation: float) -> np.ndarray:
    """Mutually equidistant class means (pairwise distance ``separation``)."""
    basis = rng.standard_normal((dim, classes))
    q, _ = np.linalg.qr(basis)
    return q.T * (separation / np.sqrt(2.0))


def subset(ds: Dataset, indices: np.ndarray) -> Dataset:
    return Dataset(ds.images[indices], ds.labels[indices], ds.num_classes,
                   ds.split, ds.mean, ds.std)


def batches(ds: Dataset, plan: BatchPlan, epoch: int) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """Deterministic minibatch stream; order is a pure function of (seed, epoch)."""
    n = len(ds)
    if plan.shuffle:
        order = StreamHub(plan.seed).stream("shuffle", epoch).permutation(n)
    else:
        order = np.arange(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    for start in range(0, stop, plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield Tensor(ds.images[idx]), ds.labels[idx]


def num_batches(n: int, plan: BatchPlan) -> int:
    if plan.drop_last:
        return n // plan.batch_size
    return (n + plan.batch_size - 1) // plan.batch_size
