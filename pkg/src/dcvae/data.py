"""Datasets, pixel normalization and deterministic batch iteration.

Images are stored as uint8 arrays shaped (N, H, W, C). Training code works on
float tensors shaped (N, C, H, W) in [-1, 1], produced by :func:`normalize`.
"""
from __future__ import annotations

import gzip
import hashlib
import importlib.util
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .rng import RngStream, derive_rng


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # uint8, (N, H, W, C)
    labels: Optional[np.ndarray]
    split: str
    name: str = ""
    fingerprint: str = field(init=False)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DatasetError(f"images must be uint8 (N, H, W, C), got {self.images.dtype} {self.images.shape}")
        if len(self.images) == 0:
            raise DatasetError("empty dataset")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DatasetError(f"{len(self.labels)} labels for {len(self.images)} images")
        h = hashlib.sha256()
        h.update(repr(self.images.shape).encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        if self.labels is not None:
            h.update(np.asarray(self.labels, dtype=np.int64).tobytes())
        object.__setattr__(self, "fingerprint", h.hexdigest()[:16])

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels is not None else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        labels = self.labels[idx] if self.labels is not None else None
        return Dataset(self.images[idx], labels, self.split, self.name)


# -- normalization -----------------------------------------------------------

def normalize(pixels) -> torch.Tensor:
    """uint8 (N, H, W, C) -> float32 (N, C, H, W) in [-1, 1] via p / 127.5 - 1."""
    arr = torch.as_tensor(np.asarray(pixels), dtype=torch.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return (arr / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous()


def denormalize(batch: torch.Tensor) -> np.ndarray:
    """Inverse of :func:`normalize`, rounded and clipped back to uint8 (N, H, W, C)."""
    x = (batch.detach().cpu().double() + 1.0) * 127.5
    x = x.round().clamp(0, 255).to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()


def pad_to(images: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad (N, H, W, C) images symmetrically up to ``size`` x ``size``."""
    n, h, w, c = images.shape
    if h == size and w == size:
        return images
    if h > size or w > size:
        raise DatasetError(f"cannot pad {h}x{w} down to {size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((n, size, size, c), dtype=images.dtype)
    out[:, top:top + h, left:left + w] = images
    return out


def resize_to(images: np.ndarray, size: int) -> np.ndarray:
    """Area-average downsampling for integer factors (STL-10 96 -> 32)."""
    n, h, w, c = images.shape
    if h == size:
        return images
    if h % size or w % size:
        raise DatasetError(f"cannot resize {h}x{w} to {size} by an integer factor")
    f = h // size
    x = images.reshape(n, size, f, size, f, c).astype(np.float64).mean(axis=(2, 4))
    return np.round(x).astype(np.uint8)


# -- toy dataset -------------------------------------------------------------

TOY_CLASSES = ("disk", "square", "triangle", "cross")


def _draw_shape(kind: int, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        mask = dy**2 + dx**2 <= r**2
    elif kind == 1:
        mask = (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    elif kind == 2:
        mask = (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    else:
        arm = r * 0.3
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    return mask


def make_toy_dataset(n: int, seed: int, *, size: int = 32, channels: int = 3, split: str = "train") -> Dataset:
    """Procedural shapes: class = shape kind; position, radius, colour vary.

    Labels cycle through the classes before shuffling, so the class counts
    differ by at most one.
    """
    if n < 1:
        raise DatasetError("toy dataset needs n >= 1")
    rng = derive_rng(seed, f"toy/{split}").numpy
    labels = np.arange(n) % len(TOY_CLASSES)
    rng.shuffle(labels)
    images = np.zeros((n, size, size, channels), dtype=np.uint8)
    for i, kind in enumerate(labels):
        r = rng.uniform(size * 0.18, size * 0.32)
        cy, cx = rng.uniform(r, size - r, size=2)
        fg = rng.integers(128, 256, size=channels)
        bg = rng.integers(0, 64, size=channels)
        mask = _draw_shape(int(kind), size, cy, cx, r)
        images[i] = np.where(mask[..., None], fg, bg).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), split, "toy")


# -- archive readers ---------------------------------------------------------

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
CIFAR_MD5 = {
    "data_batch_1": "c99cafc152244af753f735de768cd75f",
    "data_batch_2": "d4bba439e000b95fd0a9bffe97cbabec",
    "data_batch_3": "54ebc095f3ab1f0389bbae665268c751",
    "data_batch_4": "634d18415352ddfa80567beed471001a",
    "data_batch_5": "482c414d41f54cd18b22e5b47cb7c3cb",
    "test_batch": "40351d587109b95175f43aff81a1287e",
}
SPLIT_SIZES = {
    ("mnist", "train"): 60_000,
    ("mnist", "test"): 10_000,
    ("cifar10", "train"): 50_000,
    ("cifar10", "test"): 10_000,
    ("stl10", "train"): 5_000,
    ("stl10", "test"): 8_000,
    ("mnist5k", "train"): 4_000,
    ("mnist5k", "test"): 1_000,
}


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _check_md5(path: Path, expected: Optional[str], verify: bool) -> None:
    if verify and expected is not None and _md5(path) != expected:
        raise DatasetError(f"checksum mismatch for {path}")


def _open_maybe_gz(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        data = fh.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DatasetError(f"{path} is not an unsigned-byte IDX file")
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    arr = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise DatasetError(f"{path} is truncated")
    return arr.reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for cand in (root / (stem + ".gz"), root / stem, root / "MNIST" / "raw" / (stem + ".gz"), root / "MNIST" / "raw" / stem):
        if cand.exists():
            return cand
    raise DatasetError(f"missing dataset file {stem}(.gz) under {root}")


def load_mnist(root, split: str, verify: bool = True) -> Dataset:
    root = Path(root)
    img_path = _find(root, MNIST_FILES[split][0])
    lbl_path = _find(root, MNIST_FILES[split][1])
    for p in (img_path, lbl_path):
        _check_md5(p, MNIST_MD5.get(p.name), verify)
    images = read_idx(img_path)[..., None]
    labels = read_idx(lbl_path).astype(np.int64)
    return Dataset(np.ascontiguousarray(images), labels, split, "mnist")


def load_cifar10(root, split: str, verify: bool = True) -> Dataset:
    root = Path(root)
    base = root / "cifar-10-batches-py" if (root / "cifar-10-batches-py").exists() else root
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    images, labels = [], []
    for name in names:
        path = base / name
        if not path.exists():
            raise DatasetError(f"missing dataset file {path}")
        _check_md5(path, CIFAR_MD5.get(name), verify)
        with open(path, "rb") as fh:
            entry = pickle.load(fh, encoding="latin1")
        images.append(np.asarray(entry["data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        labels.append(np.asarray(entry["labels"], dtype=np.int64))
    imgs = np.concatenate(images).transpose(0, 2, 3, 1)
    return Dataset(np.ascontiguousarray(imgs), np.concatenate(labels), split, "cifar10")


def load_stl10(root, split: str) -> Dataset:
    """STL-10 binary release, kept at 96x96; resize with :func:`resize_to`."""
    base = Path(root) / "stl10_binary"
    stem = "train" if split == "train" else "test"
    x_path, y_path = base / f"{stem}_X.bin", base / f"{stem}_y.bin"
    if not x_path.exists():
        raise DatasetError(f"missing dataset file {x_path}")
    x = np.fromfile(x_path, dtype=np.uint8).reshape(-1, 3, 96, 96).transpose(0, 3, 2, 1)
    y = np.fromfile(y_path, dtype=np.uint8).astype(np.int64) - 1
    return Dataset(np.ascontiguousarray(x), y, split, "stl10")


def mnist5k_path() -> Path:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise DatasetError("mnist5k needs the mlxtend wheel (pip install mlxtend), which bundles the data file")
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise DatasetError(f"missing dataset file {path}")
    return path


def load_mnist5k(split: str) -> Dataset:
    """5,000 real MNIST digits (500 per class); first 400 of each class train, last 100 test.

    The CSV is read directly; mlxtend itself is never imported.
    """
    with gzip.open(mnist5k_path(), "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28, 1)
    labels = table[:, -1]
    rank = np.zeros(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        where = np.flatnonzero(labels == c)
        rank[where] = np.arange(len(where))
    keep = rank < 400 if split == "train" else rank >= 400
    return Dataset(np.ascontiguousarray(images[keep]), labels[keep], split, "mnist5k")


def load_dataset(spec, split: str = "train", seed: int = 0) -> Dataset:
    """Load one split described by a :class:`~dcvae.config.DatasetConfig`.

    Real datasets are checked against their documented split sizes.
    """
    name = spec.name
    if name == "toy":
        n = spec.n if split == "train" else spec.test_n
        return make_toy_dataset(n, seed, channels=spec.channels, split=split)
    if name == "mnist":
        ds = load_mnist(spec.root, split, spec.verify_checksums)
    elif name == "cifar10":
        ds = load_cifar10(spec.root, split, spec.verify_checksums)
    elif name == "stl10":
        ds = load_stl10(spec.root, split)
    elif name == "mnist5k":
        ds = load_mnist5k(split)
    else:
        raise DatasetError(f"unknown dataset {name!r}")
    expected = SPLIT_SIZES.get((name, split))
    if expected is not None and len(ds) != expected:
        raise DatasetError(f"{name}/{split}: expected {expected} images, found {len(ds)}")
    return ds


def prepare(ds: Dataset, image_size: int = 32) -> Dataset:
    """Bring a dataset to the backbone resolution (pad MNIST, downsample STL-10)."""
    h = ds.shape[0]
    if h < image_size:
        return Dataset(pad_to(ds.images, image_size), ds.labels, ds.split, ds.name)
    if h > image_size:
        return Dataset(resize_to(ds.images, image_size), ds.labels, ds.split, ds.name)
    return ds


# -- iteration ---------------------------------------------------------------

def iterate_batches(dataset: Dataset, batch_size: int, rng: RngStream, *, drop_last: bool = False,
                    augment: bool = False) -> Iterator[tuple[torch.Tensor, Optional[torch.Tensor], np.ndarray]]:
    """One epoch in rng-determined order, yielding (images, labels, indices).

    ``indices`` identify instances so contrastive terms can track which
    embedding belongs to which training image.
    """
    n = len(dataset)
    if batch_size > n:
        raise DatasetError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        x = normalize(dataset.images[idx])
        if augment:
            flip = torch.as_tensor(rng.random(len(idx)) < 0.5)
            x[flip] = x[flip].flip(-1)
        y = torch.as_tensor(dataset.labels[idx]) if dataset.labels is not None else None
        yield x, y, idx


def spaced_indices(total: int, k: int) -> np.ndarray:
    """``min(k, total)`` evenly spaced indices into a split (first and last included)."""
    k = min(k, total)
    return np.linspace(0, total - 1, k).round().astype(np.int64) if k > 1 else np.zeros(k, dtype=np.int64)


def batch_at(dataset: Dataset, batch_size: int, seed: int, step: int, *, augment: bool = False):
    """The batch consumed at training ``step`` (drop-last epochs).

    Stateless: the epoch permutation is derived from ``(seed, "data/epoch{k}")``,
    which makes resuming from a checkpoint exact.
    """
    per_epoch = len(dataset) // batch_size
    if per_epoch == 0:
        raise DatasetError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
    epoch, pos = divmod(step, per_epoch)
    rng = derive_rng(seed, f"data/epoch{epoch}")
    order = rng.permutation(len(dataset))
    idx = order[pos * batch_size:(pos + 1) * batch_size]
    x = normalize(dataset.images[idx])
    if augment:
        flip_rng = derive_rng(seed, f"augment/{step}")
        flip = torch.as_tensor(flip_rng.random(len(idx)) < 0.5)
        x[flip] = x[flip].flip(-1)
    return x, idx
