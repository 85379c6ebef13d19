"""Dataset ingestion: directory scan, decoding, resizing, normalisation, splits and batches.

The expected layout is one subdirectory per class::

    <root>/broadleaf/*.png
    <root>/grass/*.jpg
    <root>/soil/*.ppm
    <root>/soybean/...

Shuffling uses :class:`SplitMix64` driving a Fisher-Yates shuffle so that a
split is reproducible from its seed independently of the numpy version.
"""
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import DatasetError, DecodeError, InputError
from .model import CLASS_NAMES

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".ppm", ".tif", ".tiff"}
N_CLASSES = len(CLASS_NAMES)
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    """64-bit SplitMix generator (Steele, Lea & Flood, 2014)."""

    def __init__(self, seed):
        self.state = int(seed) & _MASK64

    def next_u64(self):
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n):
        """Uniform integer in ``[0, n)`` by rejection sampling (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n


def fisher_yates(n, rng):
    """Permutation of ``range(n)``: for i = n-1 .. 1 swap i with ``rng.below(i + 1)``."""
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def epoch_order(n, seed, epoch):
    """Sample order for one epoch, derived from ``(seed, epoch)``."""
    mixed = SplitMix64((int(seed) * _GOLDEN + int(epoch) + 1) & _MASK64).next_u64()
    return fisher_yates(n, SplitMix64(mixed))


class LabeledFile(NamedTuple):
    path: Path
    label: int

    @property
    def class_name(self):
        return CLASS_NAMES[self.label]


@dataclass
class ScanResult:
    root: Path
    files: list
    counts: dict

    def __len__(self):
        return len(self.files)


@dataclass
class Sample:
    image: np.ndarray
    label: int
    source_path: str = ""


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int


def class_index(name):
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise InputError(f"unknown class {name!r}; expected one of {CLASS_NAMES}") from None


def scan_dataset(root):
    """List every image under ``root``'s class directories, sorted, with labels."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    found = sorted(p.name for p in root.iterdir() if p.is_dir())
    missing = [c for c in CLASS_NAMES if c not in found]
    if missing:
        raise DatasetError(f"{root}: missing class directories {missing}; found {found}")
    files, counts = [], {}
    for label, name in enumerate(CLASS_NAMES):
        paths = sorted(
            p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        counts[name] = len(paths)
        files.extend(LabeledFile(p, label) for p in paths)
    empty = [name for name, n in counts.items() if n == 0]
    if empty:
        warnings.warn(f"{root}: no images in {empty}", stacklevel=2)
    logger.info("scanned %s: %s (total %d)", root, counts, len(files))
    return ScanResult(root, files, counts)


def load_image(path):
    """Decode an image file to a ``(H, W, 3)`` float32 array of byte values 0..255."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("L", "I", "I;16", "F", "1", "P", "LA"):
                arr = np.asarray(img.convert("L"))
                arr = np.repeat(arr[:, :, None], 3, axis=2)
            else:
                arr = np.asarray(img.convert("RGB"))
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise DecodeError(path, exc) from None
    return arr.astype(np.float32)


def resize_bilinear(img, height=227, width=None):
    """Bilinear resize with half-pixel-centred sampling and edge clamping.

    An image already at the target size is returned unchanged (as a copy).
    Interpolation is written as ``a + t * (b - a)`` so constant images stay
    exactly constant.
    """
    width = height if width is None else width
    img = np.asarray(img)
    if img.ndim != 3:
        raise InputError(f"expected (H, W, C) image, got {img.shape}")
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    src = img.astype(np.float64)

    def axis_coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, ty = axis_coords(h, height)
    x0, x1, tx = axis_coords(w, width)
    tx = tx[None, :, None]
    top = src[y0][:, x0] + tx * (src[y0][:, x1] - src[y0][:, x0])
    bottom = src[y1][:, x0] + tx * (src[y1][:, x1] - src[y1][:, x0])
    out = top + ty[:, None, None] * (bottom - top)
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32)


def normalize(img):
    """Scale byte values in ``[0, 255]`` to ``[0, 1]``."""
    img = np.asarray(img, dtype=np.float32)
    if img.size and (img.min() < 0 or img.max() > 255):
        raise InputError(f"pixel values must lie in [0, 255], got [{img.min()}, {img.max()}]")
    return img / np.float32(255.0)


def one_hot(label, n_classes=N_CLASSES):
    label = int(label)
    if not 0 <= label < n_classes:
        raise InputError(f"label {label} outside 0..{n_classes - 1}")
    vec = np.zeros(n_classes, dtype=np.float32)
    vec[label] = 1.0
    return vec


def one_hot_batch(labels, n_classes=N_CLASSES):
    return np.stack([one_hot(l, n_classes) for l in labels]) if len(labels) else np.zeros((0, n_classes), np.float32)


def prepare_image(path, extent=227):
    """Decode, resize to ``extent`` x ``extent`` and normalise one file."""
    return normalize(resize_bilinear(load_image(path), extent))


def load_sample(item, extent=227):
    return Sample(prepare_image(item.path, extent), item.label, str(item.path))


def load_images(paths, extent=227, workers=None):
    """Decode many files (optionally on a thread pool); output order follows ``paths``."""
    paths = list(paths)
    if not paths:
        return np.zeros((0, extent, extent, 3), dtype=np.float32)
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(lambda p: prepare_image(p, extent), paths))
    else:
        images = [prepare_image(p, extent) for p in paths]
    return np.stack(images)


def split_dataset(items, train_fraction=0.7, seed=101):
    """Seeded shuffle of ``items`` (in the given order); the first ``floor(f * N)`` go to train."""
    items = list(items)
    n = len(items)
    if n < 2:
        raise DatasetError(f"need at least 2 items to split, got {n}")
    if not 0 < train_fraction < 1:
        raise DatasetError(f"train fraction must lie in (0, 1), got {train_fraction}")
    perm = fisher_yates(n, SplitMix64(seed))
    # floor(0.7 * N) computed without float rounding surprises for decimal fractions
    n_train = int(np.floor(round(train_fraction * n, 9)))
    return DatasetSplit([items[i] for i in perm[:n_train]], [items[i] for i in perm[n_train:]], seed)


def batches(part, batch_size=2, seed=0, epoch=0, load=None, shuffle=True):
    """Yield ``(images, onehot_labels)`` for one epoch over ``part``.

    ``part`` holds :class:`Sample` objects, or anything ``load`` turns into
    one (e.g. :class:`LabeledFile` with ``load=load_sample``). The final batch
    may be smaller than ``batch_size``.
    """
    part = list(part)
    if not part:
        raise DatasetError("cannot batch an empty split")
    order = epoch_order(len(part), seed, epoch) if shuffle else range(len(part))
    order = list(order)
    for start in range(0, len(order), batch_size):
        chunk = [part[i] for i in order[start:start + batch_size]]
        if load is not None:
            chunk = [load(item) for item in chunk]
        yield np.stack([s.image for s in chunk]), one_hot_batch([s.label for s in chunk])


def write_manifest(split, root, path):
    """Write ``relative_path<TAB>train|test`` lines (train first, in split order)."""
    root = Path(root)
    with open(path, "w", encoding="utf-8") as fh:
        for tag, part in (("train", split.train), ("test", split.test)):
            for item in part:
                fh.write(f"{Path(item.path).relative_to(root).as_posix()}\t{tag}\n")


def read_manifest(path, root, seed=None):
    root = Path(root)
    train, test = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                rel, tag = line.split("\t")
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: expected 'relative_path<TAB>train|test'") from None
            if tag not in ("train", "test"):
                raise DatasetError(f"{path}:{lineno}: unknown split tag {tag!r}")
            class_name = rel.split("/", 1)[0]
            item = LabeledFile(root / rel, class_index(class_name))
            (train if tag == "train" else test).append(item)
    return DatasetSplit(train, test, seed)


class ImagePreprocessor(TransformerMixin, BaseEstimator):
    """Turn file paths or raw ``(H, W, 3)`` byte images into a normalised batch.

    Stateless: ``fit`` only validates parameters, so it can sit at the front of
    an sklearn ``Pipeline``.
    """

    def __init__(self, extent=227, n_jobs=None):
        self.extent = extent
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        if int(self.extent) < 1:
            raise InputError(f"extent must be positive, got {self.extent}")
        return self

    def transform(self, X):
        items = list(X)
        if items and isinstance(items[0], (str, os.PathLike)):
            return load_images(items, self.extent, self.n_jobs)
        out = [normalize(resize_bilinear(np.asarray(img, dtype=np.float32), self.extent)) for img in items]
        return np.stack(out) if out else np.zeros((0, self.extent, self.extent, 3), np.float32)
