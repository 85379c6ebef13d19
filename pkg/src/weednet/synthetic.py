"""Deterministic synthetic images with one visually distinct pattern per class.

* broadleaf: solid colour
* grass: horizontal stripes
* soil: vertical stripes
* soybean: checkerboard

Each image gets its own random base colours and pixel noise from a seeded
generator, so a handful of samples per class is enough to check that the
training loop can fit a dataset.
"""
from pathlib import Path

import numpy as np
from PIL import Image

from .model import CLASS_NAMES

PERIOD = 8
NOISE = 0.05


def pattern_image(label, extent, rng):
    y, x = np.mgrid[0:extent, 0:extent]
    if label == 0:
        mask = np.zeros((extent, extent), dtype=bool)
    elif label == 1:
        mask = (y // (PERIOD // 2)) % 2 == 1
    elif label == 2:
        mask = (x // (PERIOD // 2)) % 2 == 1
    elif label == 3:
        mask = ((y // (PERIOD // 2)) + (x // (PERIOD // 2))) % 2 == 1
    else:
        raise ValueError(f"no pattern for label {label}")
    fg = rng.uniform(0.55, 0.95, size=3)
    bg = rng.uniform(0.05, 0.45, size=3)
    img = np.where(mask[..., None], bg, fg)
    img = img + rng.normal(0.0, NOISE, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_synthetic(n_per_class=4, extent=128, seed=0, dtype=np.float32):
    """Return ``(X, y)`` with ``X`` of shape (4 * n_per_class, extent, extent, 3) in [0, 1]."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label in range(len(CLASS_NAMES)):
        for _ in range(n_per_class):
            images.append(pattern_image(label, extent, rng))
            labels.append(label)
    return np.stack(images).astype(dtype), np.array(labels)


def write_synthetic_tree(root, n_per_class=4, extent=128, seed=0, fmt="png"):
    """Write a class-per-directory dataset of synthetic images as 8-bit files."""
    root = Path(root)
    X, y = make_synthetic(n_per_class, extent, seed)
    counters = {}
    for img, label in zip(X, y):
        name = CLASS_NAMES[label]
        (root / name).mkdir(parents=True, exist_ok=True)
        i = counters.get(name, 0)
        counters[name] = i + 1
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(root / name / f"{name}_{i:03d}.{fmt}")
    return root
