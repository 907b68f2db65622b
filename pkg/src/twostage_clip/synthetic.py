"""Synthetic image-text corpora with a planted correspondence.

Each image is split into a top and a bottom band, each filled with one
palette colour plus pixel noise; the caption names both colours
("red over blue"). The correspondence is learnable from pixels alone and
survives horizontal flips and moderate crops.
"""

from __future__ import annotations

import numpy as np

from .data import ImageTextRecord

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.9, 0.9, 0.1),
    "cyan": (0.1, 0.9, 0.9),
    "pink": (0.9, 0.3, 0.8),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
}


def band_image(top: str, bottom: str, rng: np.random.Generator, size: int = 32,
               noise: float = 0.05) -> np.ndarray:
    img = np.empty((size, size, 3))
    cut = size // 2 + int(rng.integers(-size // 8, size // 8 + 1))
    img[:cut] = PALETTE[top]
    img[cut:] = PALETTE[bottom]
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def planted_corpus(n: int, seed: int, size: int = 32, colors: int = 8):
    """`n` records plus their (top, bottom) colour-index labels."""
    rng = np.random.default_rng(seed)
    names = list(PALETTE)[:colors]
    records, labels = [], []
    for _ in range(n):
        t, b = (int(i) for i in rng.integers(0, colors, size=2))
        img = band_image(names[t], names[b], rng, size)
        records.append(ImageTextRecord(img, f"{names[t]} over {names[b]}", 1.0, "synthetic"))
        labels.append((t, b))
    return records, labels


def gold_by_label(labels_query, labels_candidate) -> dict[int, set[int]]:
    """Every candidate sharing the query's label counts as correct."""
    index: dict = {}
    for j, lab in enumerate(labels_candidate):
        index.setdefault(lab, set()).add(j)
    return {i: index.get(lab, set()) for i, lab in enumerate(labels_query)}


def solid_color_dataset(n_per_class: int, class_names, seed: int, size: int = 32):
    """Class-labelled images of one flat colour each (for zero-shot checks)."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c, name in enumerate(class_names):
        for _ in range(n_per_class):
            images.append(band_image(name, name, rng, size))
            labels.append(c)
    return np.stack(images), np.array(labels)
