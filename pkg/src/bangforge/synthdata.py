"""Deterministic synthetic stand-ins for the two image datasets.

Generated entirely from a seed: digit-glyph images (28x28 grayscale, ten
classes) and colored-pattern images (32x32 RGB, ten classes).  Shapes, value
ranges, and class counts match the real datasets, and the writers emit the
real binary formats so the whole pipeline -- parsers included -- can run on
machines that have no dataset files.  Image i of a split depends only on
(seed, split, i), so prefixes are stable across sizes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .datasets import LabeledDataset, write_cifar10_bin, write_idx_images, write_idx_labels
from .tensorops import clamp_round_pixels

_DIGIT_TAG = 311
_COLOR_TAG = 313
_CONFLICT_TAG = 317
_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}

_GLYPHS = [
    ".###.|#...#|#...#|#...#|#...#|#...#|.###.",  # 0
    "..#..|.##..|..#..|..#..|..#..|..#..|.###.",  # 1
    ".###.|#...#|....#|...#.|..#..|.#...|#####",  # 2
    ".###.|#...#|....#|..##.|....#|#...#|.###.",  # 3
    "...#.|..##.|.#.#.|#..#.|#####|...#.|...#.",  # 4
    "#####|#....|####.|....#|....#|#...#|.###.",  # 5
    ".###.|#....|#....|####.|#...#|#...#|.###.",  # 6
    "#####|....#|...#.|..#..|.#...|.#...|.#...",  # 7
    ".###.|#...#|#...#|.###.|#...#|#...#|.###.",  # 8
    ".###.|#...#|#...#|.####|....#|....#|.###.",  # 9
]


def _glyph_mask(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit].split("|")
    bitmap = np.array([[ch == "#" for ch in row] for row in rows], dtype=np.float64)
    return np.kron(bitmap, np.ones((3, 3)))  # 7x5 -> 21x15


_GLYPH_MASKS = [_glyph_mask(d) for d in range(10)]


def _digit_image(rng: np.random.Generator, label: int) -> np.ndarray:
    img = np.zeros((28, 28))
    mask = _GLYPH_MASKS[label]
    oy = 3 + rng.integers(-3, 4)
    ox = 6 + rng.integers(-3, 4)
    intensity = rng.uniform(160.0, 255.0)
    stroke = mask * (intensity + rng.normal(0.0, 10.0, mask.shape))
    img[oy:oy + 21, ox:ox + 15] = stroke
    img += rng.normal(0.0, 12.0, img.shape)
    return clamp_round_pixels(img)


def synth_mnist(n: int, seed: int, split: str = "train",
                hard_fraction: float = 0.0) -> LabeledDataset:
    """Digit-glyph dataset: 28x28x1 uint8 images, labels 0-9.

    hard_fraction > 0 turns that share of rows into conflicting duplicates:
    the row reuses another row's image under a different label, the synthetic
    analogue of genuinely ambiguous samples.  Such pairs can never both be
    fit, so they keep a hard, high-gradient pool alive for the whole run the
    way large real datasets do (with hard_fraction = 0 this model class
    memorizes the training set early and gradient dynamics go quiet).
    """
    split_id = _SPLIT_IDS[split]
    images = np.empty((n, 1, 28, 28), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng((_DIGIT_TAG, seed, split_id, i))
        labels[i] = rng.integers(0, 10)
        images[i, 0] = _digit_image(rng, int(labels[i]))
    k = int(round(n * hard_fraction))
    if k:
        rng = np.random.default_rng((_CONFLICT_TAG, seed, split_id))
        conflicted = rng.choice(n, size=2 * k, replace=False)
        targets, sources = conflicted[:k], conflicted[k:]
        images[targets] = images[sources]
        labels[targets] = (labels[sources] + 1 + rng.integers(0, 9, size=k)) % 10
    return LabeledDataset(images, labels, split)


_CLASS_COLORS = np.array([
    [220, 60, 60], [60, 200, 60], [70, 90, 230], [230, 210, 60], [210, 70, 210],
    [70, 210, 210], [235, 140, 50], [140, 70, 200], [60, 140, 120], [150, 150, 60],
], dtype=np.float64)


def _pattern_mask(label: int, phase: int) -> np.ndarray:
    y, x = np.mgrid[0:32, 0:32]
    kind = label % 5
    if kind == 0:
        return ((y + phase) // 4 % 2).astype(np.float64)          # horizontal stripes
    if kind == 1:
        return ((x + phase) // 4 % 2).astype(np.float64)          # vertical stripes
    if kind == 2:
        return (((y + phase) // 4 + (x + phase) // 4) % 2).astype(np.float64)  # checker
    if kind == 3:
        r2 = (y - 16) ** 2 + (x - 16) ** 2                        # disk
        return (r2 <= (9 + phase % 3) ** 2).astype(np.float64)
    d = np.abs(y - 16) + np.abs(x - 16)                           # diamond ring
    return ((d >= 6) & (d <= 12 + phase % 3)).astype(np.float64)


def _color_image(rng: np.random.Generator, label: int) -> np.ndarray:
    phase = int(rng.integers(0, 4))
    mask = _pattern_mask(label, phase)
    color = _CLASS_COLORS[label] * rng.uniform(0.75, 1.05)
    background = rng.uniform(20.0, 70.0, size=3)
    img = background[:, None, None] * np.ones((3, 32, 32))
    img += mask[None, :, :] * (color - background)[:, None, None]
    img += rng.normal(0.0, 18.0, img.shape)
    return clamp_round_pixels(img)


def synth_cifar10(n: int, seed: int, split: str = "train") -> LabeledDataset:
    """Colored-pattern dataset: 32x32x3 uint8 images, labels 0-9.

    Classes pair one of five masks with one of ten colors, so both shape and
    color carry label information; noise keeps early training imperfect.
    """
    split_id = _SPLIT_IDS[split]
    images = np.empty((n, 3, 32, 32), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng((_COLOR_TAG, seed, split_id, i))
        labels[i] = rng.integers(0, 10)
        images[i] = _color_image(rng, int(labels[i]))
    return LabeledDataset(images, labels, split)


def write_synth_mnist(data_dir, n_train: int, n_test: int, seed: int) -> dict:
    """Materialize digit data as the four standard IDX files."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    names = {}
    for split, n, stem in (("train", n_train, "train"), ("test", n_test, "t10k")):
        ds = synth_mnist(n, seed, split)
        images_path = data_dir / f"{stem}-images-idx3-ubyte"
        labels_path = data_dir / f"{stem}-labels-idx1-ubyte"
        with open(images_path, "wb") as sink:
            write_idx_images(sink, ds.images)
        with open(labels_path, "wb") as sink:
            write_idx_labels(sink, ds.labels)
        names[split] = (str(images_path), str(labels_path))
    return names


def write_synth_cifar10(data_dir, n_train: int, n_test: int, seed: int) -> dict:
    """Materialize colored-pattern data as CIFAR-style batch files."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    train = synth_cifar10(n_train, seed, "train")
    test = synth_cifar10(n_test, seed, "test")
    per_batch = (n_train + 4) // 5 if n_train else 0
    names = {"train": [], "test": []}
    for b in range(5):
        lo, hi = b * per_batch, min((b + 1) * per_batch, n_train)
        path = data_dir / f"data_batch_{b + 1}.bin"
        with open(path, "wb") as sink:
            write_cifar10_bin(sink, train.subset(range(lo, max(lo, hi))))
        names["train"].append(str(path))
    path = data_dir / "test_batch.bin"
    with open(path, "wb") as sink:
        write_cifar10_bin(sink, test)
    names["test"].append(str(path))
    return names
