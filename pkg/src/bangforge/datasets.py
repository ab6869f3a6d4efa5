"""Bit-exact readers and writers for the MNIST IDX and CIFAR-10 binary formats.

Images come out as uint8 arrays shaped (N, C, H, W); labels as int64.  No
normalization happens at this layer -- attack math needs the raw [0, 255]
pixel space, so any scaling/mean subtraction is a model-level concern.

IDX layout (big-endian): u32 magic (0x00000803 images / 0x00000801 labels),
one u32 per dimension, then raw unsigned bytes.  CIFAR-10 binary layout:
3073-byte records, 1 label byte then 1024 R + 1024 G + 1024 B bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
NUM_CLASSES = 10


class DatasetError(ValueError):
    """Base for malformed dataset input."""


class MalformedMagic(DatasetError):
    def __init__(self, expected: int, found: int, offset: int):
        super().__init__(
            f"bad magic at byte {offset}: expected 0x{expected:08x}, found 0x{found:08x}"
        )
        self.offset = offset


class DimensionMismatch(DatasetError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TruncatedFile(DatasetError):
    def __init__(self, needed: int, got: int, offset: int):
        super().__init__(f"truncated at byte {offset}: needed {needed} more bytes, got {got}")
        self.offset = offset


class TruncatedRecord(DatasetError):
    def __init__(self, record_index: int, got: int):
        super().__init__(
            f"record {record_index} truncated: {got} of {CIFAR_RECORD_BYTES} bytes"
        )
        self.record_index = record_index


class LabelOutOfRange(DatasetError):
    def __init__(self, label: int, index: int):
        super().__init__(f"label {label} out of range [0, {NUM_CLASSES}) at record {index}")
        self.index = index


@dataclass
class LabeledDataset:
    """Images plus class labels for one split.

    images: uint8 (N, C, H, W); labels: int64 (N,), each in [0, num_classes).
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels", 0
            )
        bad = np.nonzero((self.labels < 0) | (self.labels >= self.num_classes))[0]
        if bad.size:
            raise LabelOutOfRange(int(self.labels[bad[0]]), int(bad[0]))

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, ids: Sequence[int], split: str | None = None) -> "LabeledDataset":
        ids = np.asarray(ids, dtype=np.int64)
        return LabeledDataset(self.images[ids], self.labels[ids],
                              split or self.split, self.num_classes)


def _read_exact(stream: BinaryIO, n: int, offset: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise TruncatedFile(n, len(data), offset)
    return data


def _read_u32(stream: BinaryIO, offset: int) -> int:
    return struct.unpack(">I", _read_exact(stream, 4, offset))[0]


def load_mnist_idx(images_file: BinaryIO, labels_file: BinaryIO,
                   split: str = "train") -> LabeledDataset:
    """Parse an IDX image/label file pair into a dataset, file order preserved."""
    magic = _read_u32(images_file, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise MalformedMagic(IDX_IMAGE_MAGIC, magic, 0)
    count = _read_u32(images_file, 4)
    rows = _read_u32(images_file, 8)
    cols = _read_u32(images_file, 12)
    pixels = _read_exact(images_file, count * rows * cols, 16)
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, 1, rows, cols)

    magic = _read_u32(labels_file, 0)
    if magic != IDX_LABEL_MAGIC:
        raise MalformedMagic(IDX_LABEL_MAGIC, magic, 0)
    label_count = _read_u32(labels_file, 4)
    if label_count != count:
        raise DimensionMismatch(f"{count} images vs {label_count} labels", 4)
    labels = np.frombuffer(_read_exact(labels_file, label_count, 8), dtype=np.uint8)

    return LabeledDataset(images, labels.astype(np.int64), split)


def load_cifar10_bin(batch_files: Sequence[BinaryIO], split: str = "train") -> LabeledDataset:
    """Parse CIFAR-10 binary batch files; record order preserved across files."""
    all_images: list[np.ndarray] = []
    all_labels: list[int] = []
    index = 0
    for stream in batch_files:
        while True:
            record = stream.read(CIFAR_RECORD_BYTES)
            if not record:
                break
            if len(record) != CIFAR_RECORD_BYTES:
                raise TruncatedRecord(index, len(record))
            label = record[0]
            if label >= NUM_CLASSES:
                raise LabelOutOfRange(label, index)
            all_labels.append(label)
            all_images.append(
                np.frombuffer(record, dtype=np.uint8, count=3072, offset=1).reshape(3, 32, 32)
            )
            index += 1
    if not all_images:
        images = np.zeros((0, 3, 32, 32), dtype=np.uint8)
        return LabeledDataset(images, np.zeros(0, dtype=np.int64), split)
    return LabeledDataset(np.stack(all_images), np.asarray(all_labels, dtype=np.int64), split)


def write_idx_images(stream: BinaryIO, images: np.ndarray) -> None:
    """Inverse of the image half of load_mnist_idx; images uint8 (N, 1, H, W)."""
    n, c, h, w = images.shape
    if c != 1:
        raise DimensionMismatch(f"IDX image files are single-channel, got {c}", 0)
    stream.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
    stream.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(stream: BinaryIO, labels: np.ndarray) -> None:
    stream.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
    stream.write(np.asarray(labels, dtype=np.uint8).tobytes())


def write_cifar10_bin(stream: BinaryIO, dataset: LabeledDataset) -> None:
    """Inverse of load_cifar10_bin for a single batch file."""
    for image, label in zip(dataset.images, dataset.labels):
        stream.write(bytes([int(label)]))
        stream.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
