"""Desk-scale data: synthetic Gaussian-cluster classification and IDX images.

Everything here is deterministic: the same arguments always produce bitwise
identical batches.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """IDX file is malformed; the message carries the byte offset."""


@dataclass(frozen=True)
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"inputs ({self.inputs.shape[0]}) and labels ({self.labels.shape[0]}) disagree"
            )
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one sample")
        if self.labels.ndim != 1 or not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be a 1-d integer array")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    @property
    def count(self) -> int:
        return int(self.inputs.shape[0])

    def reshaped(self, feature_shape) -> "LabeledBatch":
        """Reshape features only (e.g. flat vectors to images); count unchanged."""
        return LabeledBatch(
            self.inputs.reshape(self.count, *feature_shape), self.labels
        )


def gen_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
) -> tuple[LabeledBatch, LabeledBatch]:
    """Gaussian class clusters with a deterministic 80/20 train/test split."""
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("num_classes, per_class and dim must be positive")
    if not spread >= 0:
        raise ValueError(f"spread must be non-negative, got {spread}")
    rng = np.random.default_rng([int(seed)])
    centers = rng.uniform(-1.0, 1.0, size=(num_classes, dim))
    n_train = max(1, round(0.8 * per_class))
    train_x, train_y, test_x, test_y = [], [], [], []
    for cls in range(num_classes):
        points = centers[cls] + spread * rng.standard_normal((per_class, dim))
        train_x.append(points[:n_train])
        test_x.append(points[n_train:])
        train_y.append(np.full(n_train, cls, dtype=np.int64))
        test_y.append(np.full(per_class - n_train, cls, dtype=np.int64))
    train_inputs = np.concatenate(train_x)
    train_labels = np.concatenate(train_y)
    test_inputs = np.concatenate(test_x)
    test_labels = np.concatenate(test_y)
    train_order = rng.permutation(train_inputs.shape[0])
    test_order = rng.permutation(test_inputs.shape[0])
    return (
        LabeledBatch(train_inputs[train_order], train_labels[train_order]),
        LabeledBatch(test_inputs[test_order], test_labels[test_order]),
    )


def _read_be_u32s(data: bytes, offset: int, n: int, path: str) -> tuple[int, ...]:
    end = offset + 4 * n
    if end > len(data):
        raise IdxFormatError(
            f"{path}: truncated header, need {4 * n} bytes at offset {offset}, "
            f"have {len(data) - offset}"
        )
    return struct.unpack(f">{n}I", data[offset:end])


def load_idx(images_path, labels_path) -> LabeledBatch:
    """Load an IDX image/label file pair (big-endian, magic-checked).

    Pixels are scaled into [0, 1]; output shape is (count, 1, rows, cols).
    """
    with open(images_path, "rb") as fh:
        img_data = fh.read()
    with open(labels_path, "rb") as fh:
        lbl_data = fh.read()

    (img_magic,) = _read_be_u32s(img_data, 0, 1, str(images_path))
    if img_magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic 0x{img_magic:08x} at offset 0, "
            f"expected 0x{IDX_IMAGES_MAGIC:08x}"
        )
    count, rows, cols = _read_be_u32s(img_data, 4, 3, str(images_path))
    pixel_bytes = count * rows * cols
    if len(img_data) != 16 + pixel_bytes:
        raise IdxFormatError(
            f"{images_path}: expected {pixel_bytes} pixel bytes at offset 16, "
            f"file holds {len(img_data) - 16}"
        )

    (lbl_magic,) = _read_be_u32s(lbl_data, 0, 1, str(labels_path))
    if lbl_magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic 0x{lbl_magic:08x} at offset 0, "
            f"expected 0x{IDX_LABELS_MAGIC:08x}"
        )
    (lbl_count,) = _read_be_u32s(lbl_data, 4, 1, str(labels_path))
    if lbl_count != count:
        raise IdxFormatError(
            f"{labels_path}: label count {lbl_count} does not match image count {count}"
        )
    if len(lbl_data) != 8 + count:
        raise IdxFormatError(
            f"{labels_path}: expected {count} label bytes at offset 8, "
            f"file holds {len(lbl_data) - 8}"
        )

    pixels = np.frombuffer(img_data, dtype=np.uint8, offset=16)
    images = pixels.astype(np.float64).reshape(count, 1, rows, cols) / 255.0
    labels = np.frombuffer(lbl_data, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledBatch(images, labels)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write (count, rows, cols) uint8 images and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, count))
        fh.write(labels.tobytes())
