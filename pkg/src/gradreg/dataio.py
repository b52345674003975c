"""MNIST IDX loading, one-hot targets, synthetic blobs and splitting."""

import gzip
import math
import struct
from dataclasses import dataclass

import numpy as np

from .numcore import InvalidParameterError, standard_normals

IDX3_MAGIC = 0x00000803
IDX1_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxLengthError(IdxFormatError):
    pass


class InvalidLabelError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d), entries in [0, 1]
    labels: np.ndarray  # (N,), integer classes in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be 2-D and labels 1-D")
        if len(self.inputs) != len(self.labels):
            raise ValueError(
                f"{len(self.inputs)} input rows but {len(self.labels)} labels")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("input entries must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise InvalidLabelError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def targets(self):
        return one_hot(self.labels, self.num_classes)

    def subset(self, rows):
        return Dataset(self.inputs[rows], self.labels[rows], self.num_classes)


def _read_bytes(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, expected_magic, ndims):
    header = 4 * (1 + ndims)
    if len(raw) < 4:
        raise IdxLengthError(f"file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"bad IDX magic: expected 0x{expected_magic:08x}, got 0x{magic:08x}")
    if len(raw) < header:
        raise IdxLengthError(f"truncated IDX header ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    n = math.prod(dims)
    payload = raw[header:]
    if len(payload) < n:
        raise IdxLengthError(
            f"IDX payload has {len(payload)} bytes, header promises {n}")
    return dims, np.frombuffer(payload, dtype=np.uint8, count=n)


def load_idx_images(path):
    """Read an IDX3 image file into an (N, rows*cols) float matrix in [0, 1]."""
    (n, rows, cols), data = _parse_idx(_read_bytes(path), IDX3_MAGIC, 3)
    return data.reshape(n, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path):
    (n,), data = _parse_idx(_read_bytes(path), IDX1_MAGIC, 1)
    return data.astype(np.int64)


def idx_image_bytes(images, rows, cols):
    """Encode an (N, rows*cols) matrix in [0, 1] as raw IDX3 bytes."""
    images = np.asarray(images, dtype=np.float64)
    pixels = np.floor(np.clip(images, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return struct.pack(">4I", IDX3_MAGIC, len(images), rows, cols) + pixels.tobytes()


def idx_label_bytes(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", IDX1_MAGIC, len(labels)) + labels.tobytes()


def load_mnist(images_path, labels_path):
    return Dataset(load_idx_images(images_path), load_idx_labels(labels_path), 10)


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        row = int(bad[0])
        raise InvalidLabelError(
            f"row {row}: label {labels[row]} not in [0, {num_classes})")
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def blob_centers(d, num_classes):
    """Fixed, distinct class centres in [0.15, 0.85]^d.

    The first two coordinates place the centres evenly on a circle; later
    coordinates use higher harmonics of the same angle.
    """
    angle = 2.0 * np.pi * np.arange(num_classes) / num_classes
    j = np.arange(d)
    harmonic = (j // 2 + 1)[None, :]
    phase = (np.pi / 2) * (j % 2)[None, :]
    return 0.5 + 0.35 * np.cos(angle[:, None] * harmonic - phase)


def synthetic_blobs(rng, n_per_class, d, num_classes, spread):
    """Gaussian clusters around :func:`blob_centers`, clamped and shuffled."""
    if num_classes < 2 or d < 2:
        raise InvalidParameterError("synthetic_blobs needs num_classes >= 2 and d >= 2")
    centers = blob_centers(d, num_classes)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = standard_normals(rng, (len(labels), d))
    inputs = np.clip(centers[labels] + spread * noise, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order], num_classes)


def split(data, n_train):
    """First ``n_train`` rows and the remainder, order preserved."""
    if n_train < 0 or n_train > len(data):
        raise InvalidParameterError(
            f"n_train={n_train} outside [0, {len(data)}]")
    return data.subset(slice(0, n_train)), data.subset(slice(n_train, None))


def concat(a, b):
    return Dataset(np.vstack([a.inputs, b.inputs]),
                   np.concatenate([a.labels, b.labels]), a.num_classes)
