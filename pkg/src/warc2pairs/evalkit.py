"""Zero-shot classification / retrieval metrics over precomputed embeddings."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_TO_TEXT = "image_to_text"
TEXT_TO_IMAGE = "text_to_image"

_EMB_MAGIC = b"EMB1"
_DTYPE_F32LE = 1


def _check_unit_norm(name: str, vecs: np.ndarray) -> None:
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise ValueError(f"{name} rows are not unit-norm within 1e-4")


@dataclass
class ClassificationEval:
    image_vecs: np.ndarray  # N x D
    class_text_vecs: np.ndarray  # C x D
    labels: np.ndarray  # N class indices

    def __post_init__(self):
        self.image_vecs = np.asarray(self.image_vecs, dtype=np.float64)
        self.class_text_vecs = np.asarray(self.class_text_vecs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.image_vecs.shape[1] != self.class_text_vecs.shape[1]:
            raise ValueError("image and class-text dims differ")
        if len(self.labels) != len(self.image_vecs):
            raise ValueError("labels length must match image count")
        n_classes = len(self.class_text_vecs)
        if np.any(self.labels < 0) or np.any(self.labels >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes})")
        _check_unit_norm("image", self.image_vecs)
        _check_unit_norm("class text", self.class_text_vecs)


@dataclass
class RetrievalEval:
    image_vecs: np.ndarray  # N x D, row i pairs with text row i
    text_vecs: np.ndarray  # N x D

    def __post_init__(self):
        self.image_vecs = np.asarray(self.image_vecs, dtype=np.float64)
        self.text_vecs = np.asarray(self.text_vecs, dtype=np.float64)
        if self.image_vecs.shape != self.text_vecs.shape:
            raise ValueError("retrieval eval needs index-aligned equal-shape matrices")
        _check_unit_norm("image", self.image_vecs)
        _check_unit_norm("text", self.text_vecs)


def top1_accuracy(ev: ClassificationEval) -> float:
    """Fraction of images whose most-similar class text is the true class.

    Ties break to the lowest class index (np.argmax's first-hit rule).
    """
    sims = ev.image_vecs @ ev.class_text_vecs.T
    predictions = np.argmax(sims, axis=1)
    return float(np.mean(predictions == ev.labels))


def recall_at_1(ev: RetrievalEval, direction: str = IMAGE_TO_TEXT) -> float:
    """Fraction of queries whose cosine nearest neighbor is the aligned partner."""
    if direction == IMAGE_TO_TEXT:
        sims = ev.image_vecs @ ev.text_vecs.T
    elif direction == TEXT_TO_IMAGE:
        sims = ev.text_vecs @ ev.image_vecs.T
    else:
        raise ValueError(f"unknown direction {direction!r}")
    nearest = np.argmax(sims, axis=1)
    return float(np.mean(nearest == np.arange(len(sims))))


# --- EMB1 embedding container ------------------------------------------------
# 16-byte header: magic "EMB1", u32 rows, u32 dim, u32 dtype (1 = f32 LE),
# followed by the row-major payload.


def write_embeddings(path: str | Path, matrix: np.ndarray) -> None:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    rows, dim = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", _EMB_MAGIC, rows, dim, _DTYPE_F32LE))
        f.write(arr.tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated EMB1 header")
        magic, rows, dim, dtype = struct.unpack("<4sIII", header)
        if magic != _EMB_MAGIC:
            raise ValueError(f"{path}: not an EMB1 container")
        if dtype != _DTYPE_F32LE:
            raise ValueError(f"{path}: unsupported dtype code {dtype}")
        payload = f.read(rows * dim * 4)
    if len(payload) != rows * dim * 4:
        raise ValueError(f"{path}: payload shorter than header promises")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float64)


def read_labels(path: str | Path) -> np.ndarray:
    """One integer class index per line."""
    values = [
        int(line.strip())
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    return np.asarray(values, dtype=np.int64)
