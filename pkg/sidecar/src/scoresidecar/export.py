"""Embedding export: EMB1 containers consumable by the pipeline's eval kit.

Container layout (external interface): 16-byte header of magic "EMB1",
u32 rows, u32 dim, u32 dtype code (1 = f32 little-endian), then the
row-major payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"EMB1"
_DTYPE_F32LE = 1


def write_emb1(path: str | Path, matrix: np.ndarray) -> None:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    rows, dim = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", _MAGIC, rows, dim, _DTYPE_F32LE))
        f.write(arr.tobytes())


def iter_pair_records(pairs_path: str | Path):
    with open(pairs_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def export_pair_embeddings(
    service,
    pairs_path: str | Path,
    blobs_dir: str | Path,
    image_out: str | Path,
    text_out: str | Path,
) -> int:
    """Embed every pair record's image and caption, index-aligned."""
    backend = service.backend
    blobs = Path(blobs_dir)
    image_rows = []
    text_rows = []
    for record in iter_pair_records(pairs_path):
        data = (blobs / record["image_file"]).read_bytes()
        image_rows.append(backend.embed_image(data))
        text_rows.append(backend.embed_text(record["caption"]))
    if not image_rows:
        raise ValueError(f"no records in {pairs_path}")
    write_emb1(image_out, np.vstack(image_rows))
    write_emb1(text_out, np.vstack(text_rows))
    return len(image_rows)


def export_text_embeddings(service, lines_path: str | Path, out_path: str | Path) -> int:
    """One embedding per non-empty line (e.g. class names for zero-shot)."""
    backend = service.backend
    rows = [
        backend.embed_text(line.strip())
        for line in Path(lines_path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not rows:
        raise ValueError(f"no lines in {lines_path}")
    write_emb1(out_path, np.vstack(rows))
    return len(rows)
