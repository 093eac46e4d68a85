"""Bloom-filter exact-match deduplication over URLs, captions and pHashes."""

from __future__ import annotations

import hashlib
import math
import struct
import threading
import unicodedata
from collections import Counter
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .pairs import PairCandidate

KIND_IMAGE_URL = "image_url"
KIND_CAPTION = "caption"
KIND_PHASH = "phash"
ALL_KINDS = (KIND_IMAGE_URL, KIND_CAPTION, KIND_PHASH)

_MAGIC = b"BLMF"
_VERSION = 1
# refuse to allocate more than 1 TiB of bits; anything beyond that is a
# sizing mistake, not a workload
_MAX_BITS = 1 << 43


class BloomSizeError(ValueError):
    pass


class SnapshotOrderError(ValueError):
    pass


def _digest128(data: bytes, seed: int) -> tuple[int, int]:
    """Two 64-bit halves of a seeded 128-bit digest of data."""
    key = struct.pack("<q", seed)
    d = hashlib.blake2b(data, digest_size=16, key=key).digest()
    return struct.unpack("<QQ", d)


class DedupKey:
    """Canonical 128-bit key for one dedup dimension of a pair."""

    __slots__ = ("kind", "h1", "h2")

    def __init__(self, kind: str, h1: int, h2: int):
        self.kind = kind
        self.h1 = h1
        self.h2 = h2

    @classmethod
    def from_value(cls, kind: str, value: str | int, seed: int = 0) -> "DedupKey":
        if kind == KIND_PHASH:
            data = struct.pack(">Q", int(value))
        elif kind == KIND_CAPTION:
            data = unicodedata.normalize("NFC", str(value).strip()).encode("utf-8")
        else:
            data = str(value).encode("utf-8")
        h1, h2 = _digest128(data, seed)
        return cls(kind, h1, h2)


def optimal_params(capacity: int, target_fpr: float) -> tuple[int, int]:
    """Bit count and hash count for the standard Bloom optima.

    m = ceil(-n ln p / (ln 2)^2); k is derived from the unrounded optimal
    m/n ratio, (m/n) ln 2, which reduces exactly to log2(1/p).
    """
    m = math.ceil(-capacity * math.log(target_fpr) / (math.log(2) ** 2))
    k = math.ceil(math.log2(1.0 / target_fpr))
    return max(m, 1), max(k, 1)


class BloomFilter:
    """Fixed-size bit array with k derived hash probes; no false negatives.

    check_and_insert is serialized by an internal lock (single-writer
    contract); readers of a quiescent filter need no locking.
    """

    def __init__(self, m: int, k: int, seed: int = 0):
        if m <= 0 or k <= 0:
            raise BloomSizeError(f"m and k must be positive, got m={m} k={k}")
        if m > _MAX_BITS:
            raise BloomSizeError(f"refusing to allocate {m} bits (> {_MAX_BITS})")
        self.m = m
        self.k = k
        self.seed = seed
        self.n_inserted = 0
        self._words = np.zeros((m + 63) // 64, dtype=np.uint64)
        self._lock = threading.Lock()

    @classmethod
    def for_capacity(cls, capacity: int, target_fpr: float, seed: int = 0) -> "BloomFilter":
        if capacity < 1:
            raise BloomSizeError("capacity must be >= 1")
        if not 0.0 < target_fpr < 1.0:
            raise BloomSizeError("target_fpr must be in (0, 1)")
        m, k = optimal_params(capacity, target_fpr)
        return cls(m, k, seed)

    def _indices(self, key: DedupKey) -> Iterator[int]:
        # Kirsch-Mitzenmacher double hashing over the 128-bit digest
        h1, h2 = key.h1, key.h2 | 1
        for i in range(self.k):
            yield (h1 + i * h2) % self.m

    def contains(self, key: DedupKey) -> bool:
        words = self._words
        for idx in self._indices(key):
            if not (int(words[idx >> 6]) >> (idx & 63)) & 1:
                return False
        return True

    def insert(self, key: DedupKey) -> None:
        words = self._words
        for idx in self._indices(key):
            words[idx >> 6] |= np.uint64(1 << (idx & 63))
        self.n_inserted += 1

    def check_and_insert(self, key: DedupKey) -> bool:
        """Insert key and report whether it was (probably) already present."""
        with self._lock:
            seen = True
            words = self._words
            for idx in self._indices(key):
                word, bit = idx >> 6, idx & 63
                if not (int(words[word]) >> bit) & 1:
                    seen = False
                    words[word] |= np.uint64(1 << bit)
            if not seen:
                self.n_inserted += 1
            return seen

    def save(self, path: str | Path) -> None:
        """Persist as BLMF v1: 16-byte header, u64 bit length, bit array."""
        with open(path, "wb") as f:
            f.write(struct.pack("<4sHHq", _MAGIC, _VERSION, self.k, self.seed))
            f.write(struct.pack("<Q", self.m))
            f.write(self._words.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "BloomFilter":
        with open(path, "rb") as f:
            magic, version, k, seed = struct.unpack("<4sHHq", f.read(16))
            if magic != _MAGIC:
                raise ValueError(f"not a BLMF file: magic {magic!r}")
            if version != _VERSION:
                raise ValueError(f"unsupported BLMF version {version}")
            (m,) = struct.unpack("<Q", f.read(8))
            filt = cls(m, k, seed)
            raw = f.read()
        words = np.frombuffer(raw, dtype=np.uint64)
        if len(words) != len(filt._words):
            raise ValueError("BLMF bit array length disagrees with header")
        filt._words = words.copy()
        return filt


def make_filters(
    kinds: Iterable[str], capacity: int, target_fpr: float, seed: int = 0
) -> dict[str, BloomFilter]:
    """One filter per key kind, seeds decorrelated per kind."""
    filters = {}
    for i, kind in enumerate(kinds):
        filters[kind] = BloomFilter.for_capacity(capacity, target_fpr, seed=seed + i)
    return filters


def pair_key(pair: PairCandidate, kind: str, seed: int) -> DedupKey:
    if kind == KIND_IMAGE_URL:
        return DedupKey.from_value(kind, pair.image_url, seed)
    if kind == KIND_CAPTION:
        return DedupKey.from_value(kind, pair.caption, seed)
    if kind == KIND_PHASH:
        if pair.phash is None:
            raise ValueError(f"pair {pair.image_url} has no phash for phash dedup")
        return DedupKey.from_value(kind, pair.phash, seed)
    raise ValueError(f"unknown dedup kind {kind!r}")


def dedup_stage(
    pairs: Iterable[PairCandidate],
    kinds: Sequence[str],
    filters: dict[str, BloomFilter],
    counters: Counter | None = None,
) -> Iterator[PairCandidate]:
    """Keep the first occurrence per key kind, in stream order.

    A pair is dropped when ANY requested kind has been seen before. All of
    its keys are inserted even when it is dropped for another kind, so the
    key spaces stay consistent regardless of which kind fired.
    """
    if counters is None:
        counters = Counter()
    missing = [k for k in kinds if k not in filters]
    if missing:
        raise ValueError(f"no filter supplied for kinds: {missing}")
    for pair in pairs:
        dropped_by = None
        for kind in kinds:
            filt = filters[kind]
            seen = filt.check_and_insert(pair_key(pair, kind, filt.seed))
            if seen and dropped_by is None:
                dropped_by = kind
        if dropped_by is None:
            yield pair
        else:
            counters[f"duplicate_{dropped_by}"] += 1


def merge_snapshots(
    snapshot_streams: Sequence[tuple[str, Iterable[PairCandidate]]],
    capacity: int,
    target_fpr: float,
    seed: int = 0,
) -> tuple[list[PairCandidate], dict[str, int]]:
    """Cross-snapshot dedup over fresh {image_url, caption, phash} filters.

    Streams must be ordered newest-first; each consumes after the ones
    before it, so older snapshots lose their previously-seen items. Returns
    survivors plus the per-snapshot survivor counts.
    """
    ids = [sid for sid, _ in snapshot_streams]
    dupes = {sid for sid in ids if ids.count(sid) > 1}
    if dupes:
        raise SnapshotOrderError(f"duplicate snapshot ids in merge input: {sorted(dupes)}")

    filters = make_filters(ALL_KINDS, capacity, target_fpr, seed)
    survivors: list[PairCandidate] = []
    per_snapshot: dict[str, int] = {}
    for snapshot_id, stream in snapshot_streams:
        kept = list(dedup_stage(stream, ALL_KINDS, filters))
        per_snapshot[snapshot_id] = len(kept)
        survivors.extend(kept)
    return survivors, per_snapshot
