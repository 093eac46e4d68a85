"""Per-stage accounting, manifest serialization, and dataset shard output."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .pairs import PairCandidate

MANIFEST_VERSION = 1

# pipeline stage order; the orchestrator and the manifest both assert it
PIPELINE_STAGES = (
    "ingest",
    "doc_gate",
    "pair_extract",
    "dedup_url_caption",
    "fetch",
    "quality_gate",
    "nsfw_filter",
    "phash_dedup",
    "alignment_filter",
    "shard",
)


class UnknownStageError(KeyError):
    pass


class ConservationError(AssertionError):
    pass


@dataclass
class StageStats:
    stage: str
    input_count: int = 0
    output_count: int = 0
    reject_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "input_count": self.input_count,
            "output_count": self.output_count,
            "reject_counts": dict(sorted(self.reject_counts.items())),
        }


class StatsRecorder:
    """Thread-safe per-stage accept/reject counters.

    Inputs are counted independently of outputs and rejects so that
    validate() is a real conservation check, not a tautology.
    """

    def __init__(self, stages: Iterable[str] = PIPELINE_STAGES):
        self._stages = {name: StageStats(name) for name in stages}
        self._order = list(self._stages)
        self._lock = threading.Lock()

    def record(self, stage: str, accepted: bool, reason: str | None = None) -> None:
        try:
            stats = self._stages[stage]
        except KeyError:
            raise UnknownStageError(f"stage {stage!r} is not registered") from None
        with self._lock:
            stats.input_count += 1
            if accepted:
                stats.output_count += 1
            else:
                key = reason or "rejected"
                stats.reject_counts[key] = stats.reject_counts.get(key, 0) + 1

    def add_rejects(self, stage: str, reason: str, count: int) -> None:
        """Bulk-record items that were consumed and rejected before this
        stage could see them individually (e.g. malformed WARC records)."""
        if count <= 0:
            return
        try:
            stats = self._stages[stage]
        except KeyError:
            raise UnknownStageError(f"stage {stage!r} is not registered") from None
        with self._lock:
            stats.input_count += count
            stats.reject_counts[reason] = stats.reject_counts.get(reason, 0) + count

    def stage(self, name: str) -> StageStats:
        return self._stages[name]

    def stages(self) -> list[StageStats]:
        return [self._stages[name] for name in self._order]

    def validate(self) -> None:
        for stats in self.stages():
            derived = stats.output_count + sum(stats.reject_counts.values())
            if derived != stats.input_count:
                raise ConservationError(
                    f"stage {stats.stage}: output+rejects {derived} != input {stats.input_count}"
                )


def build_manifest(
    snapshot_id: str,
    recorder: StatsRecorder,
    config_fingerprint: str,
    alignment_histogram: np.ndarray | list[int] | None = None,
    extra_counters: dict[str, int] | None = None,
) -> dict:
    recorder.validate()
    hist = [0] * 200 if alignment_histogram is None else [int(v) for v in alignment_histogram]
    if len(hist) != 200:
        raise ValueError(f"alignment histogram must have 200 bins, got {len(hist)}")
    return {
        "manifest_version": MANIFEST_VERSION,
        "snapshot_id": snapshot_id,
        "config_fingerprint": config_fingerprint,
        "stages": [s.to_dict() for s in recorder.stages()],
        "alignment_histogram": hist,
        "counters": dict(sorted((extra_counters or {}).items())),
    }


def manifest_to_json(manifest: dict) -> bytes:
    """Canonical byte form: fixed key order as constructed, 2-space indent."""
    return (json.dumps(manifest, ensure_ascii=False, indent=2) + "\n").encode("utf-8")


def write_manifest(manifest: dict, path: str | Path) -> None:
    Path(path).write_bytes(manifest_to_json(manifest))


def load_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# --- shard output ----------------------------------------------------------


def image_digest_name(data: bytes, content_type: str | None = None) -> str:
    """Stable blob filename: truncated content digest + format extension."""
    ext = {
        "image/jpeg": ".jpg",
        "image/png": ".png",
        "image/webp": ".webp",
        "image/gif": ".gif",
    }.get((content_type or "").split(";")[0].strip().lower(), ".bin")
    return hashlib.sha256(data).hexdigest()[:32] + ext


def record_line(pair: PairCandidate) -> str:
    """One metadata line; key order is fixed for diff-friendliness."""
    return json.dumps(pair.to_record(), ensure_ascii=False)


def write_shards(
    pairs_with_bytes: Iterable[tuple[PairCandidate, bytes]],
    shard_size: int,
    out_dir: str | Path,
) -> dict:
    """Write numbered shard directories plus a shard index.

    Each shard holds image blobs named by content digest and one
    metadata.jsonl with the fixed-order record per pair. Returns the index
    structure that was written to index.json.
    """
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    shards: list[dict] = []
    shard_idx = -1
    shard_count = 0
    meta_file = None
    shard_path = None

    def _open_next():
        nonlocal shard_idx, shard_count, meta_file, shard_path
        if meta_file is not None:
            meta_file.close()
        shard_idx += 1
        shard_count = 0
        shard_path = out / f"shard-{shard_idx:05d}"
        shard_path.mkdir(exist_ok=True)
        meta_file = open(shard_path / "metadata.jsonl", "w", encoding="utf-8")
        shards.append({"name": shard_path.name, "count": 0})

    total = 0
    try:
        for pair, data in pairs_with_bytes:
            if meta_file is None or shard_count >= shard_size:
                _open_next()
            name = pair.image_file or image_digest_name(data)
            pair.image_file = name
            blob_path = shard_path / name
            if not blob_path.exists():
                blob_path.write_bytes(data)
            meta_file.write(record_line(pair) + "\n")
            shard_count += 1
            shards[-1]["count"] = shard_count
            total += 1
    finally:
        if meta_file is not None:
            meta_file.close()

    index = {"total": total, "shard_count": len(shards), "shards": shards}
    (out / "index.json").write_text(
        json.dumps(index, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    return index


# --- aggregation and plotting ----------------------------------------------


def summarize(manifests: Iterable[dict]) -> dict:
    """Final per-snapshot counts (last stage output) and their grand total."""
    per_snapshot = {}
    for manifest in manifests:
        stages = manifest.get("stages", [])
        final = stages[-1]["output_count"] if stages else 0
        per_snapshot[manifest.get("snapshot_id", "?")] = final
    return {"per_snapshot": per_snapshot, "total": sum(per_snapshot.values())}


def format_summary(summary: dict) -> str:
    lines = [f"{'snapshot':<12} {'examples':>14}", "-" * 27]
    for snapshot_id, count in summary["per_snapshot"].items():
        lines.append(f"{snapshot_id:<12} {count:>14,}")
    lines.append("-" * 27)
    lines.append(f"{'total':<12} {summary['total']:>14,}")
    return "\n".join(lines)


def render_histogram_svg(hist: list[int], title: str = "alignment score distribution") -> str:
    """Self-contained SVG bar chart of the 200-bin [-1, 1] histogram."""
    width, height, pad = 820, 320, 40
    n = len(hist)
    peak = max(max(hist), 1)
    bar_w = (width - 2 * pad) / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
    ]
    for i, count in enumerate(hist):
        if count <= 0:
            continue
        h = (height - 2 * pad) * count / peak
        x = pad + i * bar_w
        y = height - pad - h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" height="{h:.2f}" fill="#4477aa"/>'
        )
    for frac, label in ((0.0, "-1.0"), (0.25, "-0.5"), (0.5, "0.0"), (0.75, "0.5"), (1.0, "1.0")):
        x = pad + frac * (width - 2 * pad)
        parts.append(
            f'<line x1="{x:.1f}" y1="{height - pad}" x2="{x:.1f}" y2="{height - pad + 5}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{height - pad + 18}" text-anchor="middle" font-size="11">{label}</text>'
        )
    parts.append(
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts)
