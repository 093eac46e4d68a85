"""Full-pipeline orchestration in the canonical stage order.

ingest -> doc_gate -> pair_extract -> dedup(url, caption) -> fetch ->
quality_gate -> nsfw_filter -> phash_dedup -> alignment_filter -> shard.

Stages are lazy generators chained back to the WARC reader, so
backpressure is structural: nothing is pulled faster than the slowest
consumer. The orchestrator announces stages in cascade order and asserts
that order against manifest.PIPELINE_STAGES so a refactor cannot silently
reorder the filters.
"""

from __future__ import annotations

import json
import logging
import shlex
from collections import Counter
from pathlib import Path
from typing import Callable, Iterable, Iterator

from . import dedup as dedup_mod
from . import docgate, images, manifest, scoring, warc
from .config import PipelineConfig
from .fetch import OK, fetch_all
from .pairs import PairCandidate, extract_pairs

logger = logging.getLogger(__name__)

FETCH_CHUNK = 256


class FatalStageError(RuntimeError):
    """A stage failed in a way that invalidates the run."""


# --- per-stage generators ----------------------------------------------------


def iter_documents(
    cfg: PipelineConfig, stats: manifest.StatsRecorder, counters: Counter
) -> Iterator[warc.HtmlDoc]:
    """ingest: WARC records -> HTML response documents."""
    locations = list(cfg.warc_paths)
    if cfg.warc_url_list:
        locations.extend(warc.read_url_list(cfg.warc_url_list))
    for location in locations:
        stream_counters = Counter()
        source = warc.open_warc_source(location)
        try:
            for record in warc.stream_records(
                source, stream_counters, max_record_bytes=cfg.max_record_bytes
            ):
                if record.record_type != "response":
                    stats.record("ingest", False, "not_response")
                    continue
                doc = warc.to_html_doc(record, counters)
                if doc is None:
                    stats.record("ingest", False, "not_html")
                    continue
                stats.record("ingest", True)
                yield doc
        except warc.WarcStreamError as exc:
            raise FatalStageError(f"ingest: {location}: {exc}") from exc
        finally:
            source.close()
            stats.add_rejects("ingest", "malformed_record", stream_counters["malformed_records"])
            stats.add_rejects("ingest", "oversize_record", stream_counters["oversize_records"])
            counters.update(stream_counters)


def iter_gated(
    docs: Iterable[warc.HtmlDoc], cfg: PipelineConfig, stats: manifest.StatsRecorder
) -> Iterator[warc.HtmlDoc]:
    """doc_gate: language and structure acceptance."""
    for doc in docs:
        decision = docgate.gate(
            doc, target_lang=cfg.target_lang, min_confidence=cfg.lang_min_confidence
        )
        stats.record("doc_gate", decision.accepted, None if decision.accepted else decision.method)
        if decision.accepted:
            yield doc


def iter_pairs(
    docs: Iterable[warc.HtmlDoc],
    cfg: PipelineConfig,
    stats: manifest.StatsRecorder,
    counters: Counter,
) -> Iterator[PairCandidate]:
    """pair_extract: (image URL, caption) candidates with caption gates."""
    for doc in docs:
        extract_counters = Counter()
        for pair in extract_pairs(
            doc, cfg.snapshot_id, extract_counters, max_caption_chars=cfg.max_caption_chars
        ):
            stats.record("pair_extract", True)
            yield pair
        for reason in ("invalid_url", "no_japanese", "empty_caption"):
            stats.add_rejects("pair_extract", reason, extract_counters[reason])
        counters["caption_truncated"] += extract_counters["caption_truncated"]
        counters["figure_extra_images"] += extract_counters["figure_extra_images"]


def iter_deduped(
    pairs: Iterable[PairCandidate], cfg: PipelineConfig, stats: manifest.StatsRecorder
) -> Iterator[PairCandidate]:
    """dedup_url_caption: first occurrence wins, per URL and per caption."""
    kinds = (dedup_mod.KIND_IMAGE_URL, dedup_mod.KIND_CAPTION)
    filters = dedup_mod.make_filters(
        kinds, cfg.bloom.capacity, cfg.bloom.target_fpr, cfg.bloom.seed
    )
    counters: Counter = Counter()
    for pair in dedup_mod.dedup_stage(pairs, kinds, filters, counters):
        stats.record("dedup_url_caption", True)
        yield pair
    for reason, count in counters.items():
        stats.add_rejects("dedup_url_caption", reason, count)


def run_fetch_stage(
    pairs: Iterable[PairCandidate],
    cfg: PipelineConfig,
    stats: manifest.StatsRecorder,
    blob_dir: Path,
) -> Iterator[tuple[PairCandidate, bytes]]:
    """fetch: download image bytes (or read them offline), write blobs."""
    blob_dir.mkdir(parents=True, exist_ok=True)
    politeness_state: dict[str, float] = {}

    def flush(batch: list[PairCandidate]) -> Iterator[tuple[PairCandidate, bytes]]:
        results = fetch_all(batch, cfg.fetch, offline_root=cfg.offline_root,
                            politeness_state=politeness_state)
        results.sort(key=lambda r: r.seq)  # deterministic downstream order
        for result in results:
            if result.outcome != OK:
                stats.record("fetch", False, result.outcome)
                continue
            name = manifest.image_digest_name(result.body, result.content_type)
            result.candidate.image_file = name
            blob_path = blob_dir / name
            if not blob_path.exists():
                blob_path.write_bytes(result.body)
            stats.record("fetch", True)
            yield result.candidate, result.body

    batch: list[PairCandidate] = []
    for pair in pairs:
        batch.append(pair)
        if len(batch) >= FETCH_CHUNK:
            yield from flush(batch)
            batch = []
    if batch:
        yield from flush(batch)


def iter_quality(
    pairs_with_bytes: Iterable[tuple[PairCandidate, bytes]],
    cfg: PipelineConfig,
    stats: manifest.StatsRecorder,
) -> Iterator[tuple[PairCandidate, bytes]]:
    """quality_gate: decode, heuristic gates, pHash computation."""
    for pair, data in pairs_with_bytes:
        decoded = images.decode_image(data)
        if decoded is None:
            stats.record("quality_gate", False, images.REJECT_DECODE_FAILED)
            continue
        accepted, reason = images.quality_gate(decoded, cfg.filters)
        if not accepted:
            stats.record("quality_gate", False, reason)
            continue
        pair.width = decoded.width
        pair.height = decoded.height
        pair.phash = images.phash(decoded)
        stats.record("quality_gate", True)
        yield pair, data


def make_scorer_client(cfg: PipelineConfig) -> scoring.SidecarClient:
    if cfg.scorer_mode == "http":
        transport = scoring.HttpTransport(cfg.scorer_endpoint)
    elif cfg.scorer_mode == "stdio":
        transport = scoring.StdioTransport(shlex.split(cfg.scorer_endpoint))
    else:
        raise ValueError(f"no sidecar client for scorer mode {cfg.scorer_mode!r}")
    return scoring.SidecarClient(transport, max_batch=None)


def apply_scores(
    pairs_with_bytes: Iterable[tuple[PairCandidate, bytes]],
    cfg: PipelineConfig,
    scorer: Callable[[bytes, str], scoring.ScoreRecord] | None = None,
) -> Iterator[PairCandidate]:
    """Populate nsfw/align scores (not a counted stage: conservation is 1:1)."""
    if scorer is None and cfg.scorer_mode == "mock":
        scorer = scoring.mock_scorer

    if scorer is not None:
        for pair, data in pairs_with_bytes:
            record = scorer(data, pair.caption)
            pair.stage_scores["nsfw"] = record.nsfw
            pair.stage_scores["align"] = record.align
            yield pair
        return

    client = make_scorer_client(cfg)
    try:
        batch: list[tuple[PairCandidate, bytes]] = []
        for item in pairs_with_bytes:
            batch.append(item)
            if len(batch) >= cfg.scorer_max_batch:
                yield from _score_batch(batch, client)
                batch = []
        if batch:
            yield from _score_batch(batch, client)
    finally:
        client.close()


def _score_batch(batch, client) -> Iterator[PairCandidate]:
    records = client.score_pairs([(data, pair.caption) for pair, data in batch])
    for (pair, _), record in zip(batch, records):
        pair.stage_scores["nsfw"] = record.nsfw
        pair.stage_scores["align"] = record.align
        yield pair


def run_filter_stages(
    scored_pairs: Iterable[PairCandidate],
    cfg: PipelineConfig,
    stats: manifest.StatsRecorder,
) -> tuple[list[PairCandidate], list[int]]:
    """nsfw_filter -> phash_dedup -> alignment_filter, in that order."""
    pairs = list(scored_pairs)

    logger.info("stage %s start", "nsfw_filter")
    nsfw_counters: Counter = Counter()
    pairs = scoring.filter_by_nsfw(pairs, cfg.filters, nsfw_counters)
    for _ in pairs:
        stats.record("nsfw_filter", True)
    stats.add_rejects("nsfw_filter", "nsfw_exceeds", nsfw_counters["nsfw_exceeds"])

    logger.info("stage %s start", "phash_dedup")
    phash_counters: Counter = Counter()
    filters = dedup_mod.make_filters(
        (dedup_mod.KIND_PHASH,), cfg.bloom.capacity, cfg.bloom.target_fpr, cfg.bloom.seed
    )
    survivors = list(
        dedup_mod.dedup_stage(pairs, (dedup_mod.KIND_PHASH,), filters, phash_counters)
    )
    for _ in survivors:
        stats.record("phash_dedup", True)
    stats.add_rejects("phash_dedup", "duplicate_phash", phash_counters["duplicate_phash"])

    logger.info("stage %s start", "alignment_filter")
    align_counters: Counter = Counter()
    kept, hist = scoring.filter_by_alignment(survivors, cfg.filters, align_counters)
    for _ in kept:
        stats.record("alignment_filter", True)
    stats.add_rejects("alignment_filter", "alignment_below", align_counters["alignment_below"])

    return kept, [int(v) for v in hist]


def run_pipeline(
    cfg: PipelineConfig,
    scorer: Callable[[bytes, str], scoring.ScoreRecord] | None = None,
) -> dict:
    """Execute the whole cascade; returns the manifest written to out_dir."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob_dir = out_dir / "blobs"
    stats = manifest.StatsRecorder()
    counters: Counter = Counter()

    try:
        # wire the lazy chain in cascade order; each stage is announced as
        # it is attached so observers see the canonical order
        logger.info("stage %s start", "ingest")
        docs = iter_documents(cfg, stats, counters)
        logger.info("stage %s start", "doc_gate")
        gated = iter_gated(docs, cfg, stats)
        logger.info("stage %s start", "pair_extract")
        pairs = iter_pairs(gated, cfg, stats, counters)
        logger.info("stage %s start", "dedup_url_caption")
        deduped = iter_deduped(pairs, cfg, stats)
        logger.info("stage %s start", "fetch")
        fetched = run_fetch_stage(deduped, cfg, stats, blob_dir)
        logger.info("stage %s start", "quality_gate")
        quality = iter_quality(fetched, cfg, stats)
        scored = apply_scores(quality, cfg, scorer=scorer)
        final_pairs, hist = run_filter_stages(scored, cfg, stats)
    except Exception:
        partial = manifest.build_manifest(
            cfg.snapshot_id, stats, cfg.fingerprint(), extra_counters=dict(counters)
        )
        manifest.write_manifest(partial, out_dir / "manifest.json")
        raise

    logger.info("stage %s start", "shard")
    with open(out_dir / "pairs.final.jsonl", "w", encoding="utf-8") as f:
        for pair in final_pairs:
            f.write(manifest.record_line(pair) + "\n")

    def pairs_with_blob_bytes() -> Iterator[tuple[PairCandidate, bytes]]:
        for pair in final_pairs:
            blob = blob_dir / pair.image_file
            yield pair, blob.read_bytes()
            stats.record("shard", True)

    manifest.write_shards(pairs_with_blob_bytes(), cfg.shard_size, out_dir / "shards")

    doc = manifest.build_manifest(
        cfg.snapshot_id,
        stats,
        cfg.fingerprint(),
        alignment_histogram=hist,
        extra_counters=dict(counters),
    )
    manifest.write_manifest(doc, out_dir / "manifest.json")
    return doc


# --- intermediate jsonl helpers (stage-wise subcommands) ----------------------


def write_pairs_jsonl(pairs: Iterable[PairCandidate], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for pair in pairs:
            f.write(manifest.record_line(pair) + "\n")
            count += 1
    return count


def read_pairs_jsonl(path: str | Path) -> Iterator[PairCandidate]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield PairCandidate.from_record(json.loads(line))


def write_docs_jsonl(docs: Iterable[warc.HtmlDoc], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(
                json.dumps(
                    {
                        "url": doc.url,
                        "declared_lang": doc.declared_lang,
                        "title": doc.title,
                        "raw_html": doc.raw_html,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            count += 1
    return count


def read_docs_jsonl(path: str | Path) -> Iterator[warc.HtmlDoc]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rec = json.loads(line)
                yield warc.HtmlDoc(
                    url=rec["url"],
                    raw_html=rec["raw_html"],
                    declared_lang=rec.get("declared_lang"),
                    title=rec.get("title"),
                )
