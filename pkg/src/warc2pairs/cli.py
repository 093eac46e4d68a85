"""Command-line interface: full-pipeline runs plus stage-wise subcommands.

Every stage consumes and produces the documented intermediate files
(line-delimited pair records, a blobs/ directory, BLMF filter dumps), so
any stage can be rerun in isolation for resumable processing.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import dedup as dedup_mod
from . import docgate, evalkit, images, manifest, pipeline, scoring, warc
from .config import ConfigError, PipelineConfig, load_config, write_reference_config
from .fetch import OK, fetch_all
from .pairs import extract_pairs

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_CONFIG = 2


def _load_config_or_exit(args) -> PipelineConfig:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print("invalid config:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)
    if getattr(args, "snapshot", None):
        cfg.snapshot_id = args.snapshot
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "offline", None):
        cfg.offline_root = args.offline
    if getattr(args, "mock_scorer", False):
        cfg.scorer_mode = "mock"
    return cfg


# conventional intermediate layout under the run output directory, used by
# `run --stage` so individual stages can be rerun in isolation
_STAGE_FILES = {
    "ingest": (None, "docs.jsonl"),
    "pairs": ("docs.jsonl", "pairs.jsonl"),
    "dedup": ("pairs.jsonl", "pairs.dedup.jsonl"),
    "fetch": ("pairs.dedup.jsonl", "fetched.jsonl"),
    "filter-images": ("fetched.jsonl", "quality.jsonl"),
    "score": ("quality.jsonl", "scored.jsonl"),
    "filter-scores": ("scored.jsonl", "pairs.final.jsonl"),
    "shard": ("pairs.final.jsonl", "shards"),
}


def _run_single_stage(cfg: PipelineConfig, stage: str) -> int:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if stage not in _STAGE_FILES:
        print(f"unknown stage {stage!r}; one of {', '.join(_STAGE_FILES)}", file=sys.stderr)
        return EXIT_CONFIG
    src_name, dst_name = _STAGE_FILES[stage]
    src = out_dir / src_name if src_name else None
    dst = out_dir / dst_name
    if src is not None and not src.exists():
        print(f"stage {stage}: missing input {src} (run earlier stages first)", file=sys.stderr)
        return EXIT_FATAL
    ns = argparse.Namespace()
    if stage == "ingest":
        ns.warc, ns.url_list = list(cfg.warc_paths), cfg.warc_url_list
        ns.target_lang, ns.min_confidence = cfg.target_lang, cfg.lang_min_confidence
        ns.out = str(dst)
        return cmd_ingest(ns)
    if stage == "pairs":
        ns.docs, ns.snapshot, ns.out = str(src), cfg.snapshot_id, str(dst)
        return cmd_pairs(ns)
    if stage == "dedup":
        ns.pairs, ns.kinds, ns.out = str(src), "image_url,caption", str(dst)
        ns.capacity, ns.target_fpr, ns.seed = cfg.bloom.capacity, cfg.bloom.target_fpr, cfg.bloom.seed
        ns.filter_dir, ns.fresh_filters = str(out_dir / "filters"), False
        return cmd_dedup(ns)
    if stage == "fetch":
        ns.pairs, ns.blobs, ns.offline, ns.out = str(src), str(out_dir / "blobs"), cfg.offline_root, str(dst)
        ns.max_concurrency = cfg.fetch.max_concurrency
        ns.per_host_concurrency = cfg.fetch.per_host_concurrency
        ns.per_host_min_interval = cfg.fetch.per_host_min_interval
        ns.timeout, ns.max_bytes = cfg.fetch.timeout, cfg.fetch.max_bytes
        ns.no_robots, ns.user_agent = not cfg.fetch.obey_robots, cfg.fetch.user_agent
        return cmd_fetch(ns)
    if stage == "filter-images":
        ns.pairs, ns.blobs, ns.out = str(src), str(out_dir / "blobs"), str(dst)
        return cmd_filter_images(ns)
    if stage == "score":
        ns.pairs, ns.blobs, ns.out = str(src), str(out_dir / "blobs"), str(dst)
        ns.mock_scorer = cfg.scorer_mode == "mock"
        ns.endpoint, ns.stdio = cfg.scorer_endpoint, cfg.scorer_mode == "stdio"
        return cmd_score(ns)
    if stage == "filter-scores":
        ns.pairs, ns.out = str(src), str(dst)
        ns.nsfw_max, ns.alignment_min = cfg.filters.nsfw_max, cfg.filters.alignment_min
        ns.capacity, ns.target_fpr, ns.seed = cfg.bloom.capacity, cfg.bloom.target_fpr, cfg.bloom.seed
        ns.histogram = str(out_dir / "alignment_histogram.json")
        return cmd_filter_scores(ns)
    ns.pairs, ns.blobs, ns.shard_size, ns.out = str(src), str(out_dir / "blobs"), cfg.shard_size, str(dst)
    return cmd_shard(ns)


def cmd_run(args) -> int:
    cfg = _load_config_or_exit(args)
    if args.stage:
        return _run_single_stage(cfg, args.stage)
    try:
        doc = pipeline.run_pipeline(cfg)
    except Exception as exc:  # partial manifest already flushed by run_pipeline
        logger.error("pipeline failed: %s", exc)
        return EXIT_FATAL
    final = doc["stages"][-1]["output_count"]
    print(f"snapshot {doc['snapshot_id']}: {final} pairs -> {cfg.out_dir}")
    return EXIT_OK


def cmd_init_config(args) -> int:
    write_reference_config(args.out)
    print(f"wrote reference config to {args.out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    """WARC file(s) -> gated docs jsonl."""
    counters: Counter = Counter()
    locations = list(args.warc)
    if args.url_list:
        locations.extend(warc.read_url_list(args.url_list))
    accepted = 0

    def docs():
        nonlocal accepted
        for location in locations:
            with_source = warc.open_warc_source(location)
            try:
                for record in warc.stream_records(with_source, counters):
                    doc = warc.to_html_doc(record, counters)
                    if doc is None:
                        continue
                    decision = docgate.gate(
                        doc, target_lang=args.target_lang, min_confidence=args.min_confidence
                    )
                    counters[decision.method] += 1
                    if decision.accepted:
                        accepted += 1
                        yield doc
            finally:
                with_source.close()

    pipeline.write_docs_jsonl(docs(), args.out)
    print(f"accepted {accepted} documents -> {args.out} ({dict(counters)})")
    return EXIT_OK


def cmd_pairs(args) -> int:
    counters: Counter = Counter()
    snapshot_id = args.snapshot

    def pairs():
        for doc in pipeline.read_docs_jsonl(args.docs):
            yield from extract_pairs(doc, snapshot_id, counters)

    count = pipeline.write_pairs_jsonl(pairs(), args.out)
    print(f"extracted {count} pairs -> {args.out} ({dict(counters)})")
    return EXIT_OK


def cmd_dedup(args) -> int:
    kinds = tuple(args.kinds.split(","))
    filters = {}
    for kind in kinds:
        if kind not in dedup_mod.ALL_KINDS:
            print(f"unknown dedup kind {kind!r}", file=sys.stderr)
            return EXIT_CONFIG
        saved = Path(args.filter_dir) / f"{kind}.blmf" if args.filter_dir else None
        if saved is not None and saved.exists() and not args.fresh_filters:
            filters[kind] = dedup_mod.BloomFilter.load(saved)
        else:
            filters[kind] = dedup_mod.BloomFilter.for_capacity(
                args.capacity, args.target_fpr, seed=args.seed + dedup_mod.ALL_KINDS.index(kind)
            )
    counters: Counter = Counter()
    survivors = dedup_mod.dedup_stage(
        pipeline.read_pairs_jsonl(args.pairs), kinds, filters, counters
    )
    count = pipeline.write_pairs_jsonl(survivors, args.out)
    if args.filter_dir:
        Path(args.filter_dir).mkdir(parents=True, exist_ok=True)
        for kind, filt in filters.items():
            filt.save(Path(args.filter_dir) / f"{kind}.blmf")
    print(f"kept {count} pairs -> {args.out} ({dict(counters)})")
    return EXIT_OK


def cmd_fetch(args) -> int:
    from .config import FetchPolicy

    policy = FetchPolicy(
        max_concurrency=args.max_concurrency,
        per_host_concurrency=args.per_host_concurrency,
        per_host_min_interval=args.per_host_min_interval,
        timeout=args.timeout,
        max_bytes=args.max_bytes,
        obey_robots=not args.no_robots,
        user_agent=args.user_agent,
    )
    blob_dir = Path(args.blobs)
    blob_dir.mkdir(parents=True, exist_ok=True)
    outcomes: Counter = Counter()
    kept = []
    candidates = list(pipeline.read_pairs_jsonl(args.pairs))
    results = fetch_all(candidates, policy, offline_root=args.offline)
    results.sort(key=lambda r: r.seq)
    for result in results:
        outcomes[result.outcome] += 1
        if result.outcome != OK:
            continue
        name = manifest.image_digest_name(result.body, result.content_type)
        result.candidate.image_file = name
        path = blob_dir / name
        if not path.exists():
            path.write_bytes(result.body)
        kept.append(result.candidate)
    count = pipeline.write_pairs_jsonl(kept, args.out)
    print(f"fetched {count}/{len(candidates)} images -> {args.out} ({dict(outcomes)})")
    return EXIT_OK


def cmd_filter_images(args) -> int:
    from .config import FilterConfig

    cfg = FilterConfig()
    blob_dir = Path(args.blobs)
    counters: Counter = Counter()

    def survivors():
        for pair in pipeline.read_pairs_jsonl(args.pairs):
            if not pair.image_file:
                counters["missing_blob"] += 1
                continue
            blob = blob_dir / pair.image_file
            if not blob.is_file():
                counters["missing_blob"] += 1
                continue
            decoded = images.decode_image(blob.read_bytes(), counters)
            if decoded is None:
                continue
            accepted, reason = images.quality_gate(decoded, cfg)
            if not accepted:
                counters[reason] += 1
                continue
            pair.width = decoded.width
            pair.height = decoded.height
            pair.phash = images.phash(decoded)
            yield pair

    count = pipeline.write_pairs_jsonl(survivors(), args.out)
    print(f"kept {count} images -> {args.out} ({dict(counters)})")
    return EXIT_OK


def _require_blobs(pairs, blob_dir: Path, command: str) -> list:
    missing = [p.image_url for p in pairs if not p.image_file or not (blob_dir / p.image_file).is_file()]
    if missing:
        print(
            f"{command}: {len(missing)} records lack a fetched blob "
            f"(first: {missing[0]}); run fetch first",
            file=sys.stderr,
        )
        sys.exit(EXIT_FATAL)
    return pairs


def cmd_score(args) -> int:
    blob_dir = Path(args.blobs)
    pairs = _require_blobs(list(pipeline.read_pairs_jsonl(args.pairs)), blob_dir, "score")
    items = [((blob_dir / p.image_file).read_bytes(), p.caption) for p in pairs]
    if args.mock_scorer:
        records = [scoring.mock_scorer(img, caption) for img, caption in items]
    else:
        if not args.endpoint:
            print("score: --endpoint required unless --mock-scorer", file=sys.stderr)
            return EXIT_CONFIG
        if args.stdio:
            import shlex

            transport = scoring.StdioTransport(shlex.split(args.endpoint))
        else:
            transport = scoring.HttpTransport(args.endpoint)
        client = scoring.SidecarClient(transport)
        try:
            records = scoring.score_with_sidecar(items, client)
        finally:
            client.close()
    for pair, record in zip(pairs, records):
        pair.stage_scores["nsfw"] = record.nsfw
        pair.stage_scores["align"] = record.align
    count = pipeline.write_pairs_jsonl(pairs, args.out)
    print(f"scored {count} pairs -> {args.out}")
    return EXIT_OK


def cmd_filter_scores(args) -> int:
    from .config import FilterConfig

    cfg = FilterConfig(nsfw_max=args.nsfw_max, alignment_min=args.alignment_min)
    counters: Counter = Counter()
    pairs = list(pipeline.read_pairs_jsonl(args.pairs))
    pairs = scoring.filter_by_nsfw(pairs, cfg, counters)
    filters = dedup_mod.make_filters(
        (dedup_mod.KIND_PHASH,), args.capacity, args.target_fpr, args.seed
    )
    pairs = list(dedup_mod.dedup_stage(pairs, (dedup_mod.KIND_PHASH,), filters, counters))
    pairs, hist = scoring.filter_by_alignment(pairs, cfg, counters)
    count = pipeline.write_pairs_jsonl(pairs, args.out)
    if args.histogram:
        Path(args.histogram).write_text(
            json.dumps([int(v) for v in hist]) + "\n", encoding="utf-8"
        )
    print(f"kept {count} pairs -> {args.out} ({dict(counters)})")
    return EXIT_OK


def cmd_merge_snapshots(args) -> int:
    streams = []
    for spec in args.inputs:
        snapshot_id, _, path = spec.partition("=")
        if not path:
            print(f"merge-snapshots: inputs look like ID=path, got {spec!r}", file=sys.stderr)
            return EXIT_CONFIG
        streams.append((snapshot_id, pipeline.read_pairs_jsonl(path)))
    try:
        survivors, per_snapshot = dedup_mod.merge_snapshots(
            streams, args.capacity, args.target_fpr, args.seed
        )
    except dedup_mod.SnapshotOrderError as exc:
        print(f"merge-snapshots: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out:
        pipeline.write_pairs_jsonl(survivors, args.out)
    summary = {"per_snapshot": per_snapshot, "total": sum(per_snapshot.values())}
    print(manifest.format_summary(summary))
    return EXIT_OK


def cmd_shard(args) -> int:
    blob_dir = Path(args.blobs)
    pairs = _require_blobs(list(pipeline.read_pairs_jsonl(args.pairs)), blob_dir, "shard")

    def pairs_with_bytes():
        for pair in pairs:
            yield pair, (blob_dir / pair.image_file).read_bytes()

    index = manifest.write_shards(pairs_with_bytes(), args.shard_size, args.out)
    print(f"wrote {index['shard_count']} shards ({index['total']} pairs) -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    image_vecs = evalkit.read_embeddings(args.image_embeddings)
    text_vecs = evalkit.read_embeddings(args.text_embeddings)
    metrics: dict[str, float] = {}
    if args.labels:
        ev = evalkit.ClassificationEval(
            image_vecs=image_vecs,
            class_text_vecs=text_vecs,
            labels=evalkit.read_labels(args.labels),
        )
        metrics["top1_accuracy"] = evalkit.top1_accuracy(ev)
    else:
        ev = evalkit.RetrievalEval(image_vecs=image_vecs, text_vecs=text_vecs)
        metrics["recall_at_1_image_to_text"] = evalkit.recall_at_1(ev, evalkit.IMAGE_TO_TEXT)
        metrics["recall_at_1_text_to_image"] = evalkit.recall_at_1(ev, evalkit.TEXT_TO_IMAGE)
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def cmd_plot_hist(args) -> int:
    doc = manifest.load_manifest(args.manifest)
    svg = manifest.render_histogram_svg(doc["alignment_histogram"])
    Path(args.out).write_text(svg, encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warc2pairs",
        description="WARC snapshots -> deduplicated, filtered image-text pairs",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--snapshot", help="override snapshot_id")
    p.add_argument("--stage", help="run only this stage against the out-dir intermediates")
    p.add_argument("--out", help="override output directory")
    p.add_argument("--offline", metavar="DIR", help="serve image URLs from this directory")
    p.add_argument("--mock-scorer", action="store_true", help="use the deterministic mock scorer")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("init-config", help="write the reference config with all defaults")
    p.add_argument("--out", default="warc2pairs.yaml")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("ingest", help="WARC files -> language-gated docs jsonl")
    p.add_argument("warc", nargs="*", help="WARC paths or URLs")
    p.add_argument("--url-list", help="file with one WARC location per line")
    p.add_argument("--target-lang", default="ja")
    p.add_argument("--min-confidence", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pairs", help="docs jsonl -> extracted pair candidates")
    p.add_argument("docs")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("dedup", help="drop previously-seen pairs by URL/caption/phash")
    p.add_argument("pairs")
    p.add_argument("--kinds", default="image_url,caption")
    p.add_argument("--capacity", type=int, default=200_000_000)
    p.add_argument("--target-fpr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filter-dir", help="persist/restore BLMF filter files here")
    p.add_argument("--fresh-filters", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("fetch", help="download images for surviving pairs")
    p.add_argument("pairs")
    p.add_argument("--blobs", required=True, help="image blob directory")
    p.add_argument("--offline", metavar="DIR", help="file fetcher root (no network)")
    p.add_argument("--max-concurrency", type=int, default=256)
    p.add_argument("--per-host-concurrency", type=int, default=2)
    p.add_argument("--per-host-min-interval", type=float, default=0.5)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--max-bytes", type=int, default=20 * 1024 * 1024)
    p.add_argument("--no-robots", action="store_true")
    p.add_argument("--user-agent", default="warc2pairs/0.1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("filter-images", help="decode, quality-gate, and pHash images")
    p.add_argument("pairs")
    p.add_argument("--blobs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter_images)

    p = sub.add_parser("score", help="attach nsfw/alignment scores")
    p.add_argument("pairs")
    p.add_argument("--blobs", required=True)
    p.add_argument("--mock-scorer", action="store_true")
    p.add_argument("--endpoint", help="sidecar base URL, or command with --stdio")
    p.add_argument("--stdio", action="store_true", help="endpoint is a command to spawn")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("filter-scores", help="nsfw filter, phash dedup, alignment filter")
    p.add_argument("pairs")
    p.add_argument("--nsfw-max", type=float, default=0.1)
    p.add_argument("--alignment-min", type=float, default=0.1)
    p.add_argument("--capacity", type=int, default=200_000_000)
    p.add_argument("--target-fpr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--histogram", help="write the 200-bin histogram JSON here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter_scores)

    p = sub.add_parser("merge-snapshots", help="cross-snapshot dedup, newest first")
    p.add_argument("inputs", nargs="+", metavar="ID=pairs.jsonl")
    p.add_argument("--capacity", type=int, default=200_000_000)
    p.add_argument("--target-fpr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_merge_snapshots)

    p = sub.add_parser("shard", help="bundle final pairs into dataset shards")
    p.add_argument("pairs")
    p.add_argument("--blobs", required=True)
    p.add_argument("--shard-size", type=int, default=10_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_shard)

    p = sub.add_parser("eval", help="zero-shot metrics over embedding containers")
    p.add_argument("image_embeddings")
    p.add_argument("text_embeddings")
    p.add_argument("--labels", help="class labels file => classification mode")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-hist", help="render the manifest histogram to SVG")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_hist)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
