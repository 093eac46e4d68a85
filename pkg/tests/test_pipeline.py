import json
import logging
from pathlib import Path

import pytest

from warc2pairs.config import BloomConfig, PipelineConfig
from warc2pairs.manifest import PIPELINE_STAGES
from warc2pairs.pipeline import FatalStageError, run_pipeline

from conftest import DATA_DIR

SNAPSHOT = DATA_DIR / "snapshot_mini"

# frozen after the first verified run against the bundled snapshot
# (hand-checked: 57 records = 53 pages + request + metadata + png response
# + 1 truncated member; 47 gated docs = 53 - 3 no-title - 2 english - 1 empty)
GOLDEN_STAGE_OUTPUTS = {
    "ingest": 53,
    "doc_gate": 47,
    "pair_extract": 163,
    "dedup_url_caption": 92,
    "fetch": 89,
    "quality_gate": 74,
    "nsfw_filter": 40,
    "phash_dedup": 39,
    "alignment_filter": 31,
    "shard": 31,
}


def snapshot_config(out_dir, **overrides) -> PipelineConfig:
    kw = dict(
        snapshot_id="2025-01",
        warc_paths=[str(SNAPSHOT / "snapshot.warc.gz")],
        offline_root=str(SNAPSHOT / "web"),
        scorer_mode="mock",
        out_dir=str(out_dir),
        shard_size=16,
        bloom=BloomConfig(capacity=100_000, target_fpr=0.001, seed=0),
    )
    kw.update(overrides)
    return PipelineConfig(**kw)


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    manifest = run_pipeline(snapshot_config(out))
    return out, manifest


class TestEndToEnd:
    def test_golden_stage_outputs(self, pipeline_run):
        _, manifest = pipeline_run
        outputs = {s["stage"]: s["output_count"] for s in manifest["stages"]}
        assert outputs == GOLDEN_STAGE_OUTPUTS

    def test_conservation_at_every_stage(self, pipeline_run):
        _, manifest = pipeline_run
        for stage in manifest["stages"]:
            rejected = sum(stage["reject_counts"].values())
            assert stage["output_count"] + rejected == stage["input_count"], stage["stage"]

    def test_stage_order_matches_cascade(self, pipeline_run):
        _, manifest = pipeline_run
        assert [s["stage"] for s in manifest["stages"]] == list(PIPELINE_STAGES)

    def test_counts_monotone_after_pair_extraction(self, pipeline_run):
        _, manifest = pipeline_run
        outputs = [s["output_count"] for s in manifest["stages"]]
        pair_stage = list(PIPELINE_STAGES).index("pair_extract")
        tail = outputs[pair_stage:]
        assert tail == sorted(tail, reverse=True)

    def test_manifest_byte_identical_across_runs(self, pipeline_run, tmp_path):
        out1, _ = pipeline_run
        run_pipeline(snapshot_config(tmp_path / "again"))
        first = (out1 / "manifest.json").read_bytes()
        second = (tmp_path / "again" / "manifest.json").read_bytes()
        assert first == second

    def test_histogram_sums_to_prefilter_pairs(self, pipeline_run):
        _, manifest = pipeline_run
        assert sum(manifest["alignment_histogram"]) == GOLDEN_STAGE_OUTPUTS["phash_dedup"]

    def test_shards_match_final_count(self, pipeline_run):
        out, manifest = pipeline_run
        index = json.loads((out / "shards" / "index.json").read_text())
        assert index["total"] == GOLDEN_STAGE_OUTPUTS["shard"]
        assert [s["count"] for s in index["shards"]] == [16, 15]
        lines = 0
        for shard in index["shards"]:
            shard_dir = out / "shards" / shard["name"]
            lines += len((shard_dir / "metadata.jsonl").read_text().splitlines())
            blobs = [p for p in shard_dir.iterdir() if p.name != "metadata.jsonl"]
            assert blobs, "shard should contain image blobs"
        assert lines == index["total"]

    def test_final_records_fully_populated(self, pipeline_run):
        out, _ = pipeline_run
        for line in (out / "pairs.final.jsonl").read_text().splitlines():
            record = json.loads(line)
            assert record["image_file"] and record["phash_hex"]
            assert record["width"] >= 150 and record["height"] >= 150
            assert record["nsfw"] <= 0.1
            assert record["align"] >= 0.1
            assert record["snapshot_id"] == "2025-01"

    def test_exercised_reject_reasons(self, pipeline_run):
        _, manifest = pipeline_run
        rejects = {s["stage"]: s["reject_counts"] for s in manifest["stages"]}
        assert rejects["ingest"]["malformed_record"] == 1
        assert rejects["doc_gate"]["rejected_no_title"] == 3
        assert rejects["doc_gate"]["rejected_no_text"] == 1
        assert rejects["pair_extract"]["invalid_url"] == 6
        assert rejects["pair_extract"]["no_japanese"] == 6
        assert rejects["fetch"]["http_error"] == 2
        assert rejects["quality_gate"]["too_small"] == 6
        assert rejects["quality_gate"]["decode_failed"] == 1
        assert rejects["phash_dedup"]["duplicate_phash"] >= 1
        assert manifest["counters"]["caption_truncated"] == 1
        assert manifest["counters"]["figure_extra_images"] == 1

    def test_stage_start_order_observed(self, tmp_path, caplog):
        with caplog.at_level(logging.INFO, logger="warc2pairs.pipeline"):
            run_pipeline(snapshot_config(tmp_path / "ordered"))
        starts = [
            record.args[0] if record.args else None
            for record in caplog.records
            if record.msg.startswith("stage %s start")
        ]
        assert starts == list(PIPELINE_STAGES)


class TestFailureHandling:
    def test_fatal_ingest_flushes_partial_manifest(self, tmp_path):
        bogus = tmp_path / "junk.warc"
        bogus.write_bytes(b"complete nonsense, no archive here " * 20)
        cfg = snapshot_config(tmp_path / "out", warc_paths=[str(bogus)])
        with pytest.raises(FatalStageError):
            run_pipeline(cfg)
        partial = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert partial["manifest_version"] == 1
        assert [s["stage"] for s in partial["stages"]] == list(PIPELINE_STAGES)
