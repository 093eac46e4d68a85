"""Acceptance suite: one test per release criterion, each printing a
pass/fail line and enforcing its runtime budget. Runs fully offline with
the mock scorer; no sidecar required."""

import random
import time

import numpy as np
import pytest

from warc2pairs.config import BloomConfig, FilterConfig, PipelineConfig
from warc2pairs.dedup import (
    KIND_CAPTION,
    KIND_IMAGE_URL,
    BloomFilter,
    DedupKey,
    dedup_stage,
    make_filters,
    merge_snapshots,
)
from warc2pairs.evalkit import (
    IMAGE_TO_TEXT,
    TEXT_TO_IMAGE,
    ClassificationEval,
    RetrievalEval,
    recall_at_1,
    top1_accuracy,
)
from warc2pairs.fetch import FetchPolicy, fetch_all
from warc2pairs.images import decode_image, phash, quality_gate
from warc2pairs.manifest import PIPELINE_STAGES
from warc2pairs.pairs import PairCandidate
from warc2pairs.pipeline import run_pipeline
from warc2pairs.scoring import filter_by_alignment, filter_by_nsfw

from conftest import DATA_DIR, gradient_image, png_bytes
from reference import (
    brute_recall_at_1,
    brute_top1_accuracy,
    exact_dedup_survivors,
    naive_phash,
)
from test_images import PHASH_GOLDEN, decode_fixture, image_of
from test_pipeline import GOLDEN_STAGE_OUTPUTS, snapshot_config


class budget:
    """Context manager asserting a wall-clock budget and printing a verdict."""

    def __init__(self, name: str, seconds: float):
        self.name = name
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.monotonic() - self.t0
        status = "PASS" if exc_type is None else "FAIL"
        print(f"[{status}] {self.name} ({elapsed:.2f}s / budget {self.seconds:.0f}s)")
        if exc_type is None:
            assert elapsed < self.seconds, f"{self.name}: {elapsed:.2f}s over budget"
        return False


def make_pair(url, caption, phash_value=None, snapshot="s"):
    return PairCandidate(
        image_url=url, caption=caption, caption_source="alt_attr",
        page_url="http://p.jp/", snapshot_id=snapshot, phash=phash_value,
    )


def image_with_exact_colors(width, height, n_colors):
    pixels = np.zeros((height, width, 3), dtype=np.uint8)
    flat = pixels.reshape(-1, 3)
    for i in range(flat.shape[0]):
        c = i % n_colors
        flat[i] = (c * 3 % 256, c * 7 % 256, c * 11 % 256)
    return pixels


def test_threshold_fidelity():
    with budget("threshold fidelity", 1.0):
        cfg = FilterConfig()

        # 150 px minimum: 149 rejected, 150 accepted
        assert quality_gate(image_of(gradient_image(149, 200, seed=1)), cfg)[1] == "too_small"
        assert quality_gate(image_of(gradient_image(150, 200, seed=1)), cfg)[0]
        assert quality_gate(image_of(gradient_image(200, 149, seed=1)), cfg)[1] == "too_small"

        # aspect ratio 0.5..2.0 inclusive: 2.01 rejected, 2.0 accepted
        assert quality_gate(image_of(gradient_image(402, 200, seed=2)), cfg)[1] == "bad_aspect"
        assert quality_gate(image_of(gradient_image(400, 200, seed=2)), cfg)[0]
        assert quality_gate(image_of(gradient_image(200, 402, seed=2)), cfg)[1] == "bad_aspect"
        assert quality_gate(image_of(gradient_image(200, 400, seed=2)), cfg)[0]

        # more than 32 unique colors: exactly 32 rejected, 33 accepted
        assert quality_gate(image_of(image_with_exact_colors(200, 200, 32)), cfg)[1] == "low_color"
        assert quality_gate(image_of(image_with_exact_colors(200, 200, 33)), cfg)[0]

        # NSFW: drop strictly above 0.1, keep 0.1 exactly
        eps_above = float(np.nextafter(0.1, 1.0))
        pairs = [make_pair("u1", "c1"), make_pair("u2", "c2")]
        pairs[0].stage_scores["nsfw"] = eps_above
        pairs[1].stage_scores["nsfw"] = 0.1
        kept = filter_by_nsfw(pairs, cfg)
        assert [p.image_url for p in kept] == ["u2"]

        # alignment: drop strictly below 0.1, keep 0.1 exactly
        eps_below = float(np.nextafter(0.1, -1.0))
        pairs = [make_pair("u1", "c1"), make_pair("u2", "c2")]
        pairs[0].stage_scores["align"] = eps_below
        pairs[1].stage_scores["align"] = 0.1
        kept, _ = filter_by_alignment(pairs, cfg)
        assert [p.image_url for p in kept] == ["u2"]


def _planted_duplicate_pairs(n, seed):
    rng = random.Random(seed)
    pairs = []
    for i in range(n):
        roll = rng.random()
        if i > 10 and roll < 0.15:
            donor = pairs[rng.randrange(len(pairs))]
            pairs.append(make_pair(donor.image_url, f"キャプション{i}"))
        elif i > 10 and roll < 0.30:
            donor = pairs[rng.randrange(len(pairs))]
            pairs.append(make_pair(f"http://h{i % 97}.jp/{i}.png", donor.caption))
        else:
            pairs.append(make_pair(f"http://h{i % 97}.jp/{i}.png", f"キャプション{i}"))
    return pairs


def test_dedup_oracle_equivalence():
    with budget("dedup oracle equivalence (1e5 pairs, p=0.001)", 30.0):
        n = 100_000
        p = 0.001
        pairs = _planted_duplicate_pairs(n, seed=21)
        kinds = (KIND_IMAGE_URL, KIND_CAPTION)

        bloom_survivors = list(
            dedup_stage(pairs, kinds, make_filters(kinds, n, p, seed=0))
        )
        exact_survivors = exact_dedup_survivors(pairs, kinds)

        bloom_ids = {id(x) for x in bloom_survivors}
        exact_ids = {id(x) for x in exact_survivors}
        assert bloom_ids <= exact_ids, "bloom dedup produced a false negative"
        assert len(exact_ids) - len(bloom_ids) <= 2 * p * n

        # idempotence: same seed and sizing remove nothing on a second pass.
        # This is deterministic, not statistical: with identical hash
        # functions, pass 2 inserts a subset of pass 1's keys in the same
        # order, so any bit pattern that was not fully set when an item
        # survived pass 1 cannot be fully set at its pass-2 check either.
        second = list(
            dedup_stage(bloom_survivors, kinds, make_filters(kinds, n, p, seed=0))
        )
        assert len(second) == len(bloom_survivors)


@pytest.mark.parametrize("target_fpr", [0.01, 0.001])
def test_bloom_false_positive_rate(target_fpr):
    with budget(f"bloom FPR at p={target_fpr}", 10.0):
        n = 100_000
        filt = BloomFilter.for_capacity(n, target_fpr, seed=7)
        for i in range(n):
            filt.check_and_insert(DedupKey.from_value(KIND_IMAGE_URL, f"member-{i}", seed=7))
        false_positives = sum(
            filt.contains(DedupKey.from_value(KIND_IMAGE_URL, f"absent-{i}", seed=7))
            for i in range(n)
        )
        assert false_positives / n <= 2 * target_fpr


def test_phash_golden_and_reencode_invariance():
    with budget("pHash golden vs reference implementation", 10.0):
        import io

        from PIL import Image

        for name, frozen in PHASH_GOLDEN.items():
            img = decode_fixture(name)
            produced = phash(img)
            assert produced == frozen, f"{name}: drifted from frozen golden"
            assert produced == naive_phash(img.pixels.tolist()), f"{name}: oracle disagrees"

        for i in range(20):
            data = (DATA_DIR / "phash" / f"fixture_{i:02d}.png").read_bytes()
            img = decode_image(data)
            buf = io.BytesIO()
            Image.fromarray(img.pixels, "RGB").save(buf, format="PNG", compress_level=1)
            assert phash(decode_image(buf.getvalue())) == phash(img)


def test_end_to_end_golden(tmp_path):
    with budget("end-to-end golden snapshot", 60.0):
        manifest_a = run_pipeline(snapshot_config(tmp_path / "a"))
        manifest_b = run_pipeline(snapshot_config(tmp_path / "b"))

        blob_a = (tmp_path / "a" / "manifest.json").read_bytes()
        blob_b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert blob_a == blob_b, "manifest not byte-identical across runs"

        outputs = {s["stage"]: s["output_count"] for s in manifest_a["stages"]}
        assert outputs == GOLDEN_STAGE_OUTPUTS

        for stage in manifest_a["stages"]:
            rejected = sum(stage["reject_counts"].values())
            assert stage["output_count"] + rejected == stage["input_count"], stage["stage"]
        assert [s["stage"] for s in manifest_a["stages"]] == list(PIPELINE_STAGES)


def test_cross_snapshot_merge_matches_exact_oracle():
    with budget("cross-snapshot merge vs exact oracle", 10.0):
        def stream(lo, hi, snapshot):
            return [
                make_pair(f"http://a.jp/{i}.png", f"説明{i}", phash_value=i * 13 + 7,
                          snapshot=snapshot)
                for i in range(lo, hi)
            ]

        newest = stream(0, 2000, "2025-18")
        middle = stream(1000, 3000, "2025-08")     # half-overlaps newest
        oldest = stream(500, 1500, "2024-51")      # fully inside newest

        ordered = [("2025-18", newest), ("2025-08", middle), ("2024-51", oldest)]
        survivors, counts = merge_snapshots(
            ordered, capacity=100_000, target_fpr=0.001, seed=0
        )

        kinds = ("image_url", "caption", "phash")
        expected_counts = {}
        running: list = []
        for snapshot_id, items in ordered:
            before = len(exact_dedup_survivors(running, kinds))
            running = running + list(items)
            after = len(exact_dedup_survivors(running, kinds))
            expected_counts[snapshot_id] = after - before

        assert counts == expected_counts
        assert counts["2024-51"] == 0, "fully-contained old snapshot must vanish"
        assert sum(counts.values()) == len(survivors)


def test_evalkit_matches_brute_force():
    with budget("evalkit vs brute force (100 instances)", 10.0):
        rng = np.random.RandomState(31)
        for trial in range(100):
            n = rng.randint(2, 65)
            d = rng.randint(2, 33)
            c = rng.randint(2, 17)

            image = rng.randn(n, d)
            image /= np.linalg.norm(image, axis=1, keepdims=True)
            classes = rng.randn(c, d)
            classes /= np.linalg.norm(classes, axis=1, keepdims=True)
            labels = rng.randint(0, c, size=n)
            fast = top1_accuracy(ClassificationEval(image, classes, labels))
            slow = brute_top1_accuracy(image.tolist(), classes.tolist(), labels.tolist())
            assert fast == slow, f"classification trial {trial}"

            text = rng.randn(n, d)
            text /= np.linalg.norm(text, axis=1, keepdims=True)
            ev = RetrievalEval(image, text)
            assert recall_at_1(ev, IMAGE_TO_TEXT) == brute_recall_at_1(
                image.tolist(), text.tolist()
            ), f"retrieval i2t trial {trial}"
            assert recall_at_1(ev, TEXT_TO_IMAGE) == brute_recall_at_1(
                text.tolist(), image.tolist()
            ), f"retrieval t2i trial {trial}"


def test_politeness_never_violated_over_1000_requests(http_server):
    with budget("politeness over 1000 requests", 60.0):
        interval = 0.02
        per_host = 2
        payload = png_bytes(gradient_image(16, 16, seed=77))
        servers = [
            http_server(
                {f"/i{k}.png": (200, "image/png", payload) for k in range(250)},
                handler_delay=0.002,
            )
            for _ in range(4)
        ]
        candidates = [
            make_pair(server.url(f"/i{k}.png"), f"c{idx}-{k}")
            for idx, server in enumerate(servers)
            for k in range(250)
        ]
        policy = FetchPolicy(
            max_concurrency=64,
            per_host_concurrency=per_host,
            per_host_min_interval=interval,
            timeout=10.0,
            obey_robots=False,
        )
        start_log: list = []
        results = fetch_all(candidates, policy, start_log=start_log)

        assert len(results) == 1000
        assert all(r.outcome == "ok" for r in results)

        # concurrency cap measured at each server: never above the setting
        for server in servers:
            assert server.max_live <= per_host, f"{server.port}: {server.max_live}"

        # reserved start times: spacing holds exactly, per host
        by_host: dict = {}
        for host, t in start_log:
            by_host.setdefault(host, []).append(t)
        assert sum(len(v) for v in by_host.values()) == 1000
        for host, times in by_host.items():
            times.sort()
            gaps = [b - a for a, b in zip(times, times[1:])]
            assert min(gaps) >= interval - 1e-9, f"{host}: gap {min(gaps):.6f}"

        # server-side corroboration, immune to per-request dispatch jitter:
        # the observed arrival RATE can never beat the interval setting
        window = 0.5
        for server in servers:
            times = sorted(t for _, t in server.arrivals)
            assert len(times) == 250
            span = times[-1] - times[0]
            assert span >= (len(times) - 1) * interval - 0.1, f"{server.port}: span {span:.2f}"
            allowed_per_window = int(window / interval) + 3
            lo = 0
            for hi, t in enumerate(times):
                while times[lo] < t - window:
                    lo += 1
                assert hi - lo + 1 <= allowed_per_window, (
                    f"{server.port}: {hi - lo + 1} arrivals inside {window}s"
                )
