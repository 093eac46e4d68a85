import math

import numpy as np
import pytest

from warc2pairs.config import FilterConfig
from warc2pairs.pairs import PairCandidate
from warc2pairs.scoring import (
    CallableTransport,
    EmbeddingBatch,
    HttpTransport,
    ScorerProtocolError,
    ScorerTransportError,
    ScoreRecord,
    SidecarClient,
    alignment_histogram,
    cosine_scores,
    filter_by_alignment,
    filter_by_nsfw,
    mock_scorer,
    score_with_sidecar,
)


def scored_pair(i, nsfw=0.0, align=0.5):
    return PairCandidate(
        image_url=f"http://a.jp/{i}.png", caption=f"写真{i}", caption_source="alt_attr",
        page_url="http://a.jp/", snapshot_id="s", stage_scores={"nsfw": nsfw, "align": align},
    )


class TestEmbeddingBatch:
    def test_accepts_unit_rows(self):
        batch = EmbeddingBatch(np.eye(3), np.eye(3))
        assert batch.dim == 3

    def test_rejects_non_unit_rows(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(np.eye(3) * 2.0, np.eye(3))

    def test_rejects_misaligned_shapes(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(np.eye(3), np.eye(4))

    def test_tolerates_1e4_norm_slack(self):
        vecs = np.eye(3) * (1.0 + 5e-5)
        EmbeddingBatch(vecs, np.eye(3))


class TestCosineScores:
    def test_identical_vectors_score_one(self):
        batch = EmbeddingBatch(np.eye(4), np.eye(4))
        assert cosine_scores(batch) == pytest.approx([1.0] * 4)

    def test_orthogonal_vectors_score_zero(self):
        image = np.eye(2)
        text = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert cosine_scores(EmbeddingBatch(image, text)) == pytest.approx([0.0, 0.0])

    def test_hand_computed_dot_product(self):
        image = np.array([[0.6, 0.8]])
        text = np.array([[1.0, 0.0]])
        assert cosine_scores(EmbeddingBatch(image, text)) == pytest.approx([0.6])

    def test_agrees_with_naive_loop_at_high_dim(self):
        rng = np.random.RandomState(0)
        for dim in (32, 512, 4096):
            image = rng.randn(8, dim)
            image /= np.linalg.norm(image, axis=1, keepdims=True)
            text = rng.randn(8, dim)
            text /= np.linalg.norm(text, axis=1, keepdims=True)
            fast = cosine_scores(EmbeddingBatch(image, text))
            naive = [sum(a * b for a, b in zip(image[i], text[i])) for i in range(8)]
            assert fast == pytest.approx(naive, abs=1e-6)

    def test_scores_within_unit_interval(self):
        rng = np.random.RandomState(1)
        vecs = rng.randn(100, 16)
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        other = rng.randn(100, 16)
        other /= np.linalg.norm(other, axis=1, keepdims=True)
        scores = cosine_scores(EmbeddingBatch(vecs, other))
        assert np.all(scores <= 1.0 + 1e-6) and np.all(scores >= -1.0 - 1e-6)


class TestThresholdFilters:
    cfg = FilterConfig()

    def test_alignment_boundary_kept_low_dropped(self):
        pairs = [scored_pair(0, align=0.09), scored_pair(1, align=0.10), scored_pair(2, align=0.5)]
        kept, _ = filter_by_alignment(pairs, self.cfg)
        assert [p.stage_scores["align"] for p in kept] == [0.10, 0.5]

    def test_alignment_counts(self):
        pairs = [scored_pair(0, align=-0.2), scored_pair(1, align=0.1), scored_pair(2, align=0.5)]
        kept, _ = filter_by_alignment(pairs, self.cfg)
        assert len(kept) == 2

    def test_nsfw_boundary_kept_exceeding_dropped(self):
        pairs = [scored_pair(0, nsfw=0.11), scored_pair(1, nsfw=0.10), scored_pair(2, nsfw=0.0)]
        kept = filter_by_nsfw(pairs, self.cfg)
        assert [p.stage_scores["nsfw"] for p in kept] == [0.10, 0.0]

    def test_alignment_survivors_match_brute_force_scan(self):
        rng = np.random.RandomState(2)
        pairs = [scored_pair(i, align=float(s)) for i, s in enumerate(rng.uniform(-1, 1, 500))]
        kept, _ = filter_by_alignment(pairs, self.cfg)
        expected = {i for i, p in enumerate(pairs) if p.stage_scores["align"] >= 0.1}
        assert {int(p.image_url.rsplit("/", 1)[1][:-4]) for p in kept} == expected

    def test_threshold_monotonicity(self):
        rng = np.random.RandomState(3)
        pairs = [scored_pair(i, align=float(s)) for i, s in enumerate(rng.uniform(-1, 1, 300))]
        counts = []
        for threshold in (-0.5, 0.0, 0.1, 0.5, 0.9):
            cfg = FilterConfig(alignment_min=threshold)
            kept, _ = filter_by_alignment(pairs, cfg)
            counts.append(len(kept))
        assert counts == sorted(counts, reverse=True)

    def test_histogram_sums_to_prefilter_count(self):
        rng = np.random.RandomState(4)
        pairs = [scored_pair(i, align=float(s)) for i, s in enumerate(rng.uniform(-1, 1, 777))]
        _, hist = filter_by_alignment(pairs, self.cfg)
        assert hist.sum() == 777
        assert len(hist) == 200

    def test_histogram_bin_placement(self):
        hist = alignment_histogram([-1.0, -0.995, 0.0, 0.005, 0.999, 1.0])
        assert hist[0] == 2     # [-1.00, -0.99)
        assert hist[100] == 2   # [0.00, 0.01)
        assert hist[199] == 2   # [0.99, 1.00]
        assert hist.sum() == 6


class TestMockScorer:
    def test_deterministic(self):
        a = mock_scorer(b"imagebytes", "キャプション")
        b = mock_scorer(b"imagebytes", "キャプション")
        assert a == b

    def test_caption_sensitivity(self):
        base = mock_scorer(b"imagebytes", "キャプションA")
        changed = mock_scorer(b"imagebytes", "キャプションB")
        assert base != changed

    def test_image_sensitivity(self):
        assert mock_scorer(b"img1", "同じ") != mock_scorer(b"img2", "同じ")

    def test_scores_within_declared_ranges(self):
        rng = np.random.RandomState(5)
        for i in range(10_000):
            record = mock_scorer(rng.bytes(8), f"cap{i}")
            assert 0.0 <= record.nsfw <= 1.0
            assert -1.0 <= record.align <= 1.0


def protocol_handler(items_to_scores):
    """Build a well-behaved v1 endpoint handler for CallableTransport."""

    def handle(payload: dict) -> dict:
        if payload.get("op") == "hello":
            return {"proto": 1, "max_batch": 4, "model": "stub"}
        scores = items_to_scores(payload["items"])
        return {"batch_id": payload["batch_id"], "scores": scores}

    return handle


class TestSidecarClient:
    def fixed_handler(self, nsfw=0.0, align=0.9):
        return protocol_handler(
            lambda items: [{"nsfw": nsfw, "align": align} for _ in items]
        )

    def test_fixed_mock_endpoint(self):
        client = SidecarClient(CallableTransport(self.fixed_handler()), max_batch=8)
        records = score_with_sidecar([(b"x", "a"), (b"y", "b")], client)
        assert records == [ScoreRecord(0.0, 0.9)] * 2

    def test_hello_handshake(self):
        client = SidecarClient(CallableTransport(self.fixed_handler()))
        reply = client.hello()
        assert reply["proto"] == 1 and reply["max_batch"] == 4

    def test_batches_split_to_endpoint_max(self):
        sizes = []

        def handle(payload):
            if payload.get("op") == "hello":
                return {"proto": 1, "max_batch": 4, "model": "stub"}
            sizes.append(len(payload["items"]))
            return {"batch_id": payload["batch_id"],
                    "scores": [{"nsfw": 0, "align": 0}] * len(payload["items"])}

        client = SidecarClient(CallableTransport(handle), max_batch=None)
        records = client.score_pairs([(b"i", f"c{i}") for i in range(10)])
        assert len(records) == 10
        assert sizes == [4, 4, 2]

    def test_short_score_list_is_protocol_error(self):
        def handle(payload):
            if payload.get("op") == "hello":
                return {"proto": 1, "max_batch": 64, "model": "stub"}
            return {"batch_id": payload["batch_id"],
                    "scores": [{"nsfw": 0, "align": 0}] * (len(payload["items"]) - 1)}

        client = SidecarClient(CallableTransport(handle), max_batch=64)
        with pytest.raises(ScorerProtocolError) as err:
            client.score_batch([(b"a", "x"), (b"b", "y")])
        assert "b0000000" in str(err.value)

    def test_nan_score_is_protocol_error(self):
        handler = protocol_handler(
            lambda items: [{"nsfw": math.nan, "align": 0.0} for _ in items]
        )
        client = SidecarClient(CallableTransport(handler), max_batch=64)
        with pytest.raises(ScorerProtocolError):
            client.score_batch([(b"a", "x")])

    def test_mismatched_batch_id_is_protocol_error(self):
        def handle(payload):
            return {"batch_id": "wrong", "scores": [{"nsfw": 0, "align": 0}]}

        client = SidecarClient(CallableTransport(handle), max_batch=64)
        with pytest.raises(ScorerProtocolError):
            client.score_batch([(b"a", "x")])

    def test_transport_failure_retried_once(self):
        calls = {"n": 0}

        def handle(payload):
            calls["n"] += 1
            if calls["n"] == 1:
                raise ConnectionError("flaky")
            return {"batch_id": payload["batch_id"], "scores": [{"nsfw": 0, "align": 0.5}]}

        client = SidecarClient(CallableTransport(handle), max_batch=64)
        records = client.score_batch([(b"a", "x")])
        assert records[0].align == 0.5
        assert calls["n"] == 2

    def test_persistent_transport_failure_surfaces(self):
        def handle(payload):
            raise ConnectionError("down")

        client = SidecarClient(CallableTransport(handle), max_batch=64)
        with pytest.raises(ScorerTransportError):
            client.score_batch([(b"a", "x")])

    def test_http_transport_against_local_server(self, protocol_server):
        server = protocol_server(self.fixed_handler(nsfw=0.02, align=0.7))
        client = SidecarClient(HttpTransport(server.base_url))
        try:
            assert client.hello()["model"] == "stub"
            records = client.score_pairs([(b"img", "キャプション")] * 3)
            assert records == [ScoreRecord(0.02, 0.7)] * 3
        finally:
            client.close()
