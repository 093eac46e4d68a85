"""NSFW / alignment scoring: threshold filters, sidecar client, test mock.

Boundary semantics are deliberate and asymmetric: NSFW drops only scores
strictly exceeding the threshold, alignment keeps scores at or above it.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import struct
import subprocess
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import FilterConfig
from .pairs import PairCandidate

HISTOGRAM_BINS = 200  # width 0.01 over [-1, 1]

PROTO_VERSION = 1


class ScorerProtocolError(RuntimeError):
    """The endpoint violated the wire contract (message names the batch)."""


class ScorerTransportError(RuntimeError):
    """The endpoint could not be reached or the transport broke mid-call."""


@dataclass(frozen=True)
class ScoreRecord:
    nsfw: float  # [0, 1]
    align: float  # [-1, 1]


@dataclass
class EmbeddingBatch:
    """Index-aligned unit-norm image/text embedding matrices (B x D)."""

    image_vecs: np.ndarray
    text_vecs: np.ndarray

    def __post_init__(self):
        self.image_vecs = np.asarray(self.image_vecs, dtype=np.float64)
        self.text_vecs = np.asarray(self.text_vecs, dtype=np.float64)
        if self.image_vecs.shape != self.text_vecs.shape:
            raise ValueError("image and text batches must be index-aligned")
        for name, vecs in (("image", self.image_vecs), ("text", self.text_vecs)):
            norms = np.linalg.norm(vecs, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise ValueError(f"{name} vectors are not unit-norm within 1e-4")

    @property
    def dim(self) -> int:
        return self.image_vecs.shape[1]


def cosine_scores(batch: EmbeddingBatch) -> np.ndarray:
    """Per-row dot product of the aligned unit vectors."""
    return np.einsum("ij,ij->i", batch.image_vecs, batch.text_vecs)


def alignment_histogram(scores: Iterable[float]) -> np.ndarray:
    """Fixed 200-bin count histogram over [-1, 1] (bin width 0.01)."""
    arr = np.clip(np.fromiter(scores, dtype=np.float64), -1.0, 1.0)
    hist, _ = np.histogram(arr, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
    return hist


def filter_by_nsfw(
    pairs: Iterable[PairCandidate],
    cfg: FilterConfig,
    counters: Counter | None = None,
) -> list[PairCandidate]:
    """Keep pairs whose unsafe score does not exceed the threshold."""
    if counters is None:
        counters = Counter()
    kept = []
    for pair in pairs:
        if pair.stage_scores["nsfw"] <= cfg.nsfw_max:
            kept.append(pair)
        else:
            counters["nsfw_exceeds"] += 1
    return kept


def filter_by_alignment(
    pairs: Iterable[PairCandidate],
    cfg: FilterConfig,
    counters: Counter | None = None,
) -> tuple[list[PairCandidate], np.ndarray]:
    """Keep pairs scoring at or above the alignment threshold.

    Also returns the pre-filter score histogram destined for the manifest,
    so the distribution can be re-plotted without re-inference.
    """
    if counters is None:
        counters = Counter()
    pairs = list(pairs)
    hist = alignment_histogram(p.stage_scores["align"] for p in pairs)
    kept = []
    for pair in pairs:
        if pair.stage_scores["align"] >= cfg.alignment_min:
            kept.append(pair)
        else:
            counters["alignment_below"] += 1
    return kept, hist


def mock_scorer(image_bytes: bytes, caption: str) -> ScoreRecord:
    """Deterministic stand-in scorer keyed on content.

    Scores are a keyed hash of (image digest, caption) mapped into
    plausible sub-ranges (nsfw in [0, 0.2), align in [-0.2, 0.8)) so that
    default thresholds keep a useful fraction of synthetic data.
    """
    img_digest = hashlib.sha256(image_bytes).digest()
    d = hashlib.blake2b(
        img_digest + caption.encode("utf-8"), digest_size=16, key=b"warc2pairs-mock"
    ).digest()
    a, b = struct.unpack("<QQ", d)
    nsfw = (a / 2**64) * 0.2
    align = (b / 2**64) - 0.2
    return ScoreRecord(nsfw=nsfw, align=align)


# --- sidecar protocol v1 client ------------------------------------------
#
# request:  {"batch_id": str, "items": [{"image_b64": str, "caption": str}]}
# response: {"batch_id": str, "scores": [{"nsfw": num, "align": num}]}
# handshake: {"op": "hello"} -> {"proto": 1, "max_batch": int, "model": str}


class CallableTransport:
    """In-process transport: request dict -> response dict."""

    def __init__(self, handler: Callable[[dict], dict]):
        self._handler = handler

    def request(self, payload: dict) -> dict:
        try:
            return self._handler(payload)
        except Exception as exc:
            raise ScorerTransportError(str(exc)) from exc

    def close(self) -> None:
        pass


class HttpTransport:
    """POSTs protocol objects to <base_url>/score."""

    def __init__(self, base_url: str, timeout: float = 60.0):
        import httpx

        self._client = httpx.Client(timeout=timeout)
        self._url = base_url.rstrip("/") + "/score"

    def request(self, payload: dict) -> dict:
        import httpx

        try:
            response = self._client.post(self._url, json=payload)
            response.raise_for_status()
            return response.json()
        except (httpx.HTTPError, json.JSONDecodeError) as exc:
            raise ScorerTransportError(str(exc)) from exc

    def close(self) -> None:
        self._client.close()


class StdioTransport:
    """Line-delimited JSON over a spawned subprocess's stdin/stdout."""

    def __init__(self, command: Sequence[str]):
        self._proc = subprocess.Popen(
            list(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def request(self, payload: dict) -> dict:
        if self._proc.poll() is not None:
            raise ScorerTransportError("sidecar process exited")
        try:
            self._proc.stdin.write(json.dumps(payload) + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise ScorerTransportError(str(exc)) from exc
        if not line:
            raise ScorerTransportError("sidecar closed its stdout")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ScorerTransportError(f"non-JSON line from sidecar: {line[:80]!r}") from exc

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()


class SidecarClient:
    """Protocol v1 client: handshake, batch splitting, single retry."""

    def __init__(self, transport, max_batch: int | None = None):
        self._transport = transport
        self._max_batch = max_batch
        self._batch_counter = 0

    def hello(self) -> dict:
        reply = self._request_with_retry({"op": "hello"})
        if reply.get("proto") != PROTO_VERSION:
            raise ScorerProtocolError(f"unsupported protocol reply: {reply!r}")
        return reply

    def _request_with_retry(self, payload: dict) -> dict:
        try:
            return self._transport.request(payload)
        except ScorerTransportError:
            return self._transport.request(payload)

    def _effective_max_batch(self) -> int:
        if self._max_batch is None:
            self._max_batch = int(self.hello().get("max_batch", 64))
        return max(1, self._max_batch)

    def score_batch(self, items: list[tuple[bytes, str]]) -> list[ScoreRecord]:
        self._batch_counter += 1
        batch_id = f"b{self._batch_counter:08d}"
        payload = {
            "batch_id": batch_id,
            "items": [
                {"image_b64": base64.b64encode(img).decode("ascii"), "caption": caption}
                for img, caption in items
            ],
        }
        reply = self._request_with_retry(payload)
        if reply.get("batch_id") != batch_id:
            raise ScorerProtocolError(
                f"batch {batch_id}: reply carries batch_id {reply.get('batch_id')!r}"
            )
        scores = reply.get("scores")
        if not isinstance(scores, list) or len(scores) != len(items):
            got = len(scores) if isinstance(scores, list) else "none"
            raise ScorerProtocolError(
                f"batch {batch_id}: {got} scores for {len(items)} items"
            )
        out = []
        for i, s in enumerate(scores):
            try:
                nsfw = float(s["nsfw"])
                align = float(s["align"])
            except (KeyError, TypeError, ValueError):
                raise ScorerProtocolError(
                    f"batch {batch_id}: malformed score object at index {i}"
                ) from None
            if not (math.isfinite(nsfw) and math.isfinite(align)):
                raise ScorerProtocolError(
                    f"batch {batch_id}: non-finite score at index {i}"
                )
            out.append(ScoreRecord(nsfw=nsfw, align=align))
        return out

    def score_pairs(self, items: list[tuple[bytes, str]]) -> list[ScoreRecord]:
        """Score any number of items, splitting to the endpoint's max batch."""
        max_batch = self._effective_max_batch()
        records: list[ScoreRecord] = []
        for start in range(0, len(items), max_batch):
            records.extend(self.score_batch(items[start : start + max_batch]))
        return records

    def close(self) -> None:
        self._transport.close()


def score_with_sidecar(
    items: list[tuple[bytes, str]],
    client: SidecarClient,
) -> list[ScoreRecord]:
    """One ScoreRecord per (image bytes, caption), index-aligned."""
    return client.score_pairs(items)
