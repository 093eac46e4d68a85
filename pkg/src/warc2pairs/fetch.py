"""Polite, bounded, resumable image downloading.

Every candidate produces exactly one FetchResult; failures are recorded
outcomes, never exceptions. Politeness is enforced per host: a concurrency
cap and a minimum interval between request starts, both of which also
govern robots.txt fetches.
"""

from __future__ import annotations

import asyncio
import mimetypes
import time
import urllib.robotparser
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence
from urllib.parse import unquote, urlsplit

import httpx

from .config import FetchPolicy
from .pairs import PairCandidate

OK = "ok"
HTTP_ERROR = "http_error"
TIMEOUT = "timeout"
TOO_LARGE = "too_large"
NOT_IMAGE = "not_image"
CONNECT_ERROR = "connect_error"
ROBOTS_DENIED = "robots_denied"

OUTCOMES = (OK, HTTP_ERROR, TIMEOUT, TOO_LARGE, NOT_IMAGE, CONNECT_ERROR, ROBOTS_DENIED)


@dataclass
class FetchResult:
    candidate: PairCandidate
    outcome: str
    seq: int
    status_code: Optional[int] = None
    body: Optional[bytes] = None
    content_type: Optional[str] = None
    elapsed_ms: float = 0.0
    final_url: Optional[str] = None


class _HostGate:
    """Per-host admission: bounded concurrency + spaced request starts."""

    def __init__(self, policy: FetchPolicy):
        self.semaphore = asyncio.Semaphore(policy.per_host_concurrency)
        self.lock = asyncio.Lock()
        self.next_start = 0.0
        self.robots: Optional[urllib.robotparser.RobotFileParser] = None
        self.robots_lock = asyncio.Lock()


class _Politeness:
    """Per-host schedule. persistent_state (host -> earliest next start, in
    time.monotonic seconds) carries the interval schedule across fetch_all
    calls, so chunked callers stay polite over chunk boundaries."""

    def __init__(
        self,
        policy: FetchPolicy,
        start_log: list | None = None,
        persistent_state: dict[str, float] | None = None,
    ):
        self._policy = policy
        self._hosts: dict[str, _HostGate] = {}
        self._start_log = start_log
        self._state = persistent_state

    def gate(self, host: str) -> _HostGate:
        if host not in self._hosts:
            gate = _HostGate(self._policy)
            if self._state is not None:
                gate.next_start = self._state.get(host, 0.0)
            self._hosts[host] = gate
        return self._hosts[host]

    async def reserve_start(self, gate: _HostGate, host: str) -> None:
        """Block until this request's reserved start time arrives."""
        loop = asyncio.get_running_loop()
        async with gate.lock:
            start_at = max(loop.time(), gate.next_start)
            gate.next_start = start_at + self._policy.per_host_min_interval
            if self._state is not None:
                self._state[host] = gate.next_start
        if self._start_log is not None:
            self._start_log.append((host, start_at))
        delay = start_at - loop.time()
        if delay > 0:
            await asyncio.sleep(delay)


async def _fetch_one(
    client: httpx.AsyncClient,
    candidate: PairCandidate,
    seq: int,
    policy: FetchPolicy,
    politeness: _Politeness,
    global_sem: asyncio.Semaphore,
) -> FetchResult:
    url = candidate.image_url
    host = urlsplit(url).netloc
    gate = politeness.gate(host)
    started = time.monotonic()

    def done(outcome: str, **kw) -> FetchResult:
        return FetchResult(
            candidate=candidate,
            outcome=outcome,
            seq=seq,
            elapsed_ms=(time.monotonic() - started) * 1000.0,
            **kw,
        )

    async with global_sem, gate.semaphore:
        if policy.obey_robots:
            allowed = await _robots_allowed(client, url, gate, policy, politeness)
            if not allowed:
                return done(ROBOTS_DENIED)

        attempts = policy.retries + 1
        for attempt in range(attempts):
            await politeness.reserve_start(gate, host)
            try:
                return await _issue_request(client, url, policy, done)
            except (httpx.ConnectError, httpx.ConnectTimeout):
                if attempt + 1 >= attempts:
                    return done(CONNECT_ERROR)
            except httpx.TimeoutException:
                return done(TIMEOUT)
            except httpx.TooManyRedirects:
                return done(HTTP_ERROR)
            except httpx.HTTPError:
                return done(CONNECT_ERROR)
        return done(CONNECT_ERROR)


async def _issue_request(client, url, policy: FetchPolicy, done) -> FetchResult:
    async with client.stream("GET", url) as response:
        status = response.status_code
        final_url = str(response.url)
        if not (200 <= status < 300):
            return done(HTTP_ERROR, status_code=status, final_url=final_url)
        content_type = response.headers.get("content-type", "")
        if not content_type.split(";")[0].strip().lower().startswith("image/"):
            return done(NOT_IMAGE, status_code=status, content_type=content_type, final_url=final_url)
        declared = response.headers.get("content-length")
        if declared and declared.isdigit() and int(declared) > policy.max_bytes:
            return done(TOO_LARGE, status_code=status, content_type=content_type, final_url=final_url)
        body = bytearray()
        async for chunk in response.aiter_bytes():
            body.extend(chunk)
            if len(body) > policy.max_bytes:
                return done(TOO_LARGE, status_code=status, content_type=content_type, final_url=final_url)
        if not body:
            return done(NOT_IMAGE, status_code=status, content_type=content_type, final_url=final_url)
        return done(
            OK,
            status_code=status,
            body=bytes(body),
            content_type=content_type,
            final_url=final_url,
        )


async def _robots_allowed(client, url, gate: _HostGate, policy, politeness) -> bool:
    async with gate.robots_lock:
        if gate.robots is None:
            parser = urllib.robotparser.RobotFileParser()
            parts = urlsplit(url)
            robots_url = f"{parts.scheme}://{parts.netloc}/robots.txt"
            await politeness.reserve_start(gate, parts.netloc)
            try:
                response = await client.get(robots_url)
                if response.status_code == 200:
                    parser.parse(response.text.splitlines())
                else:
                    parser.parse([])  # unavailable: allow everything
            except httpx.HTTPError:
                parser.parse([])
            gate.robots = parser
    return gate.robots.can_fetch(policy.user_agent, url)


async def _fetch_all_async(
    candidates: Sequence[PairCandidate], policy: FetchPolicy,
    start_log: list | None = None,
    politeness_state: dict[str, float] | None = None,
) -> list[FetchResult]:
    politeness = _Politeness(policy, start_log, politeness_state)
    global_sem = asyncio.Semaphore(policy.max_concurrency)
    timeout = httpx.Timeout(policy.timeout)
    try:  # negotiate HTTP/2 when the optional h2 stack is installed
        import h2  # noqa: F401

        http2 = True
    except ImportError:
        http2 = False
    async with httpx.AsyncClient(
        timeout=timeout,
        follow_redirects=True,
        http2=http2,
        max_redirects=policy.max_redirects,
        headers={"user-agent": policy.user_agent},
        limits=httpx.Limits(
            max_connections=policy.max_concurrency,
            max_keepalive_connections=policy.max_concurrency,
        ),
    ) as client:
        tasks = [
            _fetch_one(client, candidate, seq, policy, politeness, global_sem)
            for seq, candidate in enumerate(candidates)
        ]
        return list(await asyncio.gather(*tasks))


def fetch_all(
    candidates: Iterable[PairCandidate],
    policy: FetchPolicy | None = None,
    offline_root: str | Path | None = None,
    start_log: list | None = None,
    politeness_state: dict[str, float] | None = None,
) -> list[FetchResult]:
    """Fetch every candidate's image; one FetchResult each, input order.

    With offline_root set, URLs resolve against a local directory tree
    (host/path) via the file fetcher, which honors the same contract.
    start_log, when given, collects (host, reserved_start_time) entries so
    politeness can be audited exactly. politeness_state (a mutable dict the
    caller keeps) carries per-host schedules across calls, keeping chunked
    fetching polite over chunk boundaries.
    """
    candidates = list(candidates)
    if policy is None:
        policy = FetchPolicy()
    if offline_root is not None:
        return [
            _fetch_from_file(candidate, seq, Path(offline_root), policy)
            for seq, candidate in enumerate(candidates)
        ]
    return asyncio.run(_fetch_all_async(candidates, policy, start_log, politeness_state))


# python < 3.11 mimetypes lacks webp
_EXTRA_TYPES = {".webp": "image/webp", ".jpg": "image/jpeg", ".jpeg": "image/jpeg",
                ".png": "image/png", ".gif": "image/gif"}


def _guess_content_type(name: str) -> str:
    suffix = Path(name).suffix.lower()
    if suffix in _EXTRA_TYPES:
        return _EXTRA_TYPES[suffix]
    return mimetypes.guess_type(name)[0] or "application/octet-stream"


def _fetch_from_file(
    candidate: PairCandidate, seq: int, root: Path, policy: FetchPolicy
) -> FetchResult:
    """Offline fetcher: URL http://host/a/b.png maps to root/host/a/b.png."""
    started = time.monotonic()

    def done(outcome: str, **kw) -> FetchResult:
        return FetchResult(
            candidate=candidate,
            outcome=outcome,
            seq=seq,
            elapsed_ms=(time.monotonic() - started) * 1000.0,
            final_url=candidate.image_url,
            **kw,
        )

    parts = urlsplit(candidate.image_url)
    rel = unquote(parts.path).lstrip("/")
    path = root / parts.netloc / rel
    try:
        resolved = path.resolve()
        resolved.relative_to(root.resolve())
    except (ValueError, OSError):
        return done(HTTP_ERROR, status_code=404)
    if not resolved.is_file():
        return done(HTTP_ERROR, status_code=404)
    content_type = _guess_content_type(resolved.name)
    if not content_type.startswith("image/"):
        return done(NOT_IMAGE, status_code=200, content_type=content_type)
    size = resolved.stat().st_size
    if size > policy.max_bytes:
        return done(TOO_LARGE, status_code=200, content_type=content_type)
    body = resolved.read_bytes()
    if not body:
        return done(NOT_IMAGE, status_code=200, content_type=content_type)
    return done(OK, status_code=200, body=body, content_type=content_type)
