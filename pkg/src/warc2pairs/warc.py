"""Streaming WARC reader: yields HTML response documents from raw archives.

Handles plain and per-record ("member") gzip WARC files, detected by magic
bytes at each record boundary. Non-parsable records are skipped and counted
as malformed_records; only corruption at the stream head is fatal.
"""

from __future__ import annotations

import io
import re
import zlib
from collections import Counter
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

DEFAULT_MAX_RECORD_BYTES = 8 * 1024 * 1024

_GZIP_MAGIC = b"\x1f\x8b"
_WARC_MAGIC = b"WARC/1."
_CHUNK = 64 * 1024

_RESPONSE = "response"
_KNOWN_TYPES = {"response", "request", "metadata"}

_META_CHARSET_RE = re.compile(
    rb"""<meta[^>]+charset\s*=\s*["']?\s*([a-zA-Z0-9_\-]+)""", re.IGNORECASE
)
_CT_CHARSET_RE = re.compile(r"charset\s*=\s*[\"']?([a-zA-Z0-9_\-]+)", re.IGNORECASE)


class WarcStreamError(Exception):
    """Unrecoverable corruption; message names the byte offset."""


@dataclass(frozen=True)
class WarcRecord:
    record_type: str  # response | request | metadata | other
    target_uri: str
    content_type: str  # MIME, from the HTTP headers for responses
    body: bytes
    record_id: str


@dataclass
class HtmlDoc:
    url: str
    raw_html: str
    declared_lang: Optional[str] = None
    title: Optional[str] = None


class _ByteStream:
    """Buffered byte reader with peek, pushback, resync and offset tracking."""

    def __init__(self, raw: BinaryIO):
        self._raw = raw
        self._buf = bytearray()
        self.offset = 0  # absolute offset of the next unread byte

    def _fill(self, n: int) -> None:
        while len(self._buf) < n:
            chunk = self._raw.read(_CHUNK)
            if not chunk:
                return
            self._buf.extend(chunk)

    def peek(self, n: int) -> bytes:
        self._fill(n)
        return bytes(self._buf[:n])

    def read(self, n: int) -> bytes:
        self._fill(n)
        out = bytes(self._buf[:n])
        del self._buf[:n]
        self.offset += len(out)
        return out

    def skip(self, n: int) -> int:
        """Discard up to n bytes without buffering them all; returns count skipped."""
        skipped = 0
        while skipped < n:
            step = min(_CHUNK, n - skipped)
            got = self.read(step)
            if not got:
                break
            skipped += len(got)
        return skipped

    def push(self, data: bytes) -> None:
        self._buf[:0] = data
        self.offset -= len(data)

    def read_line(self, limit: int = 64 * 1024) -> Optional[bytes]:
        """Read up to and including \\n; None when over limit or at EOF."""
        pos = self._buf.find(b"\n")
        while pos < 0 and len(self._buf) < limit:
            before = len(self._buf)
            self._fill(before + _CHUNK)
            if len(self._buf) == before:
                break
            pos = self._buf.find(b"\n", before)
        if pos < 0:
            return None
        return self.read(pos + 1)

    def at_eof(self) -> bool:
        return not self.peek(1)

    def resync(self, magic: bytes) -> bool:
        """Skip at least one byte, then drop input until magic leads the buffer."""
        if self.peek(1):
            self.read(1)
        while True:
            pos = self._buf.find(magic)
            if pos >= 0:
                self.read(pos)
                return True
            # keep a tail in case magic straddles a chunk boundary
            keep = len(magic) - 1
            if len(self._buf) > keep:
                self.read(len(self._buf) - keep)
            before = len(self._buf)
            self._fill(before + _CHUNK)
            if len(self._buf) == before:
                return False


class _GzipTruncated(Exception):
    def __init__(self, offset: int):
        self.offset = offset
        super().__init__(f"truncated gzip member at byte offset {offset}")


class _MemberReader:
    """Streaming decompressor for exactly one gzip member.

    Reads from the shared _ByteStream and pushes back whatever trails the
    member, so the next record's magic-byte detection still works.
    """

    def __init__(self, stream: _ByteStream):
        self._stream = stream
        self._decomp = zlib.decompressobj(wbits=16 + zlib.MAX_WBITS)
        self._out = bytearray()
        self._done = False
        self.start_offset = stream.offset

    def read(self, n: int) -> bytes:
        while len(self._out) < n and not self._done:
            chunk = self._stream.read(_CHUNK)
            if not chunk:
                raise _GzipTruncated(self.start_offset)
            try:
                self._out.extend(self._decomp.decompress(chunk))
            except zlib.error as exc:
                raise _GzipTruncated(self.start_offset) from exc
            if self._decomp.eof:
                self._stream.push(self._decomp.unused_data)
                self._done = True
        out = bytes(self._out[:n])
        del self._out[:n]
        return out


class _RecordError(Exception):
    """One record could not be parsed; framing may need resync."""

    def __init__(self, msg: str, pushback: bytes = b""):
        self.pushback = pushback
        super().__init__(msg)


class _OversizeRecord(Exception):
    """Record exceeded the configured cap; its bytes were already discarded."""


_MAX_HEADER_LINES = 256


def _parse_headers(stream: _ByteStream) -> dict[str, str]:
    headers: dict[str, str] = {}
    last_key = None
    for _ in range(_MAX_HEADER_LINES):
        line = stream.read_line()
        if line is None:
            raise _RecordError("EOF inside header block")
        text = line.rstrip(b"\r\n")
        if not text:
            return headers
        if text[:1] in (b" ", b"\t") and last_key:
            headers[last_key] += " " + text.strip().decode("latin-1")
            continue
        name, sep, value = text.partition(b":")
        if not sep:
            raise _RecordError(f"bad header line {text[:40]!r}")
        last_key = name.strip().decode("latin-1").lower()
        headers[last_key] = value.strip().decode("latin-1")
    raise _RecordError(f"more than {_MAX_HEADER_LINES} header lines")


def _read_raw_record(
    stream: _ByteStream, max_record_bytes: int
) -> Optional[tuple[dict[str, str], bytes]]:
    """Read one framed record (headers, content block). None at clean EOF."""
    version = stream.read_line()
    if version is None:
        if stream.at_eof():
            return None
        raise _RecordError("unterminated version line")
    if not version.startswith(_WARC_MAGIC):
        raise _RecordError(f"bad version line {version[:20]!r}", pushback=version)
    headers = _parse_headers(stream)
    try:
        length = int(headers["content-length"])
        if length < 0:
            raise ValueError
    except (KeyError, ValueError):
        raise _RecordError("missing or invalid Content-Length") from None
    if length > max_record_bytes:
        stream.skip(length)
        stream.read(4)
        raise _OversizeRecord(f"{length} bytes")
    content = stream.read(length)
    if len(content) < length:
        raise _RecordError("truncated content block", pushback=content)
    trailer = stream.read(4)
    if trailer not in (b"\r\n\r\n", b"", b"\r\n"):
        # tolerate LF-only writers before giving up
        if trailer.startswith(b"\n\n"):
            stream.push(trailer[2:])
        else:
            raise _RecordError("missing record separator", pushback=content + trailer)
    return headers, content


def _dechunk(payload: bytes) -> bytes:
    out = bytearray()
    buf = io.BytesIO(payload)
    while True:
        size_line = buf.readline()
        if not size_line:
            raise ValueError("chunked body ended early")
        size_str = size_line.strip().split(b";")[0]
        size = int(size_str, 16)
        if size == 0:
            return bytes(out)
        chunk = buf.read(size)
        if len(chunk) < size:
            raise ValueError("chunk shorter than declared")
        out.extend(chunk)
        buf.read(2)  # CRLF after each chunk


def _split_http_response(content: bytes) -> tuple[dict[str, str], bytes]:
    """Parse the HTTP message stored in a response record's content block."""
    sep = content.find(b"\r\n\r\n")
    sep_len = 4
    if sep < 0:
        sep = content.find(b"\n\n")
        sep_len = 2
    if sep < 0:
        raise ValueError("no HTTP header/payload boundary")
    head = content[:sep].decode("latin-1", errors="replace")
    payload = content[sep + sep_len:]
    lines = head.splitlines()
    if not lines or not lines[0].upper().startswith("HTTP/"):
        raise ValueError("missing HTTP status line")
    headers: dict[str, str] = {}
    for line in lines[1:]:
        name, sep2, value = line.partition(":")
        if sep2:
            headers[name.strip().lower()] = value.strip()

    if "chunked" in headers.get("transfer-encoding", "").lower():
        payload = _dechunk(payload)
    elif "content-length" in headers:
        try:
            declared = int(headers["content-length"])
        except ValueError:
            raise ValueError("unparseable HTTP Content-Length") from None
        if declared != len(payload):
            raise ValueError(
                f"HTTP body length {len(payload)} disagrees with declared {declared}"
            )
    return headers, payload


def _build_record(headers: dict[str, str], content: bytes) -> Optional[WarcRecord]:
    """Turn framed headers/content into a WarcRecord; None means malformed."""
    warc_type = headers.get("warc-type", "").lower()
    record_type = warc_type if warc_type in _KNOWN_TYPES else "other"
    record_id = headers.get("warc-record-id", "").strip("<>")
    target_uri = headers.get("warc-target-uri", "").strip("<>")

    if record_type == _RESPONSE:
        if not target_uri:
            return None
        block_type = headers.get("content-type", "")
        if block_type.split(";")[0].strip().lower().startswith("application/http"):
            try:
                http_headers, body = _split_http_response(content)
            except ValueError:
                return None
            content_type = http_headers.get("content-type", "")
        else:
            # bare payload stored directly in the record
            body = content
            content_type = block_type
        return WarcRecord(record_type, target_uri, content_type, body, record_id)

    return WarcRecord(record_type, target_uri, headers.get("content-type", ""), content, record_id)


def _records_from_plain(
    stream: _ByteStream,
    counters: Counter,
    max_record_bytes: int,
    resync_on_error: bool,
) -> Iterator[WarcRecord]:
    """Drain framed records from a plain byte stream, recovering by magic scan."""
    while True:
        try:
            raw = _read_raw_record(stream, max_record_bytes)
        except _OversizeRecord:
            counters["oversize_records"] += 1
            continue
        except _RecordError as exc:
            counters["malformed_records"] += 1
            if exc.pushback:
                stream.push(exc.pushback)
            if not (resync_on_error and stream.resync(_WARC_MAGIC)):
                return
            continue
        if raw is None:
            return
        headers, content = raw
        record = _build_record(headers, content)
        if record is None:
            counters["malformed_records"] += 1
            continue
        counters["records_yielded"] += 1
        yield record


def stream_records(
    source: BinaryIO,
    counters: Counter | None = None,
    max_record_bytes: int = DEFAULT_MAX_RECORD_BYTES,
) -> Iterator[WarcRecord]:
    """Yield WarcRecords from a plain or member-gzip WARC stream, in order.

    Skips non-parsable records (counted under malformed_records) and records
    whose content exceeds max_record_bytes (oversize_records). Raises
    WarcStreamError only when the stream head is already unreadable.
    """
    if counters is None:
        counters = Counter()
    stream = _ByteStream(source)
    produced_any = False

    while True:
        head = stream.peek(2)
        if not head:
            return
        if head == _GZIP_MAGIC:
            member = _MemberReader(stream)
            member_stream = _ByteStream(member)  # type: ignore[arg-type]
            try:
                for record in _records_from_plain(
                    member_stream, counters, max_record_bytes, resync_on_error=True
                ):
                    produced_any = True
                    yield record
            except _GzipTruncated as exc:
                if stream.resync(_GZIP_MAGIC + b"\x08"):
                    counters["malformed_records"] += 1
                    continue
                if not produced_any and counters["malformed_records"] == 0:
                    raise WarcStreamError(str(exc)) from exc
                counters["malformed_records"] += 1
                return
        else:
            # plain stream: the version line doubles as the record magic
            if stream.peek(len(_WARC_MAGIC)) != _WARC_MAGIC:
                bad_offset = stream.offset
                found = stream.resync(_WARC_MAGIC)
                if not found and not produced_any and counters["malformed_records"] == 0:
                    raise WarcStreamError(
                        f"stream is neither gzip nor WARC at byte offset {bad_offset}"
                    )
                counters["malformed_records"] += 1
                if not found:
                    return
                continue
            for record in _records_from_plain(
                stream, counters, max_record_bytes, resync_on_error=True
            ):
                produced_any = True
                yield record
            return


class _HeadScanner(HTMLParser):
    """Grabs the document root's lang attribute and the first <title> text."""

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.lang: Optional[str] = None
        self.title: Optional[str] = None
        self._saw_html = False
        self._in_title = False
        self._title_parts: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag == "html" and not self._saw_html:
            self._saw_html = True
            for name, value in attrs:
                if name == "lang" and value:
                    self.lang = value.strip()
                    break
        elif tag == "title" and self.title is None:
            self._in_title = True

    def handle_endtag(self, tag):
        if tag == "title" and self._in_title:
            self._in_title = False
            self.title = "".join(self._title_parts).strip()

    def handle_data(self, data):
        if self._in_title:
            self._title_parts.append(data)


def _decode_html(body: bytes, content_type: str, counters: Counter) -> str:
    """Charset ladder: Content-Type param, then meta tag, then UTF-8 lossy."""
    charsets = []
    m = _CT_CHARSET_RE.search(content_type)
    if m:
        charsets.append(m.group(1))
    m = _META_CHARSET_RE.search(body[:4096])
    if m:
        charsets.append(m.group(1).decode("ascii"))
    for cs in charsets:
        try:
            return body.decode(cs)
        except (UnicodeDecodeError, LookupError):
            continue
    try:
        return body.decode("utf-8")
    except UnicodeDecodeError:
        counters["decode_lossy"] += 1
        return body.decode("utf-8", errors="replace")


def to_html_doc(record: WarcRecord, counters: Counter | None = None) -> Optional[HtmlDoc]:
    """HtmlDoc for HTML response records; None is a filtered outcome."""
    if counters is None:
        counters = Counter()
    if record.record_type != _RESPONSE or not record.target_uri:
        return None
    mime = record.content_type.split(";")[0].strip().lower()
    if mime not in ("text/html", "application/xhtml+xml"):
        return None
    raw_html = _decode_html(record.body, record.content_type, counters)
    scanner = _HeadScanner()
    scanner.feed(raw_html)
    scanner.close()
    return HtmlDoc(
        url=record.target_uri,
        raw_html=raw_html,
        declared_lang=scanner.lang or None,
        title=scanner.title,
    )


def open_warc_source(location: str | Path) -> BinaryIO:
    """Open a local path or an http(s) URL as a binary stream."""
    loc = str(location)
    if loc.startswith("http://") or loc.startswith("https://"):
        import httpx

        client = httpx.Client(follow_redirects=True, timeout=60.0)
        response = client.send(client.build_request("GET", loc), stream=True)
        response.raise_for_status()
        raw = response.iter_raw()

        class _HttpStream(io.RawIOBase):
            def __init__(self):
                self._pending = b""

            def readable(self):
                return True

            def read(self, n=-1):
                while n < 0 or len(self._pending) < n:
                    try:
                        self._pending += next(raw)
                    except StopIteration:
                        break
                if n < 0:
                    out, self._pending = self._pending, b""
                else:
                    out, self._pending = self._pending[:n], self._pending[n:]
                return out

            def close(self):
                response.close()
                client.close()
                super().close()

        return _HttpStream()  # type: ignore[return-value]
    return open(loc, "rb")


def read_url_list(path: str | Path) -> list[str]:
    """One WARC location per line; blank lines and # comments ignored."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out
