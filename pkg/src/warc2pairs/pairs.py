"""Extract (image URL, caption) candidates from HTML and apply caption gates."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from html.parser import HTMLParser
from typing import Iterator, Optional
from urllib.parse import quote, urljoin, urlsplit, urlunsplit

from .warc import HtmlDoc

ALT_ATTR = "alt_attr"
FIGCAPTION = "figcaption"

DEFAULT_MAX_CAPTION_CHARS = 1024

# Code-point ranges that count as Japanese: Hiragana, Katakana, Katakana
# Phonetic Extensions, CJK Unified Ideographs, CJK Extension A, and
# halfwidth Katakana.
_JAPANESE_RANGES = (
    (0x3040, 0x309F),
    (0x30A0, 0x30FF),
    (0x31F0, 0x31FF),
    (0x4E00, 0x9FFF),
    (0x3400, 0x4DBF),
    (0xFF66, 0xFF9D),
)

_PATH_SAFE = "/%!$&'()*+,;=:@-._~"
_QUERY_SAFE = _PATH_SAFE + "?"


@dataclass
class PairCandidate:
    """One (image URL, caption) record flowing through the pipeline.

    The fields after snapshot_id start empty and are filled by downstream
    stages: stage_scores by the scorer, phash/width/height by image
    filtering, image_file by the fetcher (content-digest blob name).
    """

    image_url: str
    caption: str
    caption_source: str
    page_url: str
    snapshot_id: str
    stage_scores: dict[str, float] = field(default_factory=dict)
    phash: Optional[int] = None
    width: Optional[int] = None
    height: Optional[int] = None
    image_file: Optional[str] = None

    def phash_hex(self) -> Optional[str]:
        return None if self.phash is None else f"{self.phash:016x}"

    def to_record(self) -> dict:
        """Line-delimited JSON form with fixed key order (shard metadata schema)."""
        nsfw = self.stage_scores.get("nsfw")
        align = self.stage_scores.get("align")
        return {
            "image_file": self.image_file,
            "image_url": self.image_url,
            "caption": self.caption,
            "caption_source": self.caption_source,
            "page_url": self.page_url,
            "snapshot_id": self.snapshot_id,
            "phash_hex": self.phash_hex(),
            "nsfw": None if nsfw is None else round(float(nsfw), 6),
            "align": None if align is None else round(float(align), 6),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PairCandidate":
        scores = {}
        if rec.get("nsfw") is not None:
            scores["nsfw"] = float(rec["nsfw"])
        if rec.get("align") is not None:
            scores["align"] = float(rec["align"])
        phash = rec.get("phash_hex")
        return cls(
            image_url=rec["image_url"],
            caption=rec["caption"],
            caption_source=rec.get("caption_source", ALT_ATTR),
            page_url=rec.get("page_url", ""),
            snapshot_id=rec.get("snapshot_id", ""),
            stage_scores=scores,
            phash=None if phash is None else int(phash, 16),
            width=rec.get("width"),
            height=rec.get("height"),
            image_file=rec.get("image_file"),
        )


def contains_japanese(text: str) -> bool:
    """True iff text has at least one code point in a Japanese script range."""
    for ch in text:
        cp = ord(ch)
        for lo, hi in _JAPANESE_RANGES:
            if lo <= cp <= hi:
                return True
    return False


def normalize_url(raw: str, base: str = "") -> Optional[str]:
    """Resolve raw against base and canonicalize, or None if unusable.

    Lowercases scheme and host, strips the fragment, percent-encodes bytes
    that are invalid in their component (existing escapes are preserved).
    Only http(s) survives; everything else is a filtered outcome.
    """
    raw = raw.strip()
    if not raw:
        return None
    try:
        joined = urljoin(base, raw) if base else raw
        parts = urlsplit(joined)
        host = parts.hostname
    except ValueError:
        return None
    scheme = parts.scheme.lower()
    if scheme not in ("http", "https") or not host:
        return None
    path = quote(parts.path, safe=_PATH_SAFE)
    query = quote(parts.query, safe=_QUERY_SAFE)
    return urlunsplit((scheme, parts.netloc.lower(), path, query, ""))


class _PairParser(HTMLParser):
    """Collects alt-attribute and figure/figcaption caption candidates.

    alt candidates are emitted at the <img> tag; a figcaption candidate is
    emitted when its <figure> closes (pairing the figure's FIRST image), so
    emission order is the stable document parse order.
    """

    VOID_IMG = "img"

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.found: list[tuple[str, str, str]] = []  # (raw_src, caption, source)
        self.extra_figure_images = 0
        self._figures: list[dict] = []
        self._caption_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag == "img":
            attr = dict(attrs)
            src = attr.get("src") or ""
            alt = (attr.get("alt") or "").strip()
            if alt:
                self.found.append((src, alt, ALT_ATTR))
            if self._figures:
                # the innermost open figure claims the image; only its
                # first image pairs with the figcaption
                fig = self._figures[-1]
                if fig["img_src"] is None:
                    fig["img_src"] = src
                else:
                    fig["extra_imgs"] += 1
        elif tag == "figure":
            self._figures.append({"img_src": None, "caption": [], "extra_imgs": 0})
        elif tag == "figcaption" and self._figures:
            self._caption_depth += 1

    def handle_endtag(self, tag):
        if tag == "figcaption" and self._caption_depth:
            self._caption_depth -= 1
        elif tag == "figure" and self._figures:
            fig = self._figures.pop()
            caption = " ".join("".join(fig["caption"]).split())
            if fig["img_src"] is not None and caption:
                self.found.append((fig["img_src"], caption, FIGCAPTION))
            self.extra_figure_images += fig["extra_imgs"]

    def handle_data(self, data):
        if self._caption_depth and self._figures:
            self._figures[-1]["caption"].append(data)

    def close(self):
        super().close()
        # treat figures left open by broken markup as closed at EOF
        while self._figures:
            self.handle_endtag("figure")


def extract_pairs(
    doc: HtmlDoc,
    snapshot_id: str,
    counters: Counter | None = None,
    max_caption_chars: int = DEFAULT_MAX_CAPTION_CHARS,
) -> Iterator[PairCandidate]:
    """Yield PairCandidates from an accepted document, in document order.

    An <img> with a non-empty alt yields an alt_attr candidate; a <figure>
    holding an <img> and a non-empty <figcaption> yields a figcaption
    candidate for the figure's first image (both are yielded when both
    exist). Candidates failing URL validity or the Japanese-character
    check are dropped and counted.
    """
    if counters is None:
        counters = Counter()
    parser = _PairParser()
    parser.feed(doc.raw_html)
    parser.close()
    counters["figure_extra_images"] += parser.extra_figure_images

    for raw_src, caption, source in parser.found:
        url = normalize_url(raw_src, doc.url)
        if url is None:
            counters["invalid_url"] += 1
            continue
        caption = caption.strip()
        if len(caption) > max_caption_chars:
            caption = caption[:max_caption_chars]
            counters["caption_truncated"] += 1
        if not caption:
            counters["empty_caption"] += 1
            continue
        if not contains_japanese(caption):
            counters["no_japanese"] += 1
            continue
        yield PairCandidate(
            image_url=url,
            caption=caption,
            caption_source=source,
            page_url=doc.url,
            snapshot_id=snapshot_id,
        )
