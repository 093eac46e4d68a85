"""Language/structure gate for HTML documents.

The gate encodes a cheap-first ladder: trust the document's declared lang
attribute when it matches, and only run the (comparatively expensive)
text-based detector when it does not.
"""

from __future__ import annotations

from dataclasses import dataclass
from html.parser import HTMLParser
from typing import Callable, Optional

from .warc import HtmlDoc

DECLARED_ATTR = "declared_attr"
DETECTOR_ON_TEXT = "detector_on_text"
REJECTED_NO_TITLE = "rejected_no_title"
REJECTED_LANGUAGE = "rejected_language"
REJECTED_NO_TEXT = "rejected_no_text"

Detector = Callable[[str], tuple[str, float]]

# title is excluded too: it renders in browser chrome, not in the page, and
# the gate has already insisted on a non-empty title by the time text runs
_SKIP_CONTENT = {"script", "style", "nav", "noscript", "title"}

# elements that visually separate text; crossing one inserts whitespace
_BLOCK_TAGS = {
    "address", "article", "aside", "blockquote", "br", "dd", "div", "dl", "dt",
    "fieldset", "figcaption", "figure", "footer", "form", "h1", "h2", "h3",
    "h4", "h5", "h6", "header", "hr", "li", "main", "ol", "p", "pre",
    "section", "table", "td", "tfoot", "th", "thead", "tr", "ul",
}


@dataclass(frozen=True)
class LangDecision:
    accepted: bool
    method: str
    detected_lang: Optional[str] = None
    confidence: Optional[float] = None


class _TextExtractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self._skip_depth = 0
        self._parts: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag in _SKIP_CONTENT:
            self._skip_depth += 1
        elif tag in _BLOCK_TAGS:
            self._parts.append(" ")

    def handle_endtag(self, tag):
        if tag in _SKIP_CONTENT and self._skip_depth:
            self._skip_depth -= 1
        elif tag in _BLOCK_TAGS:
            self._parts.append(" ")

    def handle_data(self, data):
        if not self._skip_depth:
            self._parts.append(data)

    def text(self) -> str:
        return " ".join("".join(self._parts).split())


def extract_main_text(doc: HtmlDoc) -> str:
    """Visible text with script/style/nav/noscript removed, whitespace-normalized.

    This is the bundled default; the pipeline treats the extractor as
    pluggable so a heavier boilerplate-removal library can be swapped in.
    Markup the parser cannot cope with yields the empty string.
    """
    parser = _TextExtractor()
    try:
        parser.feed(doc.raw_html)
        parser.close()
    except Exception:
        return ""
    return parser.text()


def primary_subtag(lang: str) -> str:
    """BCP-47 primary subtag, lowercased ("ja-JP" and "ja_JP" both → "ja")."""
    return lang.replace("_", "-").split("-", 1)[0].strip().lower()


def gate(
    doc: HtmlDoc,
    target_lang: str = "ja",
    detector: Detector | None = None,
    min_confidence: float = 0.7,
    text_extractor: Callable[[HtmlDoc], str] = extract_main_text,
) -> LangDecision:
    """Decide whether a document is in the target language and well-formed.

    Order: empty/absent <title> rejects outright; a matching declared lang
    attribute accepts without touching the detector; otherwise the detector
    runs on the extracted main text.
    """
    if doc.title is None or not doc.title.strip():
        return LangDecision(False, REJECTED_NO_TITLE)

    target = target_lang.strip().lower()
    if doc.declared_lang and primary_subtag(doc.declared_lang) == target:
        return LangDecision(True, DECLARED_ATTR, detected_lang=target)

    if detector is None:
        from .langid import detect_language

        detector = detect_language
    text = text_extractor(doc)
    if not text:
        return LangDecision(False, REJECTED_NO_TEXT)
    lang, confidence = detector(text)
    if lang == target and confidence >= min_confidence:
        return LangDecision(True, DETECTOR_ON_TEXT, detected_lang=lang, confidence=confidence)
    return LangDecision(False, REJECTED_LANGUAGE, detected_lang=lang, confidence=confidence)
