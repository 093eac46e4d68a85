"""Bundled script-frequency language detector.

A deliberately small baseline so the core pipeline and its tests run with
no model downloads. It scores languages by the Unicode-script mix of the
text; kana is treated as a strong Japanese signal because Chinese shares
the ideograph block. Swap in a real detector for production accuracy.
"""

from __future__ import annotations

import unicodedata


def _script_of(cp: int) -> str:
    if 0x3040 <= cp <= 0x30FF or 0x31F0 <= cp <= 0x31FF or 0xFF66 <= cp <= 0xFF9D:
        return "kana"
    if 0x4E00 <= cp <= 0x9FFF or 0x3400 <= cp <= 0x4DBF:
        return "cjk"
    if 0xAC00 <= cp <= 0xD7AF or 0x1100 <= cp <= 0x11FF:
        return "hangul"
    if 0x0400 <= cp <= 0x04FF:
        return "cyrillic"
    if 0x0600 <= cp <= 0x06FF:
        return "arabic"
    if 0x0E00 <= cp <= 0x0E7F:
        return "thai"
    if (0x41 <= cp <= 0x5A) or (0x61 <= cp <= 0x7A) or (0x00C0 <= cp <= 0x024F):
        return "latin"
    return ""


def detect_language(text: str) -> tuple[str, float]:
    """Return (language code, confidence in [0, 1]) for a text string."""
    counts: dict[str, int] = {}
    letters = 0
    for ch in text:
        if ch.isspace() or unicodedata.category(ch).startswith(("P", "N", "S")):
            continue
        script = _script_of(ord(ch))
        if not script:
            continue
        letters += 1
        counts[script] = counts.get(script, 0) + 1
    if letters == 0:
        return "und", 0.0

    kana = counts.get("kana", 0)
    cjk = counts.get("cjk", 0)
    scores = {
        # any kana claims the ideographs for Japanese; bare ideographs
        # lean Chinese
        "ja": (kana + cjk) / letters if kana else 0.0,
        "zh": (cjk / letters) if not kana else 0.0,
        "ko": counts.get("hangul", 0) / letters,
        "ru": counts.get("cyrillic", 0) / letters,
        "ar": counts.get("arabic", 0) / letters,
        "th": counts.get("thai", 0) / letters,
        "en": counts.get("latin", 0) / letters,
    }
    lang = max(scores, key=lambda k: scores[k])
    return lang, scores[lang]
