"""Normalization and tokenization of ticket text.

Both feature pipelines (TF-IDF for the boosted trees and the hashed n-gram
classifier) consume the token stream produced here, so the rules must stay
deterministic and idempotent.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from typing import Literal

SourceField = Literal["subject", "body", "combined"]

URL_TOKEN = "<url>"
EMAIL_TOKEN = "<email>"

# Sentinels are excluded so a second pass leaves them alone.
_HTML_TAG = re.compile(r"<(?!(?:url|email)>)[^<>]*>")
_URL = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_EMAIL = re.compile(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+")
_SENTINEL = re.compile(r"(<url>|<email>)")
_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class RawText:
    content: str
    source_field: SourceField = "combined"


def _keep(ch: str) -> bool:
    # letters, combining marks (Indic scripts need them) and digits
    return unicodedata.category(ch)[0] in "LMN"


def _scrub(piece: str) -> str:
    return "".join(ch if _keep(ch) else " " for ch in piece)


def normalize_text(text: str) -> str:
    if not text:
        return ""
    text = _HTML_TAG.sub(" ", text)
    text = unicodedata.normalize("NFC", text)
    text = unicodedata.normalize("NFC", text.lower())
    text = _URL.sub(f" {URL_TOKEN} ", text)
    text = _EMAIL.sub(f" {EMAIL_TOKEN} ", text)
    parts = _SENTINEL.split(text)
    # split() with a capture group alternates text / sentinel
    cleaned = [p if i % 2 else _scrub(p) for i, p in enumerate(parts)]
    return _WHITESPACE.sub(" ", " ".join(cleaned)).strip()


def normalize(text: RawText | str) -> RawText:
    """Strip HTML, NFC-normalize, lowercase and mask URLs/emails.

    Anything that is not a letter, digit or one of the ``<url>``/``<email>``
    sentinels becomes a space, and whitespace runs collapse to one space.
    """
    if isinstance(text, str):
        text = RawText(text)
    return RawText(normalize_text(text.content), text.source_field)


def tokenize(text: RawText | str) -> list[str]:
    content = text.content if isinstance(text, RawText) else text
    return normalize_text(content).split()


def combine(subject: str | None, body: str | None) -> RawText:
    """Model input is subject and body joined with a space."""
    return RawText(f"{subject or ''} {body or ''}", "combined")


def ticket_tokens(subject: str | None, body: str | None) -> list[str]:
    return tokenize(combine(subject, body))
