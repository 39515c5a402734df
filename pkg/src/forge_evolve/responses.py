"""Structured chain-of-thought response contract.

Model responses are expected to carry their reasoning inside a
``<think>...</think>`` block followed by a ``<answer>...</answer>`` block.
The answer block lists findings per face region ("Face: ...", "Nose: ...")
and states a real/forgery verdict in plain words. This module parses raw
response text into a typed :class:`CotResponse`, and renders one back to
text such that parsing the rendering reproduces the original.

Parsing is total: every input yields either a ``CotResponse`` or a
``ParseError`` value describing what went wrong and where. Malformed model
output is an ordinary data condition here, not an exception.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

__all__ = [
    "Verdict",
    "RegionKey",
    "RegionFinding",
    "CotResponse",
    "ParseError",
    "ParseErrorKind",
    "DEFAULT_REGIONS",
    "FORGERY_WORDS",
    "REAL_WORDS",
    "NEGATION_WORDS",
    "NEGATION_WINDOW",
    "parse_response",
    "extract_verdict",
    "extract_region_findings",
    "render_response",
    "region_header_spans",
]

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"

_TAG_RE = re.compile(r"</?think>|</?answer>")


class Verdict(Enum):
    """Binary classification outcome. The unknown case is ``None``."""

    REAL = "real"
    FORGERY = "forgery"

    @classmethod
    def from_label(cls, label: str) -> "Verdict":
        try:
            return cls(label.strip().lower())
        except ValueError:
            raise ValueError(f"not a verdict label: {label!r}") from None


@dataclass(frozen=True)
class RegionKey:
    """Canonical name of a face region that findings are grouped under.

    Matching against response text is case-insensitive on the canonical
    name; names within one vocabulary must be unique.
    """

    name: str

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("region name must be non-empty")


DEFAULT_REGIONS: tuple[RegionKey, ...] = (
    RegionKey("Overall image"),
    RegionKey("Face"),
    RegionKey("Eyes"),
    RegionKey("Eyebrows"),
    RegionKey("Nose"),
    RegionKey("Mouth"),
    RegionKey("Skin"),
    RegionKey("Neck"),
)


@dataclass(frozen=True)
class RegionFinding:
    """One region's finding text (possibly empty)."""

    region: RegionKey
    description: str


class ParseErrorKind(Enum):
    MISSING_THINK = "missing_think"
    MISSING_ANSWER = "missing_answer"
    MISNESTED = "misnested"


@dataclass(frozen=True)
class ParseError:
    """Why a raw response failed to parse, and the offset where it failed."""

    kind: ParseErrorKind
    position: int
    message: str


@dataclass(frozen=True)
class CotResponse:
    """Parsed structured response.

    ``regions`` and ``verdict`` are derived from ``answer_text``; use
    :meth:`from_parts` to construct instances so they stay consistent.
    """

    think_text: str
    answer_text: str
    regions: tuple[RegionFinding, ...]
    verdict: Verdict | None

    @classmethod
    def from_parts(
        cls,
        think_text: str,
        answer_text: str,
        vocab: tuple[RegionKey, ...] = DEFAULT_REGIONS,
    ) -> "CotResponse":
        return cls(
            think_text=think_text,
            answer_text=answer_text,
            regions=extract_region_findings(answer_text, vocab),
            verdict=extract_verdict(answer_text),
        )


def parse_response(
    raw: str, vocab: tuple[RegionKey, ...] = DEFAULT_REGIONS
) -> CotResponse | ParseError:
    """Parse raw response text into a :class:`CotResponse`.

    The first four tag tokens in the text must be exactly
    ``<think> </think> <answer> </answer>`` in that order; text outside the
    two blocks is ignored, as are any tags after the first complete
    structure. Any deviation yields a typed :class:`ParseError` carrying
    the byte offset of the offending tag (or the text length when a
    required tag is absent entirely).
    """
    expected = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)
    absent_kind = (
        ParseErrorKind.MISSING_THINK,
        ParseErrorKind.MISSING_THINK,
        ParseErrorKind.MISSING_ANSWER,
        ParseErrorKind.MISSING_ANSWER,
    )
    spans: list[tuple[int, int]] = []
    state = 0
    for match in _TAG_RE.finditer(raw):
        token = match.group(0)
        if token != expected[state]:
            # A leading answer block with no think block ahead of it reads
            # as a missing think block, not a nesting fault.
            if state == 0 and token == ANSWER_OPEN:
                return ParseError(
                    ParseErrorKind.MISSING_THINK,
                    match.start(),
                    f"expected {THINK_OPEN} but found {token}",
                )
            return ParseError(
                ParseErrorKind.MISNESTED,
                match.start(),
                f"expected {expected[state]} but found {token}",
            )
        spans.append(match.span())
        state += 1
        if state == 4:
            break
    if state < 4:
        return ParseError(
            absent_kind[state],
            len(raw),
            f"response ended before {expected[state]}",
        )
    think_text = raw[spans[0][1] : spans[1][0]]
    answer_text = raw[spans[2][1] : spans[3][0]]
    return CotResponse.from_parts(think_text, answer_text, vocab)


def render_response(response: CotResponse) -> str:
    """Render a response back to tagged text.

    For any response whose texts contain no tag tokens,
    ``parse_response(render_response(r)) == r``.
    """
    return (
        f"{THINK_OPEN}{response.think_text}{THINK_CLOSE}"
        f"{ANSWER_OPEN}{response.answer_text}{ANSWER_CLOSE}"
    )


FORGERY_WORDS = frozenset({"fake", "forged", "forgery", "manipulated", "tampered"})
REAL_WORDS = frozenset({"real", "authentic", "genuine"})
NEGATION_WORDS = frozenset({"not", "no", "never", "neither", "nor", "without"})
NEGATION_WINDOW = 3

_WORD_RE = re.compile(r"[a-z0-9']+")


def _is_negation(token: str) -> bool:
    return token in NEGATION_WORDS or token.endswith("n't")


def extract_verdict(answer_text: str) -> Verdict | None:
    """Classify answer text as real or forgery from a fixed word lexicon.

    A lexicon word counts only when none of the three preceding word
    tokens negates it ("not fake" asserts neither class). Returns ``None``
    when no class fires, or when both do.
    """
    tokens = _WORD_RE.findall(answer_text.lower())
    forgery_hit = False
    real_hit = False
    for i, token in enumerate(tokens):
        if token not in FORGERY_WORDS and token not in REAL_WORDS:
            continue
        window = tokens[max(0, i - NEGATION_WINDOW) : i]
        if any(_is_negation(t) for t in window):
            continue
        if token in FORGERY_WORDS:
            forgery_hit = True
        else:
            real_hit = True
    if forgery_hit == real_hit:
        return None
    return Verdict.FORGERY if forgery_hit else Verdict.REAL


def region_header_spans(
    text: str, vocab: tuple[RegionKey, ...]
) -> list[tuple[int, int, RegionKey]]:
    """All region-header occurrences ("Name:") in textual order.

    Returns (start of name, end of colon, region) triples. Matching is
    case-insensitive and anchored at a word boundary, so "Surface:" does
    not read as a "Face:" header.
    """
    _check_vocab(vocab)
    spans: list[tuple[int, int, RegionKey]] = []
    for key in vocab:
        pattern = re.compile(r"\b" + re.escape(key.name) + r"\s*:", re.IGNORECASE)
        for match in pattern.finditer(text):
            spans.append((match.start(), match.end(), key))
    spans.sort(key=lambda s: s[0])
    return spans


def extract_region_findings(
    answer_text: str, vocab: tuple[RegionKey, ...] = DEFAULT_REGIONS
) -> tuple[RegionFinding, ...]:
    """Extract per-region findings from answer text.

    One finding per vocabulary region whose header appears, in first-
    occurrence order; each description runs from the header's colon to the
    next header (of any region) or the end of the text, whitespace
    stripped. Repeat headers for an already-seen region are ignored.
    """
    spans = region_header_spans(answer_text, vocab)
    findings: list[RegionFinding] = []
    seen: set[RegionKey] = set()
    for idx, (_, colon_end, key) in enumerate(spans):
        if key in seen:
            continue
        seen.add(key)
        next_start = spans[idx + 1][0] if idx + 1 < len(spans) else len(answer_text)
        description = answer_text[colon_end:next_start].strip()
        findings.append(RegionFinding(region=key, description=description))
    return tuple(findings)


def _check_vocab(vocab: tuple[RegionKey, ...]) -> None:
    if not vocab:
        raise ValueError("region vocabulary must be non-empty")
    lowered = [key.name.lower() for key in vocab]
    if len(set(lowered)) != len(lowered):
        raise ValueError("region vocabulary names must be unique")
