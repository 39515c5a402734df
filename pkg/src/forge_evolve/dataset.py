"""Load, validate, and write forgery-reasoning datasets.

The canonical on-disk format is JSON Lines, one record per line:

    {"id": str, "image_path": str, "question": str, "answer": str,
     "label": "real"|"forgery", "method": str?, "polls": [str x10]?}

``answer`` carries the tagged reasoning text; ``polls`` keeps the ten
per-stage polling texts the answer was condensed from, when available.
The loader is strict about schema (wrong types fail the line) but lenient
about content invariants such as poll count and answer well-formedness;
those are the validator's findings, not load failures.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .responses import ParseError, Verdict, parse_response

__all__ = [
    "CotFaceRecord",
    "ValidationFinding",
    "ValidationReport",
    "DatasetIoError",
    "MalformedLineError",
    "DuplicateIdError",
    "POLL_COUNT",
    "FINDING_CATEGORIES",
    "load",
    "write",
    "validate",
]

POLL_COUNT = 10

FINDING_CATEGORIES = (
    "missing_image",
    "unparseable_answer",
    "verdict_contradiction",
    "polls_length",
)


class DatasetIoError(Exception):
    """Reading or writing the dataset file failed."""


class MalformedLineError(DatasetIoError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateIdError(DatasetIoError):
    def __init__(self, line_no: int, record_id: str):
        super().__init__(f"line {line_no}: duplicate id {record_id!r}")
        self.line_no = line_no
        self.record_id = record_id


@dataclass(frozen=True)
class CotFaceRecord:
    """One [image, question, answer] triple with label and extras."""

    id: str
    image_path: str
    question: str
    answer: str
    label: Verdict
    method: str | None = None
    polls: tuple[str, ...] | None = None

    def to_json_dict(self) -> dict:
        doc: dict = {
            "id": self.id,
            "image_path": self.image_path,
            "question": self.question,
            "answer": self.answer,
            "label": self.label.value,
        }
        if self.method is not None:
            doc["method"] = self.method
        if self.polls is not None:
            doc["polls"] = list(self.polls)
        return doc


def _record_from_dict(doc: dict, line_no: int) -> CotFaceRecord:
    if not isinstance(doc, dict):
        raise MalformedLineError(line_no, "record is not a JSON object")
    for key in ("id", "image_path", "question", "answer", "label"):
        if key not in doc:
            raise MalformedLineError(line_no, f"missing field {key!r}")
        if not isinstance(doc[key], str):
            raise MalformedLineError(line_no, f"field {key!r} must be a string")
    try:
        label = Verdict.from_label(doc["label"])
    except ValueError as exc:
        raise MalformedLineError(line_no, str(exc)) from None
    method = doc.get("method")
    if method is not None and not isinstance(method, str):
        raise MalformedLineError(line_no, "field 'method' must be a string")
    polls = doc.get("polls")
    if polls is not None:
        if not isinstance(polls, list) or not all(
            isinstance(p, str) for p in polls
        ):
            raise MalformedLineError(line_no, "field 'polls' must be a string list")
        polls = tuple(polls)
    return CotFaceRecord(
        id=doc["id"],
        image_path=doc["image_path"],
        question=doc["question"],
        answer=doc["answer"],
        label=label,
        method=method,
        polls=polls,
    )


def load(path: str | Path) -> list[CotFaceRecord]:
    """Read a JSON Lines dataset file, streaming line by line.

    Blank lines are skipped. Raises :class:`MalformedLineError` or
    :class:`DuplicateIdError` with the offending 1-based line number.
    """
    records: list[CotFaceRecord] = []
    seen_ids: set[str] = set()
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DatasetIoError(f"cannot read {path}: {exc}") from exc
    with handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(line_no, f"invalid JSON: {exc}") from None
            record = _record_from_dict(doc, line_no)
            if record.id in seen_ids:
                raise DuplicateIdError(line_no, record.id)
            seen_ids.add(record.id)
            records.append(record)
    return records


def write(records: Sequence[CotFaceRecord], path: str | Path) -> None:
    """Write records as JSON Lines; ``load`` of the result reproduces them."""
    try:
        with open(path, "w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record.to_json_dict(), ensure_ascii=False))
                handle.write("\n")
    except (OSError, UnicodeEncodeError) as exc:
        raise DatasetIoError(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class ValidationFinding:
    record_id: str
    category: str
    message: str


@dataclass
class ValidationReport:
    total_records: int
    findings: list[ValidationFinding] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.findings

    def counts(self) -> dict[str, int]:
        counts = {category: 0 for category in FINDING_CATEGORIES}
        for finding in self.findings:
            counts[finding.category] += 1
        return counts

    def to_json_dict(self) -> dict:
        return {
            "total_records": self.total_records,
            "clean": self.clean,
            "counts": self.counts(),
            "findings": [
                {
                    "id": f.record_id,
                    "category": f.category,
                    "message": f.message,
                }
                for f in self.findings
            ],
        }


def validate(
    records: Sequence[CotFaceRecord], image_root: str | Path | None = None
) -> ValidationReport:
    """Content checks over loaded records; findings, not failures.

    Flags: image file missing on disk, answer that fails to parse, answer
    verdict contradicting the label, and poll lists that are not exactly
    ten entries. Relative image paths resolve against ``image_root`` when
    given.
    """
    report = ValidationReport(total_records=len(records))
    for record in records:
        image_path = Path(record.image_path)
        if image_root is not None and not image_path.is_absolute():
            image_path = Path(image_root) / image_path
        if not os.path.isfile(image_path):
            report.findings.append(
                ValidationFinding(
                    record.id, "missing_image", f"no file at {image_path}"
                )
            )
        parsed = parse_response(record.answer)
        if isinstance(parsed, ParseError):
            report.findings.append(
                ValidationFinding(
                    record.id,
                    "unparseable_answer",
                    f"{parsed.kind.value} at offset {parsed.position}",
                )
            )
        elif parsed.verdict is not None and parsed.verdict is not record.label:
            report.findings.append(
                ValidationFinding(
                    record.id,
                    "verdict_contradiction",
                    f"answer reads as {parsed.verdict.value}, "
                    f"label is {record.label.value}",
                )
            )
        if record.polls is not None and len(record.polls) != POLL_COUNT:
            report.findings.append(
                ValidationFinding(
                    record.id,
                    "polls_length",
                    f"expected {POLL_COUNT} polls, found {len(record.polls)}",
                )
            )
    return report
