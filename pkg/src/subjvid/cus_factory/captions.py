"""Captions with subject spans, and the prefix-strip / IMG-label rewrite."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

from ..errors import InvalidRecord

PREFIX = "An image of "
_LABEL_RE = re.compile(r"\s*\bIMG\d+\b")


@dataclass
class CaptionRecord:
    caption: str
    subjects: list[str]
    spans: list[tuple[int, int]]
    bboxes: list[tuple[int, int, int, int]] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.subjects) != len(self.spans):
            raise InvalidRecord("subject and span counts differ")
        if self.bboxes and len(self.bboxes) != len(self.spans):
            raise InvalidRecord("bbox and span counts differ")
        prev_end = -1
        for a, b in self.spans:
            if not 0 <= a < b <= len(self.caption):
                raise InvalidRecord(f"span ({a}, {b}) out of bounds")
            if a < prev_end:
                raise InvalidRecord(f"span ({a}, {b}) overlaps or is out of order")
            prev_end = b


@dataclass
class LabeledCaption:
    text: str
    spans: list[tuple[int, int]]
    labels: dict[int, str]              # subject index -> "IMG{k}"
    prefix_missing: bool = False


def build_caption(phrases: list[str], motion: str, bboxes=None) -> CaptionRecord:
    """Template captioner: ``An image of <p1> and <p2> ... moving <dir>``."""
    text, spans = PREFIX, []
    for i, p in enumerate(phrases):
        if i:
            text += " and "
        spans.append((len(text), len(text) + len(p)))
        text += p
    text += " staying still" if motion == "still" else f" moving {motion}"
    rec = CaptionRecord(text, list(phrases), spans, list(bboxes or []))
    rec.validate()
    return rec


def rewrite_caption(record: CaptionRecord, subjects: list[int] | None = None) -> LabeledCaption:
    """Drop the ``An image of`` prefix and put ``IMG{k}`` right after the k-th labeled subject.

    ``subjects`` selects which subjects (indices into ``record.subjects``) get
    labels; labels are numbered in caption order. Spans in the result point at
    the subject phrases inside the rewritten text.
    """
    record.validate()
    chosen = sorted(range(len(record.subjects)) if subjects is None else set(subjects))
    text, shift, prefix_missing = record.caption, 0, False
    if text.startswith(PREFIX):
        text, shift = text[len(PREFIX):], len(PREFIX)
    else:
        prefix_missing = True
        warnings.warn(f"caption lacks the {PREFIX.strip()!r} prefix: {text!r}", stacklevel=2)

    out, spans, labels, cursor, added = [], [], {}, 0, 0
    for i, (a, b) in enumerate(record.spans):
        a, b = a - shift, b - shift
        if a < 0:
            raise InvalidRecord(f"span of subject {i} overlaps the prefix")
        out.append(text[cursor:b])
        spans.append((a + added, b + added))
        cursor = b
        if i in chosen:
            label = f"IMG{len(labels) + 1}"
            labels[i] = label
            out.append(" " + label)
            added += len(label) + 1
    out.append(text[cursor:])
    return LabeledCaption("".join(out), spans, labels, prefix_missing)


def unlabeled_caption(record: CaptionRecord) -> str:
    """Prefix-stripped caption without any image labels, for control and text-only tasks."""
    return rewrite_caption(record, subjects=[]).text


def strip_labels(text: str) -> str:
    return " ".join(_LABEL_RE.sub("", text).split())
