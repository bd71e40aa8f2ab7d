"""Conversion between character spans and IO tags over context tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

O, I = 0, 1
TAG_NAMES = ("O", "I")


class SpanError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class CharSpan:
    start: int
    end: int
    text: str

    @classmethod
    def of(cls, context: str, start: int, end: int) -> "CharSpan":
        if not 0 <= start < end <= len(context):
            raise SpanError(f"span [{start}, {end}) outside context of length {len(context)}")
        return cls(start, end, context[start:end])

    def validate(self, context: str) -> None:
        if not 0 <= self.start < self.end <= len(context):
            raise SpanError(f"span [{self.start}, {self.end}) outside context of length {len(context)}")
        if context[self.start : self.end] != self.text:
            raise SpanError(
                f"span text {self.text!r} does not match context[{self.start}:{self.end}]="
                f"{context[self.start:self.end]!r}"
            )


def spans_to_tags(offsets: Sequence[tuple[int, int]], spans: Sequence[CharSpan], context_len: int | None = None) -> list[int]:
    """Tag a token I when its character interval overlaps any span by at least one character."""
    for s in spans:
        if s.start >= s.end:
            raise SpanError(f"span start {s.start} not before end {s.end}")
        if s.start < 0 or (context_len is not None and s.end > context_len):
            raise SpanError(f"span [{s.start}, {s.end}) outside context")
    tags = []
    for a, b in offsets:
        tags.append(I if any(a < s.end and s.start < b for s in spans) else O)
    return tags


def tags_to_spans(offsets: Sequence[tuple[int, int]], tags: Sequence[int], context: str) -> list[CharSpan]:
    """Each maximal run of I tags becomes one span from its first token's start to its last token's end."""
    if len(offsets) != len(tags):
        raise SpanError(f"{len(tags)} tags for {len(offsets)} tokens")
    out: list[CharSpan] = []
    run_start = None
    for i, tag in enumerate(list(tags) + [O]):
        if tag == I and run_start is None:
            run_start = i
        elif tag != I and run_start is not None:
            s, e = offsets[run_start][0], offsets[i - 1][1]
            out.append(CharSpan(s, e, context[s:e]))
            run_start = None
    return out


def snap_to_tokens(offsets: Sequence[tuple[int, int]], span: CharSpan, context: str) -> CharSpan:
    """Widen a span to the boundaries of the tokens it touches."""
    touched = [(a, b) for a, b in offsets if a < span.end and span.start < b]
    if not touched:
        raise SpanError(f"span {span} covers no token")
    s, e = touched[0][0], touched[-1][1]
    return CharSpan(s, e, context[s:e])


def format_tags(tags: Sequence[int]) -> str:
    return " ".join(TAG_NAMES[t] for t in tags)
