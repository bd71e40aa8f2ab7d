"""Prompt templates, the word tokenizer and the vocabulary."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
RESERVED = ["<pad>", "<bos>", "<eos>", "<SEP>", "<unk>"]

INSTRUCTION = (
    "Instruction: Using the provided context, answer the question with exact phrases "
    "and avoid explanations."
)
MULTI_SPAN_FORMAT = 'Format the response as follows: ["answer1", "answer2", ...].'
DELIM = "\n---\n"

CONTEXT_FIRST = "context-first"
QUESTION_FIRST = "question-first"
ORDERINGS = (CONTEXT_FIRST, QUESTION_FIRST)

_TOKEN_RE = re.compile(r"<SEP>|\w+|[^\w\s]")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


def tokenize(text: str) -> list[Token]:
    """Split on whitespace, then break every punctuation character into its own token."""
    if not text or not text.strip():
        raise PromptError("cannot tokenize empty text")
    return [Token(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def detokenize(words: Iterable[str]) -> str:
    return " ".join(words)


@dataclass(frozen=True)
class PromptTemplate:
    ordering: str = CONTEXT_FIRST
    multi_span: bool = False

    def __post_init__(self):
        if self.ordering not in ORDERINGS:
            raise PromptError(f"unknown prompt ordering {self.ordering!r}; expected one of {ORDERINGS}")

    def instruction(self) -> str:
        return f"{INSTRUCTION} {MULTI_SPAN_FORMAT}" if self.multi_span else INSTRUCTION

    def segments(self, context: str, question: str) -> list[tuple[str, str]]:
        """Ordered (role, text) pieces; roles are 'fixed', 'context', 'question'."""
        head = self.instruction() + DELIM
        if self.ordering == CONTEXT_FIRST:
            return [
                ("fixed", head + "Context: "),
                ("context", context),
                ("fixed", DELIM + "Question: "),
                ("question", question),
                ("fixed", DELIM + "Answer:"),
            ]
        return [
            ("fixed", head + "Question: "),
            ("question", question),
            ("fixed", "\n<SEP>\nContext: "),
            ("context", context),
            ("fixed", DELIM + "Answer:"),
        ]


def build_prompt(template: PromptTemplate, context: str, question: str) -> str:
    if not context.strip():
        raise PromptError("empty context")
    if not question.strip():
        raise PromptError("empty question")
    return "".join(text for _, text in template.segments(context, question))


def format_answer(spans: list[str], multi_span: bool) -> str:
    """Target text the generator learns to emit."""
    if multi_span:
        return "[" + ", ".join(f'"{s}"' for s in spans) + "]"
    return spans[0] if spans else ""


_QUOTED = re.compile(r'"\s*([^"]*?)\s*"')


def parse_answer(text: str, multi_span: bool) -> list[str]:
    """Inverse of ``format_answer`` on generated text.

    Multi-span output is read from the bracketed list; without brackets the
    whole string becomes one span.
    """
    text = text.strip()
    if not multi_span:
        return [text] if text else []
    lo, hi = text.find("["), text.rfind("]")
    if lo != -1:
        body = text[lo + 1 : hi] if hi > lo else text[lo + 1 :]
        found = [s for s in _QUOTED.findall(body) if s]
        if found:
            return found
        return [p.strip() for p in body.split(",") if p.strip().strip('"').strip()]
    return [text] if text else []


@dataclass
class Vocab:
    tokens: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise PromptError("vocabulary must start with the reserved tokens")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise PromptError("duplicate vocabulary entries")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        seen = dict.fromkeys(RESERVED)
        for template in (PromptTemplate(o, m) for o in ORDERINGS for m in (False, True)):
            for _, piece in template.segments("x", "x"):
                for tok in _TOKEN_RE.findall(piece):
                    seen.setdefault(tok)
        for text in texts:
            for tok in _TOKEN_RE.findall(text):
                seen.setdefault(tok)
        return cls(list(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.id(w) for w in words]

    def words(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class EncodedPrompt:
    ids: list[int]
    context_range: tuple[int, int]
    question_range: tuple[int, int]
    context_offsets: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.ids)


def encode_prompt(
    template: PromptTemplate, context: str, question: str, vocab: Vocab, max_len: int
) -> EncodedPrompt:
    """Tokenize a rendered prompt, recording where context and question tokens sit."""
    build_prompt(template, context, question)  # validates inputs
    ids: list[int] = []
    ranges: dict[str, tuple[int, int]] = {}
    offsets: list[tuple[int, int]] = []
    for role, text in template.segments(context, question):
        start = len(ids)
        toks = _TOKEN_RE.finditer(text)
        for m in toks:
            ids.append(vocab.id(m.group()))
            if role == "context":
                offsets.append((m.start(), m.end()))
        if role != "fixed":
            ranges[role] = (start, len(ids))
    if len(ids) > max_len:
        raise PromptError(f"prompt has {len(ids)} tokens, exceeding max_seq_len={max_len}")
    return EncodedPrompt(ids, ranges["context"], ranges["question"], offsets)
