"""Dataset readers, the JSONL interchange format and a seeded synthetic corpus."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .spans import CharSpan, SpanError


class DataError(ValueError):
    pass


@dataclass
class MrcExample:
    id: str
    context: str
    question: str
    answers: list[CharSpan] = field(default_factory=list)
    multi_span: bool = False

    def validate(self) -> None:
        for a in self.answers:
            try:
                a.validate(self.context)
            except SpanError as e:
                raise DataError(f"example {self.id}: {e}") from None

    @property
    def answer_texts(self) -> list[str]:
        return [a.text for a in self.answers]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "context": self.context,
            "question": self.question,
            "answers": [{"start": a.start, "end": a.end, "text": a.text} for a in self.answers],
            "multi_span": self.multi_span,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "MrcExample":
        try:
            ex = cls(
                id=str(rec["id"]),
                context=rec["context"],
                question=rec["question"],
                answers=[CharSpan(int(a["start"]), int(a["end"]), a["text"]) for a in rec["answers"]],
                multi_span=bool(rec["multi_span"]),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed interchange record {rec.get('id', '?') if isinstance(rec, dict) else '?'}: {e!r}") from None
        ex.validate()
        return ex


def write_jsonl(examples: Iterable[MrcExample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path) -> list[MrcExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            out.append(MrcExample.from_json(rec))
    return out


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON ({e.msg})") from None


def _paragraph_qas(doc: dict, path, dataset: str):
    """Yield (record path, context, qa) from a data -> paragraphs -> qas layout."""
    if not isinstance(doc, dict) or not isinstance(doc.get("data"), list):
        raise DataError(f"{path}: not a {dataset} file (expected a top-level 'data' list)")
    for i, article in enumerate(doc["data"]):
        if not isinstance(article, dict) or not isinstance(article.get("paragraphs"), list):
            raise DataError(f"{path}: data[{i}] has no 'paragraphs' list; unknown {dataset} layout")
        for j, para in enumerate(article["paragraphs"]):
            where = f"data[{i}].paragraphs[{j}]"
            if not isinstance(para, dict) or "context" not in para or not isinstance(para.get("qas"), list):
                raise DataError(f"{path}: {where} lacks 'context' or 'qas'")
            for k, qa in enumerate(para["qas"]):
                yield f"{where}.qas[{k}]", para["context"], qa


def _answer_spans(context: str, qa: dict, where: str) -> list[CharSpan]:
    qid = qa.get("id", where)
    spans = []
    try:
        answers = qa["answers"]
        for a in answers:
            start = int(a["answer_start"])
            text = a["text"]
            end = start + len(text)
            if context[start:end] != text:
                raise DataError(
                    f"example {qid}: answer {text!r} does not match context at offset {start} "
                    f"(found {context[start:end]!r})"
                )
            spans.append(CharSpan(start, end, text))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"{where}: malformed answer record ({e!r})") from None
    return spans


def load_squad(path) -> list[MrcExample]:
    """SQuAD v1.1; multiple gold answers are alternatives for one question."""
    doc = _load_json(path)
    out = []
    for where, context, qa in _paragraph_qas(doc, path, "SQuAD"):
        try:
            qid, question = str(qa["id"]), qa["question"]
        except (KeyError, TypeError):
            raise DataError(f"{path}: {where} lacks 'id' or 'question'") from None
        out.append(MrcExample(qid, context, question, _answer_spans(context, qa, where), False))
    return out


def load_quoref(path) -> list[MrcExample]:
    """Quoref in the paragraph/qas layout; multiple answers are joint spans."""
    doc = _load_json(path)
    out = []
    for where, context, qa in _paragraph_qas(doc, path, "Quoref"):
        try:
            qid, question = str(qa["id"]), qa["question"]
        except (KeyError, TypeError):
            raise DataError(f"{path}: {where} lacks 'id' or 'question'") from None
        spans = _answer_spans(context, qa, where)
        out.append(MrcExample(qid, context, question, spans, len(spans) > 1))
    return out


def words_to_context(words: list[str]) -> tuple[str, list[tuple[int, int]]]:
    """Join words with single spaces, returning the text and each word's offsets."""
    offsets, pos = [], 0
    for w in words:
        offsets.append((pos, pos + len(w)))
        pos += len(w) + 1
    return " ".join(words), offsets


def load_multispan(path) -> list[MrcExample]:
    """MultiSpanQA word-tagged records; runs of B/I tags become answer spans."""
    doc = _load_json(path)
    records = doc.get("data") if isinstance(doc, dict) else doc
    if not isinstance(records, list):
        raise DataError(f"{path}: not a MultiSpanQA file (expected a 'data' list)")
    out = []
    for n, rec in enumerate(records):
        try:
            qid, words, question = str(rec["id"]), list(rec["context"]), rec["question"]
            labels = list(rec.get("label", ["O"] * len(words)))
        except (KeyError, TypeError):
            raise DataError(f"{path}: data[{n}] lacks id/context/question") from None
        if len(labels) != len(words):
            raise DataError(f"example {qid}: {len(labels)} tags for {len(words)} context words")
        if isinstance(question, list):
            question = " ".join(question)
        context, offsets = words_to_context(words)
        spans, start = [], None
        for i, tag in enumerate(labels + ["O"]):
            if tag not in ("O", "I", "B"):
                raise DataError(f"example {qid}: unknown tag {tag!r}")
            if start is not None and tag in ("O", "B"):
                s, e = offsets[start][0], offsets[i - 1][1]
                spans.append(CharSpan(s, e, context[s:e]))
                start = None
            if tag in ("I", "B") and start is None:
                start = i
        out.append(MrcExample(qid, context, question, spans, True))
    return out


LOADERS = {"jsonl": read_jsonl, "squad": load_squad, "multispan": load_multispan, "quoref": load_quoref}


def load(path, fmt: str = "jsonl") -> list[MrcExample]:
    if fmt not in LOADERS:
        raise DataError(f"unknown data format {fmt!r}; expected one of {sorted(LOADERS)}")
    if not Path(path).is_file():
        raise DataError(f"data file not found: {path}")
    return LOADERS[fmt](path)


# ---------------------------------------------------------------- synthetic corpus

CATEGORIES = {
    "color": ["red", "blue", "green", "yellow", "purple", "orange", "silver", "brown"],
    "animal": ["cat", "dog", "horse", "tiger", "eagle", "rabbit", "wolf", "otter"],
    "city": ["paris", "tokyo", "cairo", "lima", "oslo", "delhi", "rome", "quito"],
    "food": ["bread", "rice", "apple", "cheese", "soup", "noodle", "mango", "pepper"],
}
FILLER = [
    "we", "saw", "it", "near", "after", "then", "they", "walked", "slowly", "home",
    "with", "some", "friends", "during", "morning", "was", "quite", "calm", "there",
    "many", "people", "talked", "about", "old", "stories", "and", "later", "rested",
]
QUESTIONS = {
    "color": "which color is mentioned ?",
    "animal": "which animal is mentioned ?",
    "city": "which city is mentioned ?",
    "food": "which food is mentioned ?",
}


@dataclass
class CorpusSpec:
    n_examples: int = 64
    multi_span_fraction: float = 0.0
    answer_len: tuple[int, int] = (1, 2)
    max_spans: int = 3
    distractors: int = 2
    filler_len: tuple[int, int] = (2, 4)
    seed: int = 0
    categories: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in CATEGORIES.items()})
    filler: list[str] = field(default_factory=lambda: list(FILLER))

    def validate(self) -> None:
        if self.n_examples <= 0:
            raise DataError("n_examples must be positive")
        if not 0.0 <= self.multi_span_fraction <= 1.0:
            raise DataError("multi_span_fraction must be in [0, 1]")
        lo, hi = self.answer_len
        if not 1 <= lo <= hi:
            raise DataError(f"invalid answer length range {self.answer_len}")
        if self.max_spans < 1 or self.distractors < 0:
            raise DataError("max_spans must be >= 1 and distractors >= 0")
        if not 1 <= self.filler_len[0] <= self.filler_len[1]:
            raise DataError(f"invalid filler length range {self.filler_len}")
        if self.distractors > len(self.categories) - 1:
            raise DataError(f"{self.distractors} distractors need at least {self.distractors + 1} categories")
        for name, words in self.categories.items():
            if len(set(words)) < hi * self.max_spans:
                raise DataError(
                    f"category {name!r} has {len(set(words))} distinct words; "
                    f"needs {hi * self.max_spans} for answers of up to {hi} tokens x {self.max_spans} spans"
                )
        if len(set(self.filler)) < 2:
            raise DataError("filler vocabulary too small")
        overlap = set(self.filler) & {w for ws in self.categories.values() for w in ws}
        if overlap:
            raise DataError(f"filler words collide with answer words: {sorted(overlap)}")


# named corpora for smoke runs and head comparisons; "default" is CorpusSpec()
PRESETS = {
    "default": {},
    # two categories, one distractor phrase: learnable from 32 examples
    "smoke": {
        "n_examples": 48,
        "answer_len": (1, 1),
        "distractors": 1,
        "categories": {k: CATEGORIES[k][:3] for k in ("color", "animal")},
    },
    # every context mixes all four categories, so the question decides which spans count
    "multispan": {
        "n_examples": 512,
        "multi_span_fraction": 1.0,
        "answer_len": (1, 1),
        "distractors": 3,
        "categories": {k: v[:6] for k, v in CATEGORIES.items()},
    },
}


def preset(name: str, seed: int = 0, **overrides) -> CorpusSpec:
    if name not in PRESETS:
        raise DataError(f"unknown corpus preset {name!r}; expected one of {sorted(PRESETS)}")
    kw = copy.deepcopy(PRESETS[name])
    kw.update(overrides)
    return CorpusSpec(seed=seed, **kw)


def generate_corpus(spec: CorpusSpec) -> list[MrcExample]:
    """Contexts of filler text with planted phrases; the question names the target category."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    names = sorted(spec.categories)
    out = []
    for n in range(spec.n_examples):
        target = names[rng.integers(len(names))]
        multi = rng.random() < spec.multi_span_fraction
        n_spans = int(rng.integers(2, spec.max_spans + 1)) if multi and spec.max_spans > 1 else 1
        pool = list(spec.categories[target])
        order = rng.permutation(len(pool))
        phrases, used = [], 0
        for _ in range(n_spans):
            k = int(rng.integers(spec.answer_len[0], spec.answer_len[1] + 1))
            phrases.append((target, [pool[j] for j in order[used : used + k]]))
            used += k
        others = [c for c in names if c != target]
        for j in rng.permutation(len(others))[: spec.distractors]:
            cat = others[j]
            k = int(rng.integers(spec.answer_len[0], spec.answer_len[1] + 1))
            words = spec.categories[cat]
            phrases.append((cat, [words[i] for i in rng.permutation(len(words))[:k]]))
        phrases = [phrases[i] for i in rng.permutation(len(phrases))]

        pieces: list[str] = []
        spans: list[tuple[int, int]] = []
        pos = 0

        def emit(word_list):
            nonlocal pos
            text = " ".join(word_list)
            if pieces:
                pos += 1
            start = pos
            pieces.append(text)
            pos += len(text)
            return start, pos

        def filler():
            k = int(rng.integers(spec.filler_len[0], spec.filler_len[1] + 1))
            emit([spec.filler[i] for i in rng.integers(0, len(spec.filler), size=k)])

        filler()
        for cat, words in phrases:
            s, e = emit(words)
            if cat == target:
                spans.append((s, e))
            filler()
        context = " ".join(pieces)
        question = QUESTIONS.get(target, f"which {target} is mentioned ?")
        answers = [CharSpan(s, e, context[s:e]) for s, e in spans]
        ex = MrcExample(f"syn-{spec.seed}-{n}", context, question, answers, n_spans > 1)
        ex.validate()
        out.append(ex)
    return out
