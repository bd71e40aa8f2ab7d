"""Answer normalisation, per-example scores and dataset-level reports.

Single-span scoring follows the SQuAD v1.1 convention (normalised exact match,
token-bag F1, max over gold alternatives). Multi-span scoring reports a
set-level exact-match F1 and a partial-match overlap F1 in which each predicted
span earns the best token overlap it has with any gold span, divided by its
own length (recall is the mirror image over gold spans).
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

KINDS = ("squad", "multispan", "quoref")
_FIELDS = {"squad": ("em", "f1"), "quoref": ("em", "f1"), "multispan": ("em_f1", "overlap_f1")}

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


class MetricError(ValueError):
    pass


def normalize_answer(text: str) -> str:
    """Lowercase, drop ASCII punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _tokens(text: str) -> list[str]:
    return normalize_answer(text).split()


def squad_em(pred: str, golds: Sequence[str]) -> int:
    if not golds:
        raise MetricError("exact match needs at least one gold answer")
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


# scores are kept as exact fractions and rounded to float once, so that hand
# computed values such as 3/4 or 5/6 compare equal


def _token_f1(pred: str, gold: str) -> Fraction:
    pt, gt = _tokens(pred), _tokens(gold)
    if not pt and not gt:
        return Fraction(1)
    common = sum((Counter(pt) & Counter(gt)).values())
    return Fraction(2 * common, len(pt) + len(gt))


def squad_f1(pred: str, golds: Sequence[str]) -> float:
    if not golds:
        raise MetricError("F1 needs at least one gold answer")
    return float(max(_token_f1(pred, g) for g in golds))


def _harmonic(p: Fraction, r: Fraction) -> Fraction:
    return Fraction(0) if p + r == 0 else 2 * p * r / (p + r)


def multispan_em_f1(pred_spans: Sequence[str], gold_spans: Sequence[str]) -> tuple[float, float, float]:
    """(P, R, F1) under one-to-one exact matching of normalised spans."""
    if not pred_spans and not gold_spans:
        return 1.0, 1.0, 1.0
    if not pred_spans or not gold_spans:
        return 0.0, 0.0, 0.0
    matched = sum((Counter(map(normalize_answer, pred_spans)) & Counter(map(normalize_answer, gold_spans))).values())
    p, r = Fraction(matched, len(pred_spans)), Fraction(matched, len(gold_spans))
    return float(p), float(r), float(_harmonic(p, r))


def _overlap(a: list[str], b: list[str]) -> int:
    return sum((Counter(a) & Counter(b)).values())


def multispan_overlap_f1(pred_spans: Sequence[str], gold_spans: Sequence[str]) -> tuple[float, float, float]:
    """(P, R, F1) with per-span best token-overlap credit."""
    if not pred_spans and not gold_spans:
        return 1.0, 1.0, 1.0
    if not pred_spans or not gold_spans:
        return 0.0, 0.0, 0.0
    pt = [_tokens(s) for s in pred_spans]
    gt = [_tokens(s) for s in gold_spans]

    def one(s, dst):
        # a span that normalises to nothing matches only another empty span
        if not s:
            return Fraction(int(any(not d for d in dst)))
        return Fraction(max(_overlap(s, d) for d in dst), len(s))

    def credit(src, dst):
        per_span = [one(s, dst) for s in src]
        return sum(per_span, Fraction(0)) / len(per_span)

    p, r = credit(pt, gt), credit(gt, pt)
    return float(p), float(r), float(_harmonic(p, r))


def bag_em_f1(pred_spans: Sequence[str], gold_spans: Sequence[str]) -> tuple[int, float]:
    """Quoref-style scoring: exact bag match, and F1 over an optimal one-to-one span alignment."""
    if not pred_spans and not gold_spans:
        return 1, 1.0
    if not pred_spans or not gold_spans:
        return 0, 0.0
    em = int(sorted(map(normalize_answer, pred_spans)) == sorted(map(normalize_answer, gold_spans)))
    exact = [[_token_f1(p, g) for g in gold_spans] for p in pred_spans]
    rows, cols = linear_sum_assignment(-np.array(exact, dtype=float))
    total = sum((exact[i][j] for i, j in zip(rows, cols)), Fraction(0))
    return em, float(total / max(len(pred_spans), len(gold_spans)))


@dataclass(frozen=True)
class Prediction:
    id: str
    answer_texts: list[str]

    def to_json(self) -> dict:
        return {"id": self.id, "answers": list(self.answer_texts)}


def write_predictions(preds: Iterable[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in preds:
            f.write(json.dumps(p.to_json(), ensure_ascii=False) + "\n")


def read_predictions(path) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                answers = rec["answers"]
                if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
                    raise TypeError("answers must be a list of strings")
                out.append(Prediction(str(rec["id"]), answers))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise MetricError(f"{path}:{lineno}: bad prediction record ({e})") from None
    return out


@dataclass
class MetricsReport:
    kind: str
    n_examples: int
    em: float | None = None
    f1: float | None = None
    em_f1: float | None = None
    overlap_f1: float | None = None

    def items(self) -> list[tuple[str, object]]:
        rows: list[tuple[str, object]] = [("kind", self.kind), ("n_examples", self.n_examples)]
        rows += [(k, getattr(self, k)) for k in _FIELDS[self.kind]]
        return rows

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in self.items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        kind = kv.pop("kind")
        if kind not in KINDS:
            raise MetricError(f"unknown report kind {kind!r}")
        rep = cls(kind, int(kv.pop("n_examples")))
        for k in _FIELDS[kind]:
            setattr(rep, k, float(kv.pop(k)))
        if kv:
            raise MetricError(f"unexpected report keys {sorted(kv)}")
        return rep


def infer_kind(examples) -> str:
    return "multispan" if any(ex.multi_span for ex in examples) else "squad"


def evaluate(preds: Sequence[Prediction], examples, kind: str) -> MetricsReport:
    """Score each example, then macro-average and scale to percentages."""
    if kind not in KINDS:
        raise MetricError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    by_id: dict[str, Prediction] = {}
    for p in preds:
        if p.id in by_id:
            raise MetricError(f"duplicate prediction for id {p.id}")
        by_id[p.id] = p
    ids = [ex.id for ex in examples]
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise MetricError(f"missing predictions for ids {missing[:5]}")
    extra = sorted(set(by_id) - set(ids))
    if extra:
        raise MetricError(f"predictions for unknown ids {extra[:5]}")

    a_scores, b_scores = [], []
    for ex in examples:
        pred = by_id[ex.id].answer_texts
        golds = ex.answer_texts
        if kind == "squad":
            text = pred[0] if pred else ""
            a_scores.append(squad_em(text, golds))
            b_scores.append(squad_f1(text, golds))
        elif kind == "quoref":
            em, f1 = bag_em_f1(pred, golds)
            a_scores.append(em)
            b_scores.append(f1)
        else:
            a_scores.append(multispan_em_f1(pred, golds)[2])
            b_scores.append(multispan_overlap_f1(pred, golds)[2])
    n = len(examples)
    a = 100.0 * float(np.mean(a_scores)) if n else 0.0
    b = 100.0 * float(np.mean(b_scores)) if n else 0.0
    rep = MetricsReport(kind, n)
    k1, k2 = _FIELDS[kind]
    setattr(rep, k1, a)
    setattr(rep, k2, b)
    return rep
