import numpy as np
import pytest

from qase.data import words_to_context
from qase.spans import CharSpan, I, O, SpanError, format_tags, snap_to_tokens, spans_to_tags, tags_to_spans


def ctx(words):
    return words_to_context(words)


def test_single_span():
    text, offs = ctx(["a", "b", "c"])
    assert spans_to_tags(offs, [CharSpan.of(text, 2, 3)]) == [O, I, O]


def test_empty_span_list():
    text, offs = ctx(["a", "b", "c"])
    assert spans_to_tags(offs, []) == [O, O, O]
    assert tags_to_spans(offs, [O, O, O], text) == []


def test_whole_context():
    text, offs = ctx(["a", "b"])
    assert tags_to_spans(offs, [I, I], text) == [CharSpan(0, 3, "a b")]


def test_partial_token_overlap_tags_whole_token():
    text, offs = ctx(["alpha", "beta"])
    assert spans_to_tags(offs, [CharSpan.of(text, 2, 3)]) == [I, O]


def test_adjacent_spans_merge():
    # IO cannot separate touching spans; they decode as one
    text, offs = ctx(["a", "b", "c"])
    tags = spans_to_tags(offs, [CharSpan.of(text, 0, 1), CharSpan.of(text, 2, 3)])
    assert tags_to_spans(offs, tags, text) == [CharSpan(0, 3, "a b")]


def test_invalid_spans():
    _, offs = ctx(["a", "b"])
    with pytest.raises(SpanError):
        spans_to_tags(offs, [CharSpan(2, 2, "")])
    with pytest.raises(SpanError):
        spans_to_tags(offs, [CharSpan(1, 9, "x")], context_len=3)
    with pytest.raises(SpanError):
        CharSpan.of("abc", 2, 5)


def test_length_mismatch():
    text, offs = ctx(["a", "b"])
    with pytest.raises(SpanError):
        tags_to_spans(offs, [O], text)


def test_validate_text():
    with pytest.raises(SpanError, match="does not match"):
        CharSpan(0, 1, "z").validate("abc")


def test_snap():
    text, offs = ctx(["alpha", "beta", "gamma"])
    assert snap_to_tokens(offs, CharSpan.of(text, 3, 8), text).text == "alpha beta"


def test_format_tags():
    assert format_tags([O, I, O]) == "O I O"


def random_span_set(rng, n_tokens):
    """Non-adjacent token runs: every gap between two spans holds at least one O token."""
    runs, i = [], int(rng.integers(0, 3))
    while i < n_tokens:
        j = min(n_tokens, i + int(rng.integers(1, 4)))
        if rng.random() < 0.5:
            runs.append((i, j))
        i = j + 1 + int(rng.integers(0, 3))
    return runs


def test_roundtrip_many():
    rng = np.random.default_rng(0)
    vocab = ["a", "bb", "ccc", "dddd", "e-f", "g.h"]
    for _ in range(200):
        words = [vocab[k] for k in rng.integers(0, len(vocab), size=int(rng.integers(1, 15)))]
        text, offs = ctx(words)
        runs = random_span_set(rng, len(words))
        spans = [CharSpan.of(text, offs[a][0], offs[b - 1][1]) for a, b in runs]
        assert tags_to_spans(offs, spans_to_tags(offs, spans, len(text)), text) == spans
