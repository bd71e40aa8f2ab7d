import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qase import metrics as m
from qase.data import MrcExample
from qase.spans import CharSpan

from conftest import expected_value, metric_cases, score_case

CASES = metric_cases()


@pytest.mark.parametrize("case", CASES, ids=[c["name"] for c in CASES])
def test_fixture_case(case):
    got = score_case(case)
    for key, want in case["expected"].items():
        assert got[key] == expected_value(want), key


def test_fixture_has_twenty_cases():
    assert len(CASES) == 20


class TestNormalize:
    def test_article_punct_case(self):
        assert m.normalize_answer("The  Denver Broncos!") == "denver broncos"

    def test_article_inside_word_kept(self):
        assert m.normalize_answer("theatre an") == "theatre"

    def test_unicode_punctuation_passes_through(self):
        assert m.normalize_answer("café «x»") == "café «x»"


class TestSquad:
    def test_empty_gold_list_rejected(self):
        with pytest.raises(m.MetricError):
            m.squad_em("x", [])

    def test_max_over_alternatives(self):
        assert m.squad_f1("a b", ["c", "a b"]) == 1.0

    def test_empty_prediction(self):
        assert m.squad_f1("", ["x"]) == 0.0
        assert m.squad_em("", ["x"]) == 0


words = st.sampled_from(["red", "blue", "cat", "the", "dog", "new", "york"])
span = st.lists(words, min_size=1, max_size=3).map(" ".join)
spans = st.lists(span, max_size=4)


@settings(max_examples=200, deadline=None)
@given(spans, spans)
def test_em_f1_never_exceeds_overlap_f1(pred, gold):
    assert m.multispan_em_f1(pred, gold)[2] <= m.multispan_overlap_f1(pred, gold)[2] + 1e-12


@settings(max_examples=100, deadline=None)
@given(spans, spans, st.randoms(use_true_random=False))
def test_span_order_does_not_matter(pred, gold, r):
    p2, g2 = list(pred), list(gold)
    r.shuffle(p2)
    r.shuffle(g2)
    assert m.multispan_em_f1(pred, gold) == m.multispan_em_f1(p2, g2)
    assert m.multispan_overlap_f1(pred, gold) == m.multispan_overlap_f1(p2, g2)
    assert m.bag_em_f1(pred, gold) == m.bag_em_f1(p2, g2)


def _ex(i, answers, multi=False):
    ctx = " ".join(answers) or "empty"
    spans, pos = [], 0
    for a in answers:
        spans.append(CharSpan(pos, pos + len(a), a))
        pos += len(a) + 1
    return MrcExample(f"q{i}", ctx, "what ?", spans, multi)


class TestEvaluate:
    def test_macro_average_and_scale(self):
        exs = [_ex(0, ["red"]), _ex(1, ["blue cat"])]
        preds = [m.Prediction("q0", ["red"]), m.Prediction("q1", ["blue"])]
        rep = m.evaluate(preds, exs, "squad")
        assert rep.em == 50.0
        assert rep.f1 == pytest.approx(100 * (1 + 2 / 3) / 2)

    def test_example_order_irrelevant(self):
        exs = [_ex(0, ["red", "cat"], True), _ex(1, ["dog"], True)]
        preds = [m.Prediction("q1", ["dog"]), m.Prediction("q0", ["red"])]
        a = m.evaluate(preds, exs, "multispan")
        b = m.evaluate(preds[::-1], exs[::-1], "multispan")
        assert a.to_text() == b.to_text()

    def test_missing_prediction(self):
        with pytest.raises(m.MetricError, match="q1"):
            m.evaluate([m.Prediction("q0", ["red"])], [_ex(0, ["red"]), _ex(1, ["x"])], "squad")

    def test_duplicate_and_unknown(self):
        with pytest.raises(m.MetricError, match="duplicate"):
            m.evaluate([m.Prediction("q0", ["a"])] * 2, [_ex(0, ["a"])], "squad")
        with pytest.raises(m.MetricError, match="unknown"):
            m.evaluate([m.Prediction("q0", ["a"]), m.Prediction("zz", [])], [_ex(0, ["a"])], "squad")

    def test_unknown_kind(self):
        with pytest.raises(m.MetricError):
            m.evaluate([], [], "trivia")

    def test_infer_kind(self):
        assert m.infer_kind([_ex(0, ["a"])]) == "squad"
        assert m.infer_kind([_ex(0, ["a", "b"], True)]) == "multispan"


class TestFiles:
    def test_report_roundtrip_stable(self):
        rep = m.MetricsReport("multispan", 3, em_f1=66.66666666666667, overlap_f1=80.0)
        text = rep.to_text()
        assert text == "kind=multispan\nn_examples=3\nem_f1=66.66666666666667\noverlap_f1=80.0\n"
        assert m.MetricsReport.from_text(text) == rep

    def test_report_rejects_extra_keys(self):
        with pytest.raises(m.MetricError):
            m.MetricsReport.from_text("kind=squad\nn_examples=1\nem=1.0\nf1=1.0\nfoo=2\n")

    def test_predictions_roundtrip(self, tmp_path):
        preds = [m.Prediction("a", ["x", "café"]), m.Prediction("b", [])]
        m.write_predictions(preds, tmp_path / "p.jsonl")
        assert m.read_predictions(tmp_path / "p.jsonl") == preds

    def test_bad_prediction_line(self, tmp_path):
        (tmp_path / "p.jsonl").write_text('{"id": "a", "answers": "x"}\n')
        with pytest.raises(m.MetricError, match=":1:"):
            m.read_predictions(tmp_path / "p.jsonl")
