import numpy as np
import pytest

from qase import autodiff as ad
from qase.autodiff import Tensor
from qase.head import BaselineHead, HeadError, QaseHead, count_params, make_head, tagging_loss

from conftest import central_diff, rel_err


def hidden(rng, t=9, d=8):
    return Tensor(rng.normal(size=(t, d)))


def test_output_is_distribution(rng):
    head = QaseHead(8, 4, n_heads=2, seed=0)
    p = head.forward(hidden(rng), (0, 6), (6, 9)).data
    assert p.shape == (6, 2)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_param_count_closed_form():
    assert QaseHead(8, 4, 2).n_params() == count_params("qase", 8, 4, 2) == 126
    assert BaselineHead(8, 4, 2).n_params() == count_params("baseline", 8, 4, 2) == 82
    assert make_head("none", 8) is None


def test_invalid_ranges(rng):
    head = QaseHead(8, 4, 2)
    h = hidden(rng)
    with pytest.raises(HeadError, match="question"):
        head.forward(h, (0, 6), (6, 6))
    with pytest.raises(HeadError, match="overlap"):
        head.forward(h, (0, 6), (5, 8))
    with pytest.raises(HeadError, match="outside"):
        head.forward(h, (0, 6), (6, 12))


def test_bad_widths():
    with pytest.raises(HeadError, match="divisible"):
        QaseHead(8, 6, 4)
    with pytest.raises(HeadError, match="unknown"):
        make_head("crf", 8)


def test_tag_count_mismatch(rng):
    p = QaseHead(8, 4, 2).forward(hidden(rng), (0, 6), (6, 9))
    with pytest.raises(HeadError):
        tagging_loss(p, [0, 1])


@pytest.mark.parametrize("cls", [QaseHead, BaselineHead])
def test_question_permutation_invariance(cls, rng):
    head = cls(8, 4, 2, seed=1)
    h = rng.normal(size=(10, 8))
    a = head.forward(Tensor(h), (0, 6), (6, 10)).data
    h2 = h.copy()
    h2[6:10] = h[6:10][rng.permutation(4)]
    b = head.forward(Tensor(h2), (0, 6), (6, 10)).data
    assert np.abs(a - b).max() <= 1e-12


@pytest.mark.parametrize("cls", [QaseHead, BaselineHead])
def test_gradients_match_finite_differences(cls, rng):
    head = cls(8, 4, 2, seed=2)
    h = Tensor(rng.normal(size=(9, 8)), requires_grad=True)
    tags = [0, 1, 1, 0, 0, 1]

    def f():
        return tagging_loss(head.forward(h, (0, 6), (6, 9)), tags).item()

    ad.backward(tagging_loss(head.forward(h, (0, 6), (6, 9)), tags))
    for name, t in [*head.params.items(), ("hidden", h)]:
        assert rel_err(t.grad, central_diff(f, t.data)) <= 1e-4, name


def test_context_tokens_are_distinguished(rng):
    # each context row must reach the classifier; identical rows give identical output
    head = QaseHead(8, 4, 2, seed=0)
    h = rng.normal(size=(6, 8))
    h[1] = h[0]
    p = head.forward(Tensor(h), (0, 4), (4, 6)).data
    np.testing.assert_allclose(p[0], p[1])
    assert np.abs(p[0] - p[2]).max() > 0


def test_single_head_identity_mha_matches_hand_attention(rng):
    from qase.head import mha

    x = rng.normal(size=(3, 4))
    eye, zero = np.eye(4), np.zeros(4)
    params = {f"mha.{p}.{s}": Tensor(eye if s == "W" else zero) for p in "qkvo" for s in "Wb"}
    got = mha(Tensor(x), Tensor(x), Tensor(x), params, n_heads=1).data
    scores = x @ x.T / 2.0
    w = np.exp(scores - scores.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(got, w @ x, atol=1e-9)


def test_heads_agree_on_shape_and_normalisation(rng):
    h = hidden(rng)
    a = QaseHead(8, 4, 2).forward(h, (0, 6), (6, 9)).data
    b = BaselineHead(8, 4, 2).forward(h, (0, 6), (6, 9)).data
    assert a.shape == b.shape
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-6)
