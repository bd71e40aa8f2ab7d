"""Span-tagging heads trained alongside the generator.

``QaseHead`` projects hidden states, averages the question rows into a single
query that is replicated over the context, attends over the context with
multi-head attention, adds the result back onto each projected context row and
classifies every context token as O or I.
``BaselineHead`` is the ablation without attention: each context row is
concatenated with the mean question row and passed through two linear layers.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

N_TAGS = 2
HEAD_KINDS = ("qase", "baseline", "none")


class HeadError(ValueError):
    pass


def _check_width(h: int, n_heads: int) -> None:
    if h <= 0 or n_heads <= 0:
        raise HeadError(f"head width ({h}) and head count ({n_heads}) must be positive")
    if h % n_heads:
        raise HeadError(f"head width {h} not divisible by {n_heads} attention heads")


def project(hidden: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """ReLU(hidden @ W + b), row by row."""
    if hidden.shape[-1] != w.shape[0]:
        raise HeadError(f"hidden width {hidden.shape[-1]} does not match projection input {w.shape[0]}")
    return ad.relu(ad.linear(hidden, w, b))


def mean_expand_question(z_q: Tensor, n_context: int) -> Tensor:
    """Column mean of the question rows, replicated once per context token."""
    if z_q.ndim != 2 or z_q.shape[0] == 0:
        raise HeadError("question has no tokens")
    return ad.repeat_rows(ad.mean_rows(z_q), n_context)


def mha(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    params: dict[str, Tensor],
    n_heads: int,
    key_pad: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product multi-head attention over [T, h] inputs."""
    h = query.shape[1]
    if key.shape[1] != h or value.shape[1] != h:
        raise HeadError(f"attention widths differ: {query.shape}, {key.shape}, {value.shape}")
    if key.shape[0] != value.shape[0]:
        raise HeadError(f"key has {key.shape[0]} rows but value has {value.shape[0]}")
    _check_width(h, n_heads)
    dh = h // n_heads
    tq, tk = query.shape[0], key.shape[0]

    def split(x, rows):
        return ad.transpose(ad.reshape(x, (rows, n_heads, dh)), (1, 0, 2))

    q = split(ad.linear(query, params["mha.q.W"], params["mha.q.b"]), tq)
    k = split(ad.linear(key, params["mha.k.W"], params["mha.k.b"]), tk)
    v = split(ad.linear(value, params["mha.v.W"], params["mha.v.b"]), tk)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    mask = None
    if key_pad is not None:
        mask = np.broadcast_to(np.asarray(key_pad, bool)[None, None, :], scores.shape)
    attn = ad.softmax(scores, mask=mask)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (tq, h))
    return ad.linear(ctx, params["mha.o.W"], params["mha.o.b"])


def _slices(hidden: Tensor, context_range, question_range) -> tuple[Tensor, Tensor]:
    c0, c1 = context_range
    q0, q1 = question_range
    t = hidden.shape[0]
    if c1 <= c0:
        raise HeadError("empty context range")
    if q1 <= q0:
        raise HeadError("empty question range")
    if not (0 <= c0 and c1 <= t and 0 <= q0 and q1 <= t):
        raise HeadError(f"ranges {context_range}, {question_range} outside {t} hidden rows")
    if c0 < q1 and q0 < c1:
        raise HeadError("context and question ranges overlap")
    return hidden[c0:c1], hidden[q0:q1]


def tagging_loss(p: Tensor, tags: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the gold O/I tags over context tokens."""
    if p.shape[0] != len(tags):
        raise HeadError(f"{p.shape[0]} tag distributions but {len(tags)} gold tags")
    return ad.cross_entropy(p, tags)


class QaseHead:
    kind = "qase"

    def __init__(self, d_model: int, h: int | None = None, n_heads: int = 4, seed: int = 0, dtype=np.float64):
        h = d_model if h is None else h
        _check_width(h, n_heads)
        self.d_model, self.h, self.n_heads = d_model, h, n_heads
        rng = np.random.default_rng(seed)
        shapes = {
            "proj": (d_model, h),
            "mha.q": (h, h),
            "mha.k": (h, h),
            "mha.v": (h, h),
            "mha.o": (h, h),
            "lin": (h, N_TAGS),
        }
        self.params = _init(rng, shapes, dtype)

    def forward(self, hidden: Tensor, context_range, question_range) -> Tensor:
        """Tag probabilities [T_c, 2] for the context rows of ``hidden`` [T, d_model]."""
        p = self.params
        hc, hq = _slices(hidden, context_range, question_range)
        z_c = project(hc, p["proj.W"], p["proj.b"])
        z_q = project(hq, p["proj.W"], p["proj.b"])
        query = mean_expand_question(z_q, z_c.shape[0])
        # residual: with one replicated query every MHA row is identical, so the
        # token-specific z_c must reach the classifier directly
        attended = z_c + mha(query, z_c, z_c, p, self.n_heads)
        return ad.softmax(ad.linear(attended, p["lin.W"], p["lin.b"]))

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())


class BaselineHead:
    kind = "baseline"

    def __init__(self, d_model: int, h: int | None = None, n_heads: int = 4, seed: int = 0, dtype=np.float64):
        h = d_model if h is None else h
        _check_width(h, n_heads)
        self.d_model, self.h, self.n_heads = d_model, h, n_heads
        rng = np.random.default_rng(seed)
        self.params = _init(rng, {"proj": (d_model, h), "fuse": (2 * h, h), "lin": (h, N_TAGS)}, dtype)

    def forward(self, hidden: Tensor, context_range, question_range) -> Tensor:
        p = self.params
        hc, hq = _slices(hidden, context_range, question_range)
        z_c = project(hc, p["proj.W"], p["proj.b"])
        z_q = project(hq, p["proj.W"], p["proj.b"])
        fused = ad.concat([z_c, mean_expand_question(z_q, z_c.shape[0])], axis=-1)
        hidden2 = ad.relu(ad.linear(fused, p["fuse.W"], p["fuse.b"]))
        return ad.softmax(ad.linear(hidden2, p["lin.W"], p["lin.b"]))

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())


def _init(rng: np.random.Generator, shapes: dict[str, tuple[int, int]], dtype) -> dict[str, Tensor]:
    params = {}
    for name, (fan_in, fan_out) in shapes.items():
        params[f"{name}.W"] = Tensor(ad.uniform_init(rng, (fan_in, fan_out), fan_in, dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(ad.uniform_init(rng, (fan_out,), fan_in, dtype), requires_grad=True)
    return params


def make_head(kind: str, d_model: int, h: int | None = None, n_heads: int = 4, seed: int = 0, dtype=np.float64):
    if kind == "qase":
        return QaseHead(d_model, h, n_heads, seed, dtype)
    if kind == "baseline":
        return BaselineHead(d_model, h, n_heads, seed, dtype)
    if kind == "none":
        return None
    raise HeadError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


def count_params(kind: str, d_model: int, h: int, n_heads: int) -> int:
    """Closed-form trainable parameter count of a tagging head."""
    _check_width(h, n_heads)
    projection = d_model * h + h
    classifier = N_TAGS * h + N_TAGS
    if kind == "qase":
        return projection + 4 * (h * h + h) + classifier
    if kind == "baseline":
        return projection + (2 * h * h + h) + classifier
    if kind == "none":
        return 0
    raise HeadError(f"unknown head kind {kind!r}")
