"""Joint fine-tuning of the generator and a tagging head, plus inference and sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataError, MrcExample
from .head import HEAD_KINDS, count_params, make_head, tagging_loss
from .metrics import MetricsReport, Prediction, evaluate, infer_kind
from .plm import LoraConfig, ModelError, PlmConfig, ToyPLM
from .prompts import (
    BOS,
    EOS,
    ORDERINGS,
    PAD,
    EncodedPrompt,
    PromptTemplate,
    Vocab,
    detokenize,
    encode_prompt,
    format_answer,
    parse_answer,
    tokenize,
)
from .spans import spans_to_tags

log = logging.getLogger(__name__)

PLM_PREFIX = "plm."
HEAD_PREFIX = "head."
DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    beta: float = 1.0
    learning_rate: float = 1e-4
    epochs: int = 3
    batch_size: int = 8
    seed: int = 0
    head_kind: str = "qase"
    prompt_ordering: str = "context-first"
    lora: LoraConfig = field(default_factory=LoraConfig)
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 160
    head_width: int | None = None
    head_heads: int = 4
    multi_span_prompt: bool | None = None
    max_answer_len: int = 32
    dtype: str = "float32"
    patience: int = 3
    min_delta: float = 1e-4

    def __post_init__(self):
        if isinstance(self.lora, dict):
            self.lora = LoraConfig(**self.lora)
        self.validate()

    def validate(self) -> None:
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ConfigError(f"beta must be a finite non-negative number, got {self.beta}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}")
        if self.prompt_ordering not in ORDERINGS:
            raise ConfigError(f"prompt_ordering must be one of {ORDERINGS}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if self.max_answer_len < 1 or self.patience < 1:
            raise ConfigError("max_answer_len and patience must be >= 1")
        try:
            self.plm_config(5)
        except ModelError as e:
            raise ConfigError(str(e)) from None

    @property
    def width(self) -> int:
        return self.d_model if self.head_width is None else self.head_width

    def plm_config(self, vocab_size: int) -> PlmConfig:
        return PlmConfig(vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len)

    def to_flat(self) -> dict:
        d = dataclasses.asdict(self)
        lora = d.pop("lora")
        d.update({f"lora_{k}": v for k, v in lora.items()})
        return d

    @classmethod
    def from_flat(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        lora = {k[5:]: d.pop(k) for k in list(d) if k.startswith("lora_")}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d, lora=LoraConfig(**lora))
        except (TypeError, ModelError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        if isinstance(raw.get("lora"), dict):
            raw.update({f"lora_{k}": v for k, v in raw.pop("lora").items()})
        return cls.from_flat(raw)

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_flat(), f, indent=2, sort_keys=True)
            f.write("\n")


@dataclass
class LossBreakdown:
    lml: Tensor
    qase: Tensor | None
    total: Tensor
    beta: float

    def values(self) -> tuple[float, float, float]:
        q = self.qase.item() if self.qase is not None else 0.0
        return self.lml.item(), q, self.total.item()


def lm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy over answer-token positions (``mask`` True); prompt tokens never enter."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise TrainingError("empty target sequence")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    return ad.nll_masked(ad.log_softmax(logits), targets, mask)


def combined_loss(lml: Tensor, qase: Tensor | None, beta: float) -> LossBreakdown:
    """total = lml + beta * qase."""
    for name, t in (("lml", lml), ("qase", qase)):
        if t is not None and not np.all(np.isfinite(t.data)):
            raise TrainingError(f"non-finite {name} loss")
    if qase is None:
        return LossBreakdown(lml, None, lml, beta)
    return LossBreakdown(lml, qase, lml + ad.scale(qase, float(beta)), beta)


# ---------------------------------------------------------------- features


@dataclass
class Feature:
    example: MrcExample
    prompt: EncodedPrompt
    tags: list[int]
    target: list[int]


def template_for(examples: Sequence[MrcExample], config: TrainConfig) -> PromptTemplate:
    multi = config.multi_span_prompt
    if multi is None:
        multi = any(ex.multi_span for ex in examples)
    return PromptTemplate(config.prompt_ordering, bool(multi))


def _supervision(ex: MrcExample) -> list:
    # single-span gold lists are alternatives; supervise with the first
    return list(ex.answers) if ex.multi_span else list(ex.answers[:1])


def target_text(ex: MrcExample, template: PromptTemplate) -> str:
    return format_answer([a.text for a in _supervision(ex)], template.multi_span)


def build_vocab(examples: Sequence[MrcExample], template: PromptTemplate) -> Vocab:
    texts = []
    for ex in examples:
        texts += [ex.context, ex.question, target_text(ex, template)]
    return Vocab.build(texts)


def featurize(ex: MrcExample, template: PromptTemplate, vocab: Vocab, config: TrainConfig) -> Feature:
    prompt = encode_prompt(template, ex.context, ex.question, vocab, config.max_seq_len)
    tags = spans_to_tags(prompt.context_offsets, _supervision(ex), len(ex.context))
    text = target_text(ex, template)
    target = vocab.ids(t.text for t in tokenize(text)) if text.strip() else []
    if len(target) + 1 > config.max_seq_len:
        raise DataError(f"example {ex.id}: answer longer than max_seq_len")
    return Feature(ex, prompt, tags, target + [EOS])


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    pad = np.ones((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        pad[i, : len(s)] = False
    return ids, pad


# ---------------------------------------------------------------- optimiser


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------- model bundle


@dataclass
class Model:
    plm: ToyPLM
    head: object | None
    vocab: Vocab
    template: PromptTemplate
    config: TrainConfig

    def trainable(self) -> dict[str, Tensor]:
        out = {PLM_PREFIX + k: t for k, t in self.plm.trainable().items()}
        if self.head is not None:
            out.update({HEAD_PREFIX + k: t for k, t in self.head.params.items()})
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        out = {PLM_PREFIX + k: t.data for k, t in self.plm.params.items()}
        if self.head is not None:
            out.update({HEAD_PREFIX + k: t.data for k, t in self.head.params.items()})
        return out

    def meta(self) -> dict:
        return {
            "format": 1,
            "plm": self.plm.cfg.to_dict(),
            "lora": dataclasses.asdict(self.plm.lora) if self.plm.lora is not None else None,
            "vocab": self.vocab.tokens,
            "template": {"ordering": self.template.ordering, "multi_span": self.template.multi_span},
            "head": None
            if self.head is None
            else {"kind": self.head.kind, "width": self.head.h, "n_heads": self.head.n_heads},
            "max_answer_len": self.config.max_answer_len,
            "train_config": self.config.to_flat(),
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.tensors(), self.meta())


def _seeds(seed: int) -> dict[str, int]:
    names = ("plm", "head", "shuffle", "dropout", "lora")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


def build_model(config: TrainConfig, vocab: Vocab, template: PromptTemplate) -> Model:
    seeds = _seeds(config.seed)
    dtype = DTYPES[config.dtype]
    plm = ToyPLM(config.plm_config(len(vocab)), seed=seeds["plm"], dtype=dtype)
    plm._dropout_rng = np.random.default_rng(seeds["dropout"])
    if config.lora.enabled:
        plm.apply_lora(config.lora, seed=seeds["lora"])
    head = make_head(config.head_kind, config.d_model, config.width, config.head_heads, seeds["head"], dtype)
    return Model(plm, head, vocab, template, config)


def batch_loss(model: Model, feats: Sequence[Feature]) -> tuple[LossBreakdown, int, int]:
    """Forward one batch; returns losses and (correct, total) tag counts."""
    ids, pad = pad_batch([f.prompt.ids for f in feats])
    enc = model.plm.encode(ids, pad)
    dec_in, dec_pad = pad_batch([[BOS] + f.target[:-1] for f in feats])
    targets, tgt_pad = pad_batch([f.target for f in feats])
    logits = model.plm.decode(enc, pad, dec_in, dec_pad)
    lml = lm_loss(logits, targets, ~tgt_pad)
    qase = None
    correct = total = 0
    if model.head is not None:
        per_example = []
        for b, f in enumerate(feats):
            probs = model.head.forward(enc[b], f.prompt.context_range, f.prompt.question_range)
            per_example.append(tagging_loss(probs, f.tags))
            correct += int((probs.data.argmax(axis=1) == np.asarray(f.tags)).sum())
            total += len(f.tags)
        qase = per_example[0]
        for t in per_example[1:]:
            qase = qase + t
        qase = ad.scale(qase, 1.0 / len(per_example))
    return combined_loss(lml, qase, model.config.beta), correct, total


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    steps: int


def train(
    corpus: Sequence[MrcExample],
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
    vocab: Vocab | None = None,
) -> TrainResult:
    if not corpus:
        raise TrainingError("empty training corpus")
    for ex in corpus:
        if not ex.answers:
            raise DataError(f"training example {ex.id} has no gold answer")
    template = template_for(corpus, config)
    vocab = vocab or build_vocab(corpus, template)
    feats = [featurize(ex, template, vocab, config) for ex in corpus]
    model = build_model(config, vocab, template)
    params = model.trainable()
    opt = Adam(params, config.learning_rate)
    shuffle = np.random.default_rng(_seeds(config.seed)["shuffle"])
    model.plm.training = True
    history: list[dict] = []
    step, stall, prev = 0, 0, None
    try:
        for epoch in range(1, config.epochs + 1):
            order = shuffle.permutation(len(feats))
            sums = np.zeros(3)
            n_batches = correct = total = 0
            for i in range(0, len(order), config.batch_size):
                batch = [feats[j] for j in order[i : i + config.batch_size]]
                if not batch:
                    raise TrainingError("empty batch")
                losses, c, t = batch_loss(model, batch)
                vals = losses.values()
                if not all(math.isfinite(v) for v in vals):
                    raise TrainingError(f"non-finite loss at step {step}")
                ad.backward(losses.total)
                opt.step()
                opt.zero_grad()
                step += 1
                sums += vals
                n_batches += 1
                correct += c
                total += t
            lml, qase, tot = (sums / n_batches).tolist()
            rec = {
                "epoch": epoch,
                "lml": lml,
                "qase": qase,
                "total": tot,
                "tag_accuracy": correct / total if total else None,
            }
            history.append(rec)
            log.info("epoch %d lml=%.4f qase=%.4f total=%.4f", epoch, lml, qase, tot)
            if on_epoch is not None:
                on_epoch(rec)
            if prev is not None and prev - tot < config.min_delta:
                stall += 1
                if stall >= config.patience:
                    break
            else:
                stall = 0
            prev = tot
    finally:
        model.plm.training = False
    return TrainResult(model, history, step)


def tag_accuracy(model: Model, examples: Sequence[MrcExample]) -> float:
    """Token-level accuracy of the head's argmax tags against the supervision tags."""
    if model.head is None:
        raise TrainingError("model has no tagging head")
    feats = [featurize(ex, model.template, model.vocab, model.config) for ex in examples]
    correct = total = 0
    with ad.no_grad():
        for i in range(0, len(feats), model.config.batch_size):
            batch = feats[i : i + model.config.batch_size]
            ids, pad = pad_batch([f.prompt.ids for f in batch])
            enc = model.plm.encode(ids, pad)
            for b, f in enumerate(batch):
                p = model.head.forward(enc[b], f.prompt.context_range, f.prompt.question_range)
                correct += int((p.data.argmax(axis=1) == np.asarray(f.tags)).sum())
                total += len(f.tags)
    return correct / total


# ---------------------------------------------------------------- inference


@dataclass
class Generator:
    """The generation component alone, as restored from a checkpoint."""

    plm: ToyPLM
    vocab: Vocab
    template: PromptTemplate
    max_answer_len: int

    def predict(self, examples: Sequence[MrcExample], batch_size: int = 16) -> list[Prediction]:
        prompts = [
            encode_prompt(self.template, ex.context, ex.question, self.vocab, self.plm.cfg.max_seq_len)
            for ex in examples
        ]
        out = []
        for i in range(0, len(prompts), batch_size):
            ids, pad = pad_batch([p.ids for p in prompts[i : i + batch_size]])
            for ex, gen in zip(examples[i : i + batch_size], self.plm.greedy(ids, pad, self.max_answer_len + 1)):
                text = detokenize(self.vocab.words(gen))
                out.append(Prediction(ex.id, parse_answer(text, self.template.multi_span)))
        return out


def load_generator(path, ordering: str | None = None) -> Generator:
    """Restore only the generator tensors; any head tensors in the file are never read."""
    meta, tensors = load_checkpoint(path, prefix=PLM_PREFIX)
    try:
        cfg = PlmConfig(**meta["plm"])
        vocab = Vocab(list(meta["vocab"]))
        tmpl = meta["template"]
        template = PromptTemplate(ordering or tmpl["ordering"], bool(tmpl["multi_span"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: incompatible checkpoint metadata ({e})") from None
    if cfg.vocab_size != len(vocab):
        raise CheckpointError(f"{path}: vocab of {len(vocab)} tokens but model expects {cfg.vocab_size}")
    plm = ToyPLM(cfg, seed=0, dtype=np.float32)
    if meta.get("lora"):
        plm.apply_lora(LoraConfig(**meta["lora"]))
    expected = {PLM_PREFIX + k: t.shape for k, t in plm.params.items()}
    found = {k: v.shape for k, v in tensors.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        bad = sorted(k for k in expected.keys() & found.keys() if expected[k] != found[k])
        raise CheckpointError(f"{path}: checkpoint does not match config (missing {missing[:3]}, mismatched {bad[:3]})")
    for k, t in plm.params.items():
        t.data = tensors[PLM_PREFIX + k]
        t.requires_grad = False
    return Generator(plm, vocab, template, int(meta.get("max_answer_len", 32)))


def infer(checkpoint, examples: Sequence[MrcExample], ordering: str | None = None) -> list[Prediction]:
    return load_generator(checkpoint, ordering).predict(examples)


# ---------------------------------------------------------------- sweeps and accounting


def parse_grid(spec: str) -> list[float]:
    """'lo:hi:step' (inclusive of hi) or a comma-separated list."""
    try:
        if ":" in spec:
            lo, hi, step = (float(x) for x in spec.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(math.floor((hi - lo) / step + 1e-9)) + 1
            return [round(lo + i * step, 10) for i in range(n)]
        values = [float(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad beta grid {spec!r}; expected lo:hi:step or a comma list") from None
    if not values:
        raise ConfigError("empty beta grid")
    return values


def sweep_beta(
    corpus: Sequence[MrcExample],
    dev: Sequence[MrcExample],
    config: TrainConfig,
    grid: Sequence[float],
    heads: Sequence[str] | None = None,
    kind: str | None = None,
) -> list[dict]:
    """Train and evaluate once per (head kind, beta); rows sorted by beta, then head kind."""
    if not grid:
        raise ConfigError("empty beta grid")
    heads = list(heads or [config.head_kind])
    kind = kind or infer_kind(dev)
    rows = []
    for beta in sorted(grid):
        for head in heads:
            cfg = dataclasses.replace(config, beta=float(beta), head_kind=head)
            try:
                result = train(corpus, cfg)
            except (TrainingError, DataError) as e:
                raise TrainingError(f"beta={beta} head={head}: {e}") from e
            gen = Generator(result.model.plm, result.model.vocab, result.model.template, cfg.max_answer_len)
            report = evaluate(gen.predict(dev), dev, kind)
            row = {"beta": float(beta), "head": head, "ordering": cfg.prompt_ordering, "epochs": len(result.history)}
            row.update(dict(report.items()))
            rows.append(row)
    return rows


def report_params(config: TrainConfig, vocab_size: int = 256) -> tuple[int, int, int]:
    """(generator trainable count, count with head, head count), from instantiated tensors."""
    vocab = Vocab([*Vocab().tokens, *(f"w{i}" for i in range(max(0, vocab_size - len(Vocab()))))])
    model = build_model(config, vocab, PromptTemplate(config.prompt_ordering))
    base = model.plm.n_trainable()
    delta = model.head.n_params() if model.head is not None else 0
    return base, base + delta, delta


def closed_form_delta(config: TrainConfig) -> int:
    return count_params(config.head_kind, config.d_model, config.width, config.head_heads)


def report_for(model: Model, examples: Sequence[MrcExample], kind: str | None = None) -> MetricsReport:
    gen = Generator(model.plm, model.vocab, model.template, model.config.max_answer_len)
    return evaluate(gen.predict(examples), examples, kind or infer_kind(examples))
