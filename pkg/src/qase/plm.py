"""A toy encoder-decoder transformer used as the generator, with optional LoRA adapters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prompts import BOS, EOS, PAD

ATTN_PROJ = ("q", "k", "v", "o")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class PlmConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 160

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 32.0
    dropout: float = 0.05
    enabled: bool = False

    def __post_init__(self):
        if self.rank <= 0:
            raise ModelError("LoRA rank must be positive")
        if self.alpha <= 0:
            raise ModelError("LoRA alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("LoRA dropout must be in [0, 1)")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def attention_blocks(cfg: PlmConfig) -> list[str]:
    names = [f"enc.{i}.self" for i in range(cfg.n_layers)]
    for i in range(cfg.n_layers):
        names += [f"dec.{i}.self", f"dec.{i}.cross"]
    return names


def attention_scores_mask(key_pad: np.ndarray, n_heads: int, tq: int, causal: bool) -> np.ndarray:
    """Boolean [B, H, Tq, Tk] mask, True where attention is disallowed."""
    b, tk = key_pad.shape
    mask = np.broadcast_to(key_pad[:, None, None, :], (b, n_heads, tq, tk))
    if causal:
        fut = np.triu(np.ones((tq, tk), dtype=bool), k=1)
        mask = mask | fut[None, None]
    return np.ascontiguousarray(mask)


class ToyPLM:
    """Parameters live in ``self.params`` keyed by stable dotted names."""

    def __init__(self, cfg: PlmConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.lora: LoraConfig | None = None
        self.training = False
        self._dropout_rng = np.random.default_rng(seed + 1)
        rng = np.random.default_rng(seed)
        d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        p: dict[str, np.ndarray] = {"embed": rng.normal(0.0, 1.0, (v, d))}

        def lin(name, n_in, n_out):
            p[f"{name}.W"] = ad.uniform_init(rng, (n_in, n_out), n_in)
            p[f"{name}.b"] = ad.uniform_init(rng, (n_out,), n_in)

        def norm(name):
            p[f"{name}.g"] = np.ones(d)
            p[f"{name}.b"] = np.zeros(d)

        for i in range(cfg.n_layers):
            for proj in ATTN_PROJ:
                lin(f"enc.{i}.self.{proj}", d, d)
            norm(f"enc.{i}.ln1")
            norm(f"enc.{i}.ln2")
            lin(f"enc.{i}.ff1", d, f)
            lin(f"enc.{i}.ff2", f, d)
        norm("enc.ln")
        for i in range(cfg.n_layers):
            for block in ("self", "cross"):
                for proj in ATTN_PROJ:
                    lin(f"dec.{i}.{block}.{proj}", d, d)
            norm(f"dec.{i}.ln1")
            norm(f"dec.{i}.ln2")
            norm(f"dec.{i}.ln3")
            lin(f"dec.{i}.ff1", d, f)
            lin(f"dec.{i}.ff2", f, d)
        norm("dec.ln")
        p["out.b"] = np.zeros(v)
        self.params: dict[str, Tensor] = {
            k: Tensor(val.astype(self.dtype), requires_grad=True) for k, val in p.items()
        }
        self._pe = ad.sinusoidal_positions(cfg.max_seq_len, d, self.dtype)

    # ------------------------------------------------------------ adapters

    def apply_lora(self, lora: LoraConfig, seed: int = 0) -> "ToyPLM":
        """Freeze every base weight and add rank-``r`` adapters to each attention projection."""
        if not lora.enabled:
            raise ModelError("apply_lora called with a disabled LoRA config")
        d = self.cfg.d_model
        if lora.rank >= d:
            raise ModelError(f"LoRA rank {lora.rank} must be smaller than d_model={d}")
        if self.lora is not None:
            raise ModelError("LoRA adapters already applied")
        rng = np.random.default_rng(seed)
        for t in self.params.values():
            t.requires_grad = False
        for block in attention_blocks(self.cfg):
            for proj in ATTN_PROJ:
                name = f"{block}.{proj}"
                a = ad.uniform_init(rng, (lora.rank, d), d).astype(self.dtype)
                self.params[f"{name}.lora_A"] = Tensor(a, requires_grad=True)
                self.params[f"{name}.lora_B"] = Tensor(np.zeros((d, lora.rank), self.dtype), requires_grad=True)
        self.lora = lora
        return self

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.trainable().values())

    # ------------------------------------------------------------ building blocks

    def _proj(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        out = ad.linear(x, p[f"{name}.W"], p[f"{name}.b"])
        if self.lora is not None:
            xin = x
            if self.training and self.lora.dropout > 0:
                keep = self._dropout_rng.random(x.shape) >= self.lora.dropout
                xin = ad.mul_const(x, keep / (1.0 - self.lora.dropout))
            a_t = ad.transpose(p[f"{name}.lora_A"], (1, 0))
            b_t = ad.transpose(p[f"{name}.lora_B"], (1, 0))
            delta = ad.linear(ad.linear(xin, a_t), b_t)
            out = out + ad.scale(delta, self.lora.scale)
        return out

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attend(self, xq: Tensor, xkv: Tensor, name: str, mask: np.ndarray) -> Tensor:
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        h = self.cfg.n_heads
        dh = d // h

        def heads(t, n):
            return ad.transpose(ad.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q = heads(self._proj(xq, f"{name}.q"), tq)
        k = heads(self._proj(xkv, f"{name}.k"), tk)
        v = heads(self._proj(xkv, f"{name}.v"), tk)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, mask=mask)
        ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        return self._proj(ad.reshape(ctx, (b, tq, d)), f"{name}.o")

    def _ff(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        hidden = ad.relu(ad.linear(x, p[f"{name}.ff1.W"], p[f"{name}.ff1.b"]))
        return ad.linear(hidden, p[f"{name}.ff2.W"], p[f"{name}.ff2.b"])

    def _embed(self, ids: np.ndarray) -> Tensor:
        t = ids.shape[1]
        if t > self.cfg.max_seq_len:
            raise ModelError(f"sequence length {t} exceeds max_seq_len={self.cfg.max_seq_len}")
        x = ad.embedding(self.params["embed"], ids)
        pe = np.broadcast_to(self._pe[:t], x.shape)
        return ad.add_const(x, pe)

    # ------------------------------------------------------------ public forward passes

    def encode(self, ids: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
        """Hidden states [B, T, d_model] for token ids [B, T]; ``pad_mask`` is True at padding."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.size and ids.max() >= self.cfg.vocab_size:
            raise ModelError(f"token id {ids.max()} outside vocabulary of size {self.cfg.vocab_size}")
        if pad_mask is None:
            pad_mask = np.zeros(ids.shape, dtype=bool)
        t = ids.shape[1]
        mask = attention_scores_mask(pad_mask, self.cfg.n_heads, t, causal=False)
        x = self._embed(ids)
        for i in range(self.cfg.n_layers):
            x = self._enc_layer(x, i, mask)
        return self._ln(x, "enc.ln")

    def _enc_layer(self, x: Tensor, i: int, mask: np.ndarray) -> Tensor:
        h = self._ln(x, f"enc.{i}.ln1")
        x = x + self._attend(h, h, f"enc.{i}.self", mask)
        return x + self._ff(self._ln(x, f"enc.{i}.ln2"), f"enc.{i}")

    def decode(
        self,
        enc_out: Tensor,
        enc_pad: np.ndarray,
        prefix: np.ndarray,
        prefix_pad: np.ndarray | None = None,
    ) -> Tensor:
        """Next-token logits [B, L, V] for every position of the decoder input ``prefix``."""
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        b, length = prefix.shape
        if prefix_pad is None:
            prefix_pad = np.zeros(prefix.shape, dtype=bool)
        self_mask = attention_scores_mask(prefix_pad, self.cfg.n_heads, length, causal=True)
        cross_mask = attention_scores_mask(enc_pad, self.cfg.n_heads, length, causal=False)
        x = self._embed(prefix)
        for i in range(self.cfg.n_layers):
            h = self._ln(x, f"dec.{i}.ln1")
            x = x + self._attend(h, h, f"dec.{i}.self", self_mask)
            x = x + self._attend(self._ln(x, f"dec.{i}.ln2"), enc_out, f"dec.{i}.cross", cross_mask)
            x = x + self._ff(self._ln(x, f"dec.{i}.ln3"), f"dec.{i}")
        x = self._ln(x, "dec.ln")
        # output layer tied to the input embedding
        table = ad.transpose(self.params["embed"], (1, 0))
        logits = ad.scale(ad.linear(x, table), 1.0 / math.sqrt(self.cfg.d_model))
        return ad.add_bias(logits, self.params["out.b"])

    def decode_step(self, enc_out: Tensor, enc_pad: np.ndarray, prefix: list[int]) -> np.ndarray:
        """Logits [vocab_size] for the token following ``prefix`` (one sequence)."""
        if not prefix or prefix[0] != BOS:
            raise ModelError("decoder prefix must be non-empty and start with BOS")
        if len(prefix) > self.cfg.max_seq_len:
            raise ModelError(f"prefix length {len(prefix)} exceeds max_seq_len={self.cfg.max_seq_len}")
        with ad.no_grad():
            logits = self.decode(enc_out, enc_pad, np.array([prefix]))
        return logits.data[0, -1]

    def greedy(self, ids: np.ndarray, pad_mask: np.ndarray, max_new: int) -> list[list[int]]:
        """Batched greedy decoding; returns generated ids per row, EOS excluded."""
        was_training = self.training
        self.training = False
        try:
            with ad.no_grad():
                enc = self.encode(ids, pad_mask)
                b = ids.shape[0]
                prefix = np.full((b, 1), BOS, dtype=np.int64)
                done = np.zeros(b, dtype=bool)
                steps = min(max_new, self.cfg.max_seq_len - 1)
                for _ in range(steps):
                    logits = self.decode(enc, pad_mask, prefix).data[:, -1]
                    nxt = np.where(done, PAD, logits.argmax(axis=-1))
                    prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
                    done |= nxt == EOS
                    if done.all():
                        break
        finally:
            self.training = was_training
        out = []
        for row in prefix[:, 1:]:
            seq = []
            for tok in row:
                if tok in (EOS, PAD):
                    break
                seq.append(int(tok))
            out.append(seq)
        return out


def lora_param_count(cfg: PlmConfig, rank: int) -> int:
    """Closed form: each adapted d x d projection adds A (r x d) and B (d x r)."""
    return len(attention_blocks(cfg)) * len(ATTN_PROJ) * 2 * rank * cfg.d_model
