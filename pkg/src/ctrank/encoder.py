"""Stacked transformer encoder with incremental, resumable layer evaluation.

The encoder exposes `embed` (layer 0) and `encode_to_layer`, which advances
an EncoderState block by block.  Intermediate hidden states stay available,
so a caller can score a batch at one depth, narrow it, and continue
encoding only the surviving rows from where it stopped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError, UsageError
from .tensor import Tensor

ATTENTION_MASK_BIAS = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    vocab_size: int = 1024
    dropout_rate: float = 0.1

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.n_heads, self.d_ff,
               self.max_seq_len, self.vocab_size) < 1:
            raise ConfigError("encoder extents must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class TokenBatch:
    """Padded id matrix [b, m] plus a 0/1 mask of real positions."""

    ids: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        if self.ids.shape != self.pad_mask.shape or self.ids.ndim != 2:
            raise ShapeError(
                f"ids {self.ids.shape} and pad_mask {self.pad_mask.shape} "
                "must be matching 2-D arrays"
            )

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]


class EncoderState:
    """Hidden states H_0..H_top for one batch, plus its attention mask."""

    __slots__ = ("pad_mask", "hidden", "top", "attn_bias")

    def __init__(self, pad_mask: np.ndarray, h0: Tensor):
        self.pad_mask = pad_mask
        self.hidden: list[Tensor | None] = [h0]
        self.top = 0
        # additive bias [b, 1, 1, m]: 0 on real positions, -1e9 on padding
        self.attn_bias = Tensor(
            ((1.0 - pad_mask) * ATTENTION_MASK_BIAS)[:, None, None, :].astype(
                h0.data.dtype
            )
        )

    @property
    def batch_size(self) -> int:
        return self.pad_mask.shape[0]

    def layer(self, i: int) -> Tensor:
        if i >= len(self.hidden) or self.hidden[i] is None:
            raise UsageError(f"hidden state for layer {i} has not been computed")
        return self.hidden[i]

    @classmethod
    def at_layer(cls, pad_mask: np.ndarray, h: Tensor, layer: int) -> "EncoderState":
        state = cls(pad_mask, h)
        if layer:
            state.hidden = [None] * layer + state.hidden
            state.top = layer
        return state

    def select(self, rows: np.ndarray) -> "EncoderState":
        """A new state narrowed to `rows`, keeping only the top layer."""
        return EncoderState.at_layer(
            self.pad_mask[rows], T.take_rows(self.layer(self.top), rows), self.top
        )


class Encoder:
    """Embedding layer plus a stack of post-norm transformer blocks."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        d, ff = cfg.d_model, cfg.d_ff

        def dense(name: str, fan_in: int, fan_out: int) -> None:
            self.params[f"{name}.w"] = T.parameter(
                rng.normal(0.0, 0.02, (fan_in, fan_out)), dtype)
            self.params[f"{name}.b"] = T.parameter(np.zeros(fan_out), dtype)

        def norm(name: str) -> None:
            self.params[f"{name}.gain"] = T.parameter(np.ones(d), dtype)
            self.params[f"{name}.bias"] = T.parameter(np.zeros(d), dtype)

        self.params["token_embedding"] = T.parameter(
            rng.normal(0.0, 0.02, (cfg.vocab_size, d)), dtype)
        self.params["position_embedding"] = T.parameter(
            rng.normal(0.0, 0.02, (cfg.max_seq_len, d)), dtype)
        for i in range(1, cfg.n_layers + 1):
            for proj in ("q", "k", "v", "out"):
                dense(f"layer{i}.attn.{proj}", d, d)
            norm(f"layer{i}.attn_norm")
            dense(f"layer{i}.ffn.inner", d, ff)
            dense(f"layer{i}.ffn.outer", ff, d)
            norm(f"layer{i}.ffn_norm")

    # -- forward ------------------------------------------------------------

    def embed(self, batch: TokenBatch, training: bool = False,
              rng: np.random.Generator | None = None) -> EncoderState:
        """Token plus learned positional embedding; H_0 of the stack."""
        cfg = self.cfg
        if batch.seq_len > cfg.max_seq_len:
            raise DataError(
                f"sequence length {batch.seq_len} exceeds max_seq_len {cfg.max_seq_len}"
            )
        tok = T.embedding(self.params["token_embedding"], batch.ids)
        pos = T.take_rows(self.params["position_embedding"],
                          np.arange(batch.seq_len))
        h0 = T.add(tok, T.reshape(pos, (1, batch.seq_len, cfg.d_model)))
        h0 = T.dropout(h0, cfg.dropout_rate, training, rng)
        return EncoderState(batch.pad_mask, h0)

    def encode_to_layer(self, state: EncoderState, from_layer: int, to_layer: int,
                        training: bool = False,
                        rng: np.random.Generator | None = None,
                        pass_counter: np.ndarray | None = None) -> EncoderState:
        """Run blocks from_layer+1 .. to_layer; earlier states stay untouched.

        pass_counter, when given, is a per-layer int array accumulating how
        many examples each block processed.
        """
        if to_layer > self.cfg.n_layers:
            raise ConfigError(
                f"layer {to_layer} requested from a {self.cfg.n_layers}-layer encoder"
            )
        if from_layer > to_layer:
            raise UsageError(f"from_layer {from_layer} exceeds to_layer {to_layer}")
        state.layer(from_layer)  # must already be computed
        state.hidden.extend([None] * (to_layer + 1 - len(state.hidden)))
        for i in range(from_layer + 1, to_layer + 1):
            state.hidden[i] = self._block(i, state.layer(i - 1), state.attn_bias,
                                          training, rng)
            if pass_counter is not None:
                pass_counter[i] += state.batch_size
        state.top = max(state.top, to_layer)
        return state

    def _block(self, i: int, h: Tensor, attn_bias: Tensor, training: bool,
               rng: np.random.Generator | None) -> Tensor:
        p = self.params
        attended = self._attention(i, h, attn_bias, training, rng)
        h = T.layer_norm(T.add(h, attended),
                         p[f"layer{i}.attn_norm.gain"], p[f"layer{i}.attn_norm.bias"])
        fed = self._feed_forward(i, h, training, rng)
        return T.layer_norm(T.add(h, fed),
                            p[f"layer{i}.ffn_norm.gain"], p[f"layer{i}.ffn_norm.bias"])

    def _head_projection(self, i: int, flat: Tensor, name: str,
                         b: int, m: int) -> Tensor:
        p = self.params
        y = T.add(T.matmul(flat, p[f"layer{i}.attn.{name}.w"]),
                  p[f"layer{i}.attn.{name}.b"])
        return T.transpose(
            T.reshape(y, (b, m, self.cfg.n_heads, self.cfg.head_dim)), (0, 2, 1, 3)
        )

    def _attention_weights(self, i: int, h: Tensor, attn_bias: Tensor) -> Tensor:
        """Per-head attention distribution [b, heads, m, m]."""
        b, m, d = h.shape
        flat = T.reshape(h, (b * m, d))
        q = self._head_projection(i, flat, "q", b, m)
        k = self._head_projection(i, flat, "k", b, m)
        scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))),
                         1.0 / np.sqrt(self.cfg.head_dim))
        return T.softmax(T.add(scores, attn_bias), axis=-1)

    def _attention(self, i: int, h: Tensor, attn_bias: Tensor, training: bool,
                   rng: np.random.Generator | None) -> Tensor:
        cfg = self.cfg
        p = self.params
        b, m, d = h.shape
        flat = T.reshape(h, (b * m, d))
        v = self._head_projection(i, flat, "v", b, m)
        weights = self._attention_weights(i, h, attn_bias)
        weights = T.dropout(weights, cfg.dropout_rate, training, rng)
        context = T.reshape(T.transpose(T.bmm(weights, v), (0, 2, 1, 3)), (b * m, d))
        out = T.add(T.matmul(context, p[f"layer{i}.attn.out.w"]),
                    p[f"layer{i}.attn.out.b"])
        out = T.dropout(out, cfg.dropout_rate, training, rng)
        return T.reshape(out, (b, m, d))

    def attention_probe(self, state: EncoderState, i: int) -> np.ndarray:
        """Attention weights block i would apply to its input (eval mode)."""
        return self._attention_weights(i, state.layer(i - 1), state.attn_bias).data

    def _feed_forward(self, i: int, h: Tensor, training: bool,
                      rng: np.random.Generator | None) -> Tensor:
        cfg = self.cfg
        p = self.params
        b, m, d = h.shape
        flat = T.reshape(h, (b * m, d))
        inner = T.gelu(T.add(T.matmul(flat, p[f"layer{i}.ffn.inner.w"]),
                             p[f"layer{i}.ffn.inner.b"]))
        outer = T.add(T.matmul(inner, p[f"layer{i}.ffn.outer.w"]),
                      p[f"layer{i}.ffn.outer.b"])
        outer = T.dropout(outer, cfg.dropout_rate, training, rng)
        return T.reshape(outer, (b, m, d))
