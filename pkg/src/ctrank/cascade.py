"""Cascade model: one shared encoder scored by a ranking head per stage.

Stage i reads the hidden states after `layer_schedule[i-1]` encoder blocks,
pools them (mask-aware mean by default) and emits two logits per candidate;
the positive-class probability is the candidate's stage score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import Encoder, EncoderConfig, EncoderState, TokenBatch
from .errors import ConfigError, UsageError
from .kernels import softmax_fwd
from .tensor import Tensor

DEFAULT_LAYER_SCHEDULE = (4, 6, 8, 10, 12)


@dataclass(frozen=True)
class CascadeConfig:
    n_stages: int = 5
    layer_schedule: tuple[int, ...] = DEFAULT_LAYER_SCHEDULE
    head_hidden: int | None = None  # defaults to d_model
    head_depth: int = 3
    final_head_pooling: str = "mean"  # "mean" or "cls"

    def __post_init__(self):
        if self.n_stages < 1:
            raise ConfigError("a cascade needs at least one stage")
        if len(self.layer_schedule) != self.n_stages:
            raise ConfigError(
                f"layer_schedule {self.layer_schedule} does not provide "
                f"{self.n_stages} stages"
            )
        if any(b <= a for a, b in zip(self.layer_schedule, self.layer_schedule[1:])):
            raise ConfigError(f"layer_schedule must increase strictly: {self.layer_schedule}")
        if self.layer_schedule[0] < 1:
            raise ConfigError("layer_schedule entries must be positive")
        if self.head_depth < 1:
            raise ConfigError("head_depth must be at least 1")
        if self.final_head_pooling not in ("mean", "cls"):
            raise ConfigError(
                f"final_head_pooling must be 'mean' or 'cls', got {self.final_head_pooling!r}"
            )


class ClassifierHead:
    """head_depth-1 tanh hidden layers followed by a 2-logit projection."""

    def __init__(self, name: str, d_in: int, hidden: int, depth: int,
                 dropout_rate: float, rng: np.random.Generator, dtype=np.float32):
        self.name = name
        self.depth = depth
        self.dropout_rate = dropout_rate
        self.params: dict[str, Tensor] = {}
        widths = [d_in] + [hidden] * (depth - 1) + [2]
        for j, (fan_in, fan_out) in enumerate(zip(widths, widths[1:]), start=1):
            self.params[f"{name}.fc{j}.w"] = T.parameter(
                rng.normal(0.0, 0.02, (fan_in, fan_out)), dtype)
            self.params[f"{name}.fc{j}.b"] = T.parameter(np.zeros(fan_out), dtype)

    def logits(self, pooled: Tensor, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        x = pooled
        for j in range(1, self.depth):
            x = T.tanh(T.add(T.matmul(x, self.params[f"{self.name}.fc{j}.w"]),
                             self.params[f"{self.name}.fc{j}.b"]))
            x = T.dropout(x, self.dropout_rate, training, rng)
        return T.add(T.matmul(x, self.params[f"{self.name}.fc{self.depth}.w"]),
                     self.params[f"{self.name}.fc{self.depth}.b"])


def pooled_input(h: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Mean of the token encodings over non-padding positions, per example."""
    return T.masked_mean(h, pad_mask)


class CascadeModel:
    """Shared encoder plus one classifier head per cascade stage."""

    def __init__(self, enc_cfg: EncoderConfig, cas_cfg: CascadeConfig,
                 seed: int = 0, dtype=np.float32):
        if cas_cfg.layer_schedule[-1] != enc_cfg.n_layers:
            raise ConfigError(
                f"last scheduled layer {cas_cfg.layer_schedule[-1]} must equal "
                f"encoder depth {enc_cfg.n_layers}"
            )
        self.enc_cfg = enc_cfg
        self.cas_cfg = cas_cfg
        self.seed = seed
        self.dtype = dtype
        rng = np.random.Generator(np.random.Philox(seed))
        self.encoder = Encoder(enc_cfg, rng, dtype)
        hidden = cas_cfg.head_hidden or enc_cfg.d_model
        self.heads = [
            ClassifierHead(f"head{i}", enc_cfg.d_model, hidden, cas_cfg.head_depth,
                           enc_cfg.dropout_rate, rng, dtype)
            for i in range(1, cas_cfg.n_stages + 1)
        ]

    @property
    def n_stages(self) -> int:
        return self.cas_cfg.n_stages

    def stage_layer(self, stage: int) -> int:
        if not 1 <= stage <= self.n_stages:
            raise ConfigError(
                f"stage {stage} outside the cascade's {self.n_stages} stages"
            )
        return self.cas_cfg.layer_schedule[stage - 1]

    def params(self) -> dict[str, Tensor]:
        merged = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        for head in self.heads:
            merged.update(head.params)
        return merged

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def _pooled(self, state: EncoderState, stage: int) -> Tensor:
        h = state.layer(self.stage_layer(stage))
        if stage == self.n_stages and self.cas_cfg.final_head_pooling == "cls":
            return self._cls_vector(h)
        return pooled_input(h, state.pad_mask)

    @staticmethod
    def _cls_vector(h: Tensor) -> Tensor:
        b, m, d = h.shape
        rows = T.take_rows(T.reshape(h, (b * m, d)), np.arange(b) * m)
        return rows

    def stage_logits(self, state: EncoderState, stage: int, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        """Two logits per example from the stage's head (encoding must be ready)."""
        self.stage_layer(stage)  # validates the stage index
        return self.heads[stage - 1].logits(self._pooled(state, stage), training, rng)

    def stage_scores(self, state: EncoderState, stage: int) -> np.ndarray:
        """Positive-class probability per example, in (0, 1)."""
        logits = self.stage_logits(state, stage)
        return softmax_fwd(np.ascontiguousarray(logits.data))[:, 1]

    def encode_batch(self, batch: TokenBatch, to_layer: int, training: bool = False,
                     rng: np.random.Generator | None = None,
                     pass_counter: np.ndarray | None = None) -> EncoderState:
        if batch.size == 0:
            raise UsageError("cannot encode an empty batch")
        state = self.encoder.embed(batch, training, rng)
        return self.encoder.encode_to_layer(state, 0, to_layer, training, rng,
                                            pass_counter)

    def forward_all_stages(self, batch: TokenBatch,
                           pass_counter: np.ndarray | None = None) -> list[np.ndarray]:
        """Eval-mode scores of every stage with no pruning (one shared pass)."""
        state = self.encode_batch(batch, 0)
        scores = []
        prev = 0
        for stage in range(1, self.n_stages + 1):
            layer = self.stage_layer(stage)
            self.encoder.encode_to_layer(state, prev, layer,
                                         pass_counter=pass_counter)
            scores.append(self.stage_scores(state, stage))
            prev = layer
        return scores


def monolithic_model(enc_cfg: EncoderConfig, n_layers: int, seed: int = 0,
                     head_hidden: int | None = None, head_depth: int = 3,
                     dtype=np.float32) -> CascadeModel:
    """A single-stage model of the given depth (an independent reranker)."""
    cfg = EncoderConfig(
        n_layers=n_layers, d_model=enc_cfg.d_model, n_heads=enc_cfg.n_heads,
        d_ff=enc_cfg.d_ff, max_seq_len=enc_cfg.max_seq_len,
        vocab_size=enc_cfg.vocab_size, dropout_rate=enc_cfg.dropout_rate,
    )
    cascade = CascadeConfig(n_stages=1, layer_schedule=(n_layers,),
                            head_hidden=head_hidden, head_depth=head_depth)
    return CascadeModel(cfg, cascade, seed=seed, dtype=dtype)
