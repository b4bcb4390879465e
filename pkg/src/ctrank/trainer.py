"""Multi-task cascade training.

One ranking stage is drawn uniformly per mini-batch; only its head's
point-wise loss is computed and the gradient runs through the shared
encoder all the way into the embedding tables.  Candidates are never
pruned during training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import kernels
from . import metrics as M
from . import tensor as T
from .cascade import CascadeModel
from .data import QuestionGroup, RankingExample, build_batch, sequence_ids
from .errors import ConfigError, DataError, UsageError
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    warmup_updates: int = 200
    total_updates: int | None = None  # resolved to epochs * steps when unset
    epochs: int = 20
    batch_examples: int = 64
    batch_token_budget: int | None = None  # alternative batching mode
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_updates < 1:
            raise ConfigError("warmup_updates must be at least 1")
        if self.total_updates is not None and self.warmup_updates >= self.total_updates:
            raise ConfigError(
                f"warmup_updates {self.warmup_updates} must be below "
                f"total_updates {self.total_updates}"
            )
        if self.epochs < 1 or self.batch_examples < 1:
            raise ConfigError("epochs and batch_examples must be positive")
        if self.batch_token_budget is not None and self.batch_token_budget < 1:
            raise ConfigError("batch_token_budget must be positive when set")


def lr_at(update: int, cfg: TrainConfig) -> float:
    """Triangular schedule: 0 -> peak over the warmup, then linearly to 0."""
    if update < 0:
        raise UsageError(f"update counter cannot be negative: {update}")
    if cfg.total_updates is None:
        raise ConfigError("total_updates must be resolved before scheduling")
    if update <= cfg.warmup_updates:
        return cfg.peak_lr * update / cfg.warmup_updates
    remaining = (cfg.total_updates - update) / (cfg.total_updates - cfg.warmup_updates)
    return cfg.peak_lr * max(0.0, remaining)


def sample_stage(rng: np.random.Generator, n_stages: int) -> int:
    """Uniform draw over stages 1..n_stages."""
    return int(rng.integers(1, n_stages + 1))


class Adam:
    """Adam over a named parameter dict; parameters without a gradient are
    skipped, so untouched heads stay bitwise identical across steps."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moments = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data), 0)
            for name, p in params.items()
        }

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v, steps = self.moments[name]
            steps += 1
            kernels.adam_step(p.data, p.grad, m, v, lr,
                              self.beta1, self.beta2, self.eps, steps)
            self.moments[name] = (m, v, steps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainState:
    update: int = 0
    rng: np.random.Generator = None
    stage_loss_sums: np.ndarray = None
    stage_loss_counts: np.ndarray = None

    @classmethod
    def fresh(cls, n_stages: int, seed: int) -> "TrainState":
        return cls(
            update=0,
            rng=np.random.Generator(np.random.Philox(seed)),
            stage_loss_sums=np.zeros(n_stages),
            stage_loss_counts=np.zeros(n_stages, dtype=np.int64),
        )


def train_step(model: CascadeModel, optimizer: Adam, state: TrainState,
               cfg: TrainConfig, examples: Sequence[RankingExample],
               stage: int) -> float:
    """One sampled-stage update; returns the batch loss.

    Gradients are left in place after the optimizer step so callers can
    inspect them; they are cleared at the start of the next step.
    """
    if not examples:
        raise UsageError("train_step needs a non-empty batch")
    optimizer.zero_grad()
    batch = build_batch(examples, model.enc_cfg.max_seq_len)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    with Tape() as tape:
        enc_state = model.encode_batch(batch, model.stage_layer(stage),
                                       training=True, rng=state.rng)
        logits = model.stage_logits(enc_state, stage, training=True, rng=state.rng)
        loss = T.cross_entropy(logits, labels)
    tape.backward(loss)
    optimizer.step(lr_at(state.update, cfg))
    state.update += 1
    state.stage_loss_sums[stage - 1] += loss.item()
    state.stage_loss_counts[stage - 1] += 1
    return loss.item()


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    stage_metrics: list[M.MetricSummary]
    updates: int

    def log_line(self) -> str:
        cells = [str(self.epoch), f"{self.mean_loss:.6f}"]
        for s in self.stage_metrics:
            cells += [f"{s.map:.4f}", f"{s.mrr:.4f}", f"{s.p_at_1:.4f}",
                      f"{s.ndcg_at_10:.4f}"]
        return "\t".join(cells)


def log_header(n_stages: int) -> str:
    return "epoch\tloss\t" + "\t".join(
        f"s{i}_{m}" for i in range(1, n_stages + 1)
        for m in ("map", "mrr", "p1", "ndcg10")
    )


@dataclass
class TrainResult:
    history: list[EpochReport]
    best_epoch: int
    best_final_map: float
    best_params: dict[str, np.ndarray]
    wall_seconds: float
    final_update: int


def _batches(groups: Sequence[QuestionGroup], cfg: TrainConfig,
             rng: np.random.Generator) -> list[list[RankingExample]]:
    examples = [ex for g in groups for ex in g.examples]
    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    if cfg.batch_token_budget is None:
        size = cfg.batch_examples
        return [shuffled[i:i + size] for i in range(0, len(shuffled), size)]
    batches, current, used = [], [], 0
    for ex in shuffled:
        need = len(sequence_ids(ex))
        if current and used + need > cfg.batch_token_budget:
            batches.append(current)
            current, used = [], 0
        current.append(ex)
        used += need
    if current:
        batches.append(current)
    return batches


def evaluate_stages(model: CascadeModel, groups: Sequence[QuestionGroup]) -> list[M.MetricSummary]:
    """Per-stage ranking metrics with no pruning (alpha = 0)."""
    per_stage_labels: list[list[list[int]]] = [[] for _ in range(model.n_stages)]
    for group in groups:
        batch = build_batch(group.examples, model.enc_cfg.max_seq_len)
        labels = group.labels
        for stage_idx, scores in enumerate(model.forward_all_stages(batch)):
            order = np.argsort(-scores, kind="stable")
            per_stage_labels[stage_idx].append([int(labels[i]) for i in order])
    return [M.aggregate(ranked) for ranked in per_stage_labels]


def train(model: CascadeModel, train_groups: Sequence[QuestionGroup],
          dev_groups: Sequence[QuestionGroup], cfg: TrainConfig,
          log_handle=None,
          stop_fn: Callable[[EpochReport], bool] | None = None,
          initial_update: int = 0) -> TrainResult:
    """Run the multi-task loop; keep the weights that maximise final-stage
    dev MAP.  `stop_fn` may end training early once a report satisfies it;
    `initial_update` continues the schedule of a resumed run."""
    if not train_groups:
        raise DataError("training set is empty")
    if not any(g.labels.any() for g in train_groups):
        raise DataError("training set has no positive labels")
    if cfg.total_updates is None:
        probe_rng = np.random.Generator(np.random.Philox(cfg.seed))
        steps = len(_batches(train_groups, cfg, probe_rng))
        cfg = replace(cfg, total_updates=max(cfg.epochs * steps,
                                             cfg.warmup_updates + 1))
    if cfg.total_updates is not None and initial_update:
        cfg = replace(cfg, total_updates=cfg.total_updates + initial_update)
    optimizer = Adam(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state = TrainState.fresh(model.n_stages, cfg.seed)
    state.update = initial_update
    if log_handle is not None:
        log_handle.write(log_header(model.n_stages) + "\n")

    started = time.monotonic()
    history: list[EpochReport] = []
    best_epoch, best_map, best_params = 0, -1.0, snapshot_params(model)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch_examples in _batches(train_groups, cfg, state.rng):
            stage = sample_stage(state.rng, model.n_stages)
            losses.append(train_step(model, optimizer, state, cfg,
                                     batch_examples, stage))
        report = EpochReport(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            stage_metrics=evaluate_stages(model, dev_groups) if dev_groups else [],
            updates=state.update,
        )
        history.append(report)
        if log_handle is not None:
            log_handle.write(report.log_line() + "\n")
            log_handle.flush()
        if report.stage_metrics:
            final_map = report.stage_metrics[-1].map
            if final_map > best_map:
                best_epoch, best_map = epoch, final_map
                best_params = snapshot_params(model)
        if stop_fn is not None and stop_fn(report):
            break
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_final_map=best_map,
        best_params=best_params,
        wall_seconds=time.monotonic() - started,
        final_update=state.update,
    )


def snapshot_params(model: CascadeModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.params().items()}


def load_params(model: CascadeModel, values: dict[str, np.ndarray]) -> None:
    params = model.params()
    missing = set(params) ^ set(values)
    if missing:
        raise ConfigError(f"parameter names do not match the model: {sorted(missing)[:4]}")
    for name, p in params.items():
        if p.data.shape != values[name].shape:
            raise ConfigError(
                f"parameter {name} has shape {values[name].shape}, "
                f"expected {p.data.shape}"
            )
        p.data[...] = values[name].astype(p.data.dtype, copy=False)
