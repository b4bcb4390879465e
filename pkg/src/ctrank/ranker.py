"""Inference engines and the per-batch cost model.

Three ways to rank one question's candidates:

* cascade_infer  — one shared encoder; each stage scores the survivors,
  drops a fixed fraction and hands the partial encodings onward;
* sequential_rerank — independent models of growing depth, each
  re-encoding the survivors from scratch;
* monolithic_rank — a single fixed-depth forward pass.

The analytical cost model prices each variant in example-layer passes
relative to a full-depth pass over the whole batch, which is also what an
instrumented pass counter measures.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metrics as M
from .cascade import CascadeModel, DEFAULT_LAYER_SCHEDULE
from .data import QuestionGroup, group_to_batch
from .errors import ConfigError, DataError, UsageError

# guards decimal drop ratios (0.3 * 10 etc.) against float representation
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class DropSchedule:
    """Per-stage drop ratios; the final stage ranks and never prunes."""

    ratios: tuple[float, ...]

    def __post_init__(self):
        if any(not 0.0 <= r < 1.0 for r in self.ratios):
            raise ConfigError(f"drop ratios must lie in [0, 1), got {self.ratios}")

    @classmethod
    def uniform(cls, alpha: float, n_stages: int = 5) -> "DropSchedule":
        return cls(ratios=(alpha,) * (n_stages - 1))

    @property
    def n_stages(self) -> int:
        return len(self.ratios) + 1


def dropped_count(k: int, alpha: float) -> int:
    """floor(alpha * k), with at least one candidate always surviving."""
    return min(math.floor(alpha * k + _FLOOR_EPS), k - 1)


def survivor_counts(b0: int, schedule: DropSchedule) -> list[int]:
    """[k_0, k_1, .., k_{N-1}] batch sizes entering each stage."""
    if b0 < 1:
        raise ConfigError(f"batch size must be positive, got {b0}")
    counts = [b0]
    for alpha in schedule.ratios:
        counts.append(counts[-1] - dropped_count(counts[-1], alpha))
    return counts


def top_k_split(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(survivors, dropped): score-descending order, ties to the lower index."""
    order = np.argsort(-scores, kind="stable")
    return order[:k], order[k:]


@dataclass(frozen=True)
class StageRecord:
    stage: int
    input_size: int
    dropped: int
    survivors: tuple[int, ...]  # original candidate indices, best first
    survivor_scores: tuple[float, ...]


@dataclass(frozen=True)
class StageTrace:
    stages: tuple[StageRecord, ...]

    def survivors_at(self, stage: int) -> tuple[int, ...]:
        return self.stages[stage - 1].survivors


@dataclass(frozen=True)
class CostReport:
    relative_cost: float
    average_batch_size: float
    layerwise_sizes: tuple[int, ...] | None
    throughput_gain: float | None = None


@dataclass(frozen=True)
class RankResult:
    ranking: tuple[int, ...]  # all candidates, best first
    trace: StageTrace
    layer_passes: int  # total example-layer passes actually executed


# ---------------------------------------------------------------------------
# Shared pruning walk
# ---------------------------------------------------------------------------


def _prune_walk(score_fn, b0: int, schedule: DropSchedule,
                on_narrow=None) -> tuple[tuple[int, ...], StageTrace]:
    """Drive the stage loop shared by every engine.

    score_fn(stage, active_original_indices) returns one score per active
    candidate; on_narrow(keep_local) lets an engine narrow its own state
    whenever candidates were dropped.  Returns (full ranking, trace).
    """
    n_stages = schedule.n_stages
    active = np.arange(b0)
    records = []
    dropped_stack: list[np.ndarray] = []
    for stage in range(1, n_stages + 1):
        scores = score_fn(stage, active)
        last = stage == n_stages
        n_drop = 0 if last else dropped_count(active.size, schedule.ratios[stage - 1])
        keep_local, drop_local = top_k_split(scores, active.size - n_drop)
        records.append(StageRecord(
            stage=stage,
            input_size=active.size,
            dropped=n_drop,
            survivors=tuple(int(i) for i in active[keep_local]),
            survivor_scores=tuple(float(s) for s in scores[keep_local]),
        ))
        if n_drop:
            dropped_stack.append(active[drop_local])
            active = active[keep_local]
            if on_narrow is not None:
                on_narrow(keep_local)
        elif last:
            active = active[keep_local]
    # dropped candidates rank after all survivors: the later a candidate was
    # dropped the higher it sits, ordered by its dropping stage's score
    ranking = list(active)
    for dropped in reversed(dropped_stack):
        ranking.extend(dropped)
    return tuple(int(i) for i in ranking), StageTrace(tuple(records))


# ---------------------------------------------------------------------------
# Engines
# ---------------------------------------------------------------------------


def cascade_infer(group: QuestionGroup, model: CascadeModel,
                  schedule: DropSchedule) -> RankResult:
    """Cascaded inference over one question group, reusing partial encodings."""
    if not group.examples:
        raise DataError(f"question group {group.question_id!r} is empty")
    if schedule.n_stages != model.n_stages:
        raise ConfigError(
            f"schedule with {schedule.n_stages} stages does not match a "
            f"{model.n_stages}-stage model"
        )
    counter = np.zeros(model.enc_cfg.n_layers + 1, dtype=np.int64)
    batch = group_to_batch(group, model.enc_cfg.max_seq_len)
    state_box = {"state": model.encode_batch(batch, model.stage_layer(1),
                                             pass_counter=counter)}
    prev_layer = {"layer": model.stage_layer(1)}

    def score_fn(stage: int, active: np.ndarray) -> np.ndarray:
        layer = model.stage_layer(stage)
        if layer > prev_layer["layer"]:
            model.encoder.encode_to_layer(state_box["state"], prev_layer["layer"],
                                          layer, pass_counter=counter)
            prev_layer["layer"] = layer
        return model.stage_scores(state_box["state"], stage)

    def on_narrow(keep_local: np.ndarray) -> None:
        state_box["state"] = state_box["state"].select(keep_local)

    ranking, trace = _prune_walk(score_fn, len(group), schedule, on_narrow)
    return RankResult(ranking=ranking, trace=trace,
                      layer_passes=int(counter.sum()))


def sequential_rerank(group: QuestionGroup, models: Sequence[CascadeModel],
                      schedule: DropSchedule,
                      layer_schedule: Sequence[int] = DEFAULT_LAYER_SCHEDULE) -> RankResult:
    """Same pruning arithmetic, but every stage re-encodes from scratch with
    its own independently trained model."""
    if not group.examples:
        raise DataError(f"question group {group.question_id!r} is empty")
    if len(models) != schedule.n_stages or len(layer_schedule) != schedule.n_stages:
        raise ConfigError(
            f"sequential reranking needs one model per stage: "
            f"{len(models)} models for {schedule.n_stages} stages"
        )
    for depth, model in zip(layer_schedule, models):
        if model.enc_cfg.n_layers != depth:
            raise ConfigError(
                f"stage model of depth {model.enc_cfg.n_layers} does not match "
                f"the scheduled depth {depth}"
            )
    total_passes = [0]

    def score_fn(stage: int, active: np.ndarray) -> np.ndarray:
        model = models[stage - 1]
        counter = np.zeros(model.enc_cfg.n_layers + 1, dtype=np.int64)
        sub = QuestionGroup(group.question_id,
                            [group.examples[i] for i in active])
        batch = group_to_batch(sub, model.enc_cfg.max_seq_len)
        state = model.encode_batch(batch, model.enc_cfg.n_layers,
                                   pass_counter=counter)
        total_passes[0] += int(counter.sum())
        return model.stage_scores(state, 1)

    ranking, trace = _prune_walk(score_fn, len(group), schedule)
    return RankResult(ranking=ranking, trace=trace, layer_passes=total_passes[0])


def monolithic_rank(group: QuestionGroup, model: CascadeModel,
                    n_layers: int) -> tuple[tuple[int, ...], np.ndarray]:
    """Rank every candidate with the depth-`n_layers` classifier.

    Returns (ranking, scores); ties go to the lower candidate index.
    """
    if n_layers not in model.cas_cfg.layer_schedule:
        raise ConfigError(
            f"model has no classifier at depth {n_layers} "
            f"(schedule {model.cas_cfg.layer_schedule})"
        )
    stage = model.cas_cfg.layer_schedule.index(n_layers) + 1
    batch = group_to_batch(group, model.enc_cfg.max_seq_len)
    state = model.encode_batch(batch, n_layers)
    scores = model.stage_scores(state, stage)
    order, _ = top_k_split(scores, scores.size)
    return tuple(int(i) for i in order), scores


# ---------------------------------------------------------------------------
# Score-matrix simulation (used by the grid search; cross-checked against
# cascade_infer, whose surviving computations it provably matches)
# ---------------------------------------------------------------------------


def simulate_cascade(score_matrix: np.ndarray, schedule: DropSchedule) -> tuple[int, ...]:
    """Cascade ranking computed from precomputed per-stage scores [N, b]."""
    if score_matrix.ndim != 2 or score_matrix.shape[0] != schedule.n_stages:
        raise ConfigError(
            f"score matrix {score_matrix.shape} does not match "
            f"{schedule.n_stages} stages"
        )

    def score_fn(stage: int, active: np.ndarray) -> np.ndarray:
        return score_matrix[stage - 1, active]

    ranking, _ = _prune_walk(score_fn, score_matrix.shape[1], schedule)
    return ranking


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


def layerwise_batch_sizes(b0: int, schedule: DropSchedule,
                          layer_schedule: Sequence[int] = DEFAULT_LAYER_SCHEDULE) -> list[int]:
    """Examples processed by each encoder layer 1..L under the cascade."""
    counts = survivor_counts(b0, schedule)
    return _sizes_from_counts(counts, layer_schedule)


def _sizes_from_counts(counts: Sequence[int],
                       layer_schedule: Sequence[int]) -> list[int]:
    sizes = []
    boundary = 0
    for stage_layer, count in zip(layer_schedule, counts):
        sizes.extend([int(count)] * (stage_layer - boundary))
        boundary = stage_layer
    return sizes


def relative_cost_monolithic(n_layers: int, full_depth: int = 12) -> float:
    """Cost of a depth-L monolithic pass relative to the full-depth pass."""
    if not 1 <= n_layers <= full_depth:
        raise ConfigError(f"depth {n_layers} outside 1..{full_depth}")
    return n_layers / full_depth


def relative_cost_cascade(b0: int, schedule: DropSchedule,
                          layer_schedule: Sequence[int] = DEFAULT_LAYER_SCHEDULE) -> CostReport:
    sizes = layerwise_batch_sizes(b0, schedule, layer_schedule)
    return _report_from_sizes(b0, sizes)


def cascade_cost_from_counts(b0: int, stage_counts: Sequence[int],
                             layer_schedule: Sequence[int] = DEFAULT_LAYER_SCHEDULE) -> CostReport:
    """Cost report for explicitly given per-stage batch sizes (fixtures)."""
    if len(stage_counts) != len(layer_schedule):
        raise ConfigError(
            f"{len(stage_counts)} stage sizes for {len(layer_schedule)} stages"
        )
    if stage_counts[0] != b0:
        raise ConfigError(f"first stage size {stage_counts[0]} must equal b0 {b0}")
    sizes = _sizes_from_counts(stage_counts, layer_schedule)
    return _report_from_sizes(b0, sizes)


def _report_from_sizes(b0: int, sizes: list[int]) -> CostReport:
    full = len(sizes) * b0
    return CostReport(
        relative_cost=sum(sizes) / full,
        average_batch_size=sum(sizes) / len(sizes),
        layerwise_sizes=tuple(sizes),
    )


def relative_cost_sequential(b0: int, schedule: DropSchedule,
                             layer_schedule: Sequence[int] = DEFAULT_LAYER_SCHEDULE) -> CostReport:
    """Each stage re-encodes its survivors through its whole model."""
    counts = survivor_counts(b0, schedule)
    full_depth = layer_schedule[-1]
    passes = sum(depth * count for depth, count in zip(layer_schedule, counts))
    return CostReport(
        relative_cost=passes / (full_depth * b0),
        average_batch_size=passes / full_depth,
        layerwise_sizes=None,
    )


def max_feasible_batch(ceiling: int, schedule: DropSchedule,
                       layer_schedule: Sequence[int] = DEFAULT_LAYER_SCHEDULE) -> tuple[int, float]:
    """Largest initial batch whose average per-layer size fits the ceiling,
    and the resulting throughput gain over a constant-batch model."""
    if ceiling < 1:
        raise ConfigError(f"memory ceiling must be positive, got {ceiling}")
    best = ceiling  # alpha >= 0 never makes the average exceed b0
    b0 = ceiling
    while True:
        b0 += 1
        report = relative_cost_cascade(b0, schedule, layer_schedule)
        if report.average_batch_size > ceiling:
            break
        best = b0
    return best, best / ceiling


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridRecord:
    ratios: tuple[float, ...]
    cost: CostReport
    metrics: M.MetricSummary


def grid_search(model: CascadeModel, dev_groups: Sequence[QuestionGroup],
                ratio_values: Sequence[float], cost_batch: int = 128) -> list[GridRecord]:
    """Evaluate every drop-ratio combination on the dev set.

    All-stage scores are computed once per group; each configuration is then
    a pruning replay over the score matrix, which matches running the full
    cascade because pruning never alters a surviving candidate's score.
    """
    if not ratio_values:
        raise UsageError("grid search needs at least one ratio value")
    if not dev_groups:
        raise DataError("grid search needs a non-empty dev set")
    score_matrices = []
    label_arrays = []
    for group in dev_groups:
        batch = group_to_batch(group, model.enc_cfg.max_seq_len)
        score_matrices.append(np.stack(model.forward_all_stages(batch)))
        label_arrays.append(group.labels)

    records = []
    n_prune = model.n_stages - 1
    for combo in itertools.product(sorted(ratio_values), repeat=n_prune):
        schedule = DropSchedule(ratios=combo)
        ranked_labels = []
        for scores, labels in zip(score_matrices, label_arrays):
            ranking = simulate_cascade(scores, schedule)
            ranked_labels.append([int(labels[i]) for i in ranking])
        records.append(GridRecord(
            ratios=combo,
            cost=relative_cost_cascade(cost_batch, schedule,
                                       model.cas_cfg.layer_schedule),
            metrics=M.aggregate(ranked_labels),
        ))
    return records
