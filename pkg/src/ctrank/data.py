"""Question-grouped candidate datasets: TSV ingestion, synthetic corpora, splits.

Rows arrive pre-tokenised as integer ids.  TSV schema (UTF-8, LF):

    question_id <TAB> label <TAB> question token ids <TAB> candidate token ids

with token ids space-separated and >= 3; ids 0/1/2 are reserved for the
padding, classification and separator tokens.  Files ending in .gz are
transparently gzip-compressed.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .encoder import TokenBatch
from .errors import ConfigError, DataError, UsageError

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
FIRST_CONTENT_ID = 3

# smallest noise pool the synthetic generator will accept
_MIN_NOISE_POOL = 16


@dataclass(frozen=True)
class RankingExample:
    question_id: str
    question: tuple[int, ...]
    candidate: tuple[int, ...]
    label: int


@dataclass
class QuestionGroup:
    question_id: str
    examples: list[RankingExample]

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)


@dataclass(frozen=True)
class DatasetStats:
    questions: int
    mean_candidates: float
    mean_positives: float


def dataset_stats(groups: Sequence[QuestionGroup]) -> DatasetStats:
    if not groups:
        raise DataError("cannot summarise an empty dataset")
    sizes = [len(g) for g in groups]
    positives = [int(g.labels.sum()) for g in groups]
    return DatasetStats(
        questions=len(groups),
        mean_candidates=float(np.mean(sizes)),
        mean_positives=float(np.mean(positives)),
    )


# ---------------------------------------------------------------------------
# TSV I/O
# ---------------------------------------------------------------------------


def _open(path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8", newline="\n")
    return open(path, mode, encoding="utf-8", newline="\n")


def _parse_ids(field: str, line_no: int, what: str) -> tuple[int, ...]:
    try:
        ids = tuple(int(tok) for tok in field.split())
    except ValueError:
        raise DataError(f"line {line_no}: {what} token ids must be integers") from None
    if not ids:
        raise DataError(f"line {line_no}: empty {what}")
    if min(ids) < FIRST_CONTENT_ID:
        raise DataError(
            f"line {line_no}: {what} uses a reserved token id (< {FIRST_CONTENT_ID})"
        )
    return ids


def read_tsv(path) -> list[QuestionGroup]:
    """Group rows by question_id, preserving first-appearance order."""
    groups: dict[str, QuestionGroup] = {}
    try:
        fh = _open(path, "r")
    except OSError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise DataError(
                    f"line {line_no}: expected 4 tab-separated fields, got {len(fields)}"
                )
            qid, label_field, question_field, candidate_field = fields
            if label_field not in ("0", "1"):
                raise DataError(f"line {line_no}: label must be 0 or 1, got {label_field!r}")
            example = RankingExample(
                question_id=qid,
                question=_parse_ids(question_field, line_no, "question"),
                candidate=_parse_ids(candidate_field, line_no, "candidate"),
                label=int(label_field),
            )
            if qid not in groups:
                groups[qid] = QuestionGroup(qid, [])
            groups[qid].examples.append(example)
    if not groups:
        raise DataError(f"no rows in {path}")
    return list(groups.values())


def write_tsv(path, groups: Iterable[QuestionGroup]) -> None:
    with _open(path, "w") as fh:
        for group in groups:
            for ex in group.examples:
                fh.write(
                    f"{ex.question_id}\t{ex.label}\t"
                    f"{' '.join(map(str, ex.question))}\t"
                    f"{' '.join(map(str, ex.candidate))}\n"
                )


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def generate_synthetic(
    n_questions: int = 200,
    cands_per_question: int = 32,
    positives_per_question: int = 4,
    vocab_size: int = 1024,
    noise: float = 0.1,
    seed: int = 0,
    question_len: int = 4,
    candidate_len: int = 8,
    min_topic_overlap: int = 2,
) -> list[QuestionGroup]:
    """A learnable ranking corpus built from disjoint per-question topics.

    Each question owns `question_len` topic tokens nobody else uses.
    Positive candidates keep at least `min_topic_overlap` of them (noise
    replaces the rest at rate `noise`); negatives contain at most
    `min_topic_overlap - 1`.  Remaining candidate positions are filled from
    a shared noise pool, so a candidate's label is decidable by counting
    topic tokens it shares with its question.
    """
    if positives_per_question > cands_per_question:
        raise ConfigError("positives_per_question exceeds cands_per_question")
    if positives_per_question < 1 or cands_per_question < 2:
        raise ConfigError("need at least one positive and two candidates per question")
    if not 0.0 <= noise < 1.0:
        raise ConfigError(f"noise must lie in [0, 1), got {noise}")
    if not 1 <= min_topic_overlap <= question_len:
        raise ConfigError("min_topic_overlap must lie in [1, question_len]")
    if candidate_len < question_len:
        raise ConfigError("candidate_len must be at least question_len")
    topic_tokens = n_questions * question_len
    noise_pool = vocab_size - FIRST_CONTENT_ID - topic_tokens
    if noise_pool < _MIN_NOISE_POOL:
        raise ConfigError(
            f"vocab of {vocab_size} too small for {n_questions} disjoint topics "
            f"of {question_len} tokens (needs >= "
            f"{FIRST_CONTENT_ID + topic_tokens + _MIN_NOISE_POOL})"
        )
    noise_lo = FIRST_CONTENT_ID + topic_tokens
    rng = np.random.Generator(np.random.Philox(seed))

    groups = []
    for q in range(n_questions):
        topic = np.arange(FIRST_CONTENT_ID + q * question_len,
                          FIRST_CONTENT_ID + (q + 1) * question_len)
        question = tuple(int(t) for t in rng.permutation(topic))
        labels = np.zeros(cands_per_question, dtype=np.int64)
        labels[rng.choice(cands_per_question, positives_per_question, replace=False)] = 1
        examples = []
        for label in labels:
            if label:
                flips = np.flatnonzero(rng.random(question_len) < noise)
                # never flip below the overlap floor that defines a positive
                flips = flips[: question_len - min_topic_overlap]
                kept = np.delete(topic, flips)
            else:
                n_shared = int(rng.integers(0, min_topic_overlap))
                kept = rng.choice(topic, n_shared, replace=False)
            filler = rng.integers(noise_lo, vocab_size, candidate_len - kept.size)
            tokens = rng.permutation(np.concatenate([kept, filler]))
            examples.append(RankingExample(
                question_id=f"q{q:05d}",
                question=question,
                candidate=tuple(int(t) for t in tokens),
                label=int(label),
            ))
        groups.append(QuestionGroup(f"q{q:05d}", examples))
    return groups


def topic_overlap_scores(group: QuestionGroup) -> np.ndarray:
    """Bag-of-words overlap between each candidate and its question."""
    question = set(group.examples[0].question)
    return np.array(
        [len(question.intersection(ex.candidate)) for ex in group.examples],
        dtype=np.float64,
    )


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split(
    groups: Sequence[QuestionGroup],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[QuestionGroup], list[QuestionGroup], list[QuestionGroup]]:
    """Partition by question into train/dev/test; ids never straddle splits."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be non-negative, got {fractions}")
    n = len(groups)
    counts = [int(np.floor(f * n)) for f in fractions]
    remainders = [f * n - c for f, c in zip(fractions, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    for f, c in zip(fractions, counts):
        if f > 0 and c == 0:
            raise ConfigError(
                f"split fraction {f} receives zero questions out of {n}"
            )
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    out, start = [], 0
    for c in counts:
        out.append([groups[i] for i in order[start:start + c]])
        start += c
    return out[0], out[1], out[2]


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------


def sequence_ids(example: RankingExample) -> list[int]:
    """[CLS] question [SEP] candidate, the model's input convention."""
    return [CLS_ID, *example.question, SEP_ID, *example.candidate]


def build_batch(examples: Sequence[RankingExample], max_seq_len: int) -> TokenBatch:
    """Pad a set of examples into one TokenBatch."""
    if not examples:
        raise DataError("cannot build a batch from zero examples")
    seqs = [sequence_ids(ex) for ex in examples]
    longest = max(len(s) for s in seqs)
    if longest > max_seq_len:
        raise DataError(
            f"sequence of length {longest} exceeds max_seq_len {max_seq_len}"
        )
    ids = np.full((len(seqs), longest), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), longest), dtype=np.float32)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = 1.0
    return TokenBatch(ids=ids, pad_mask=mask)


def group_to_batch(group: QuestionGroup, max_seq_len: int) -> TokenBatch:
    if not group.examples:
        raise DataError(f"question group {group.question_id!r} is empty")
    return build_batch(group.examples, max_seq_len)
