"""Command-line entry point: gen-data, train, evaluate, infer, cost, grid-search.

Settings come from a flat `key = value` config file overridden by command
line flags; whatever a command resolves is written to its output directory
as config.txt so every run is reproducible from its artifacts.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import ranker as R
from . import trainer as TR
from .cascade import CascadeConfig, CascadeModel
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderConfig
from .errors import ConfigError, CtrankError, DataError, UsageError

DEFAULTS: dict[str, str] = {
    "seed": "0",
    # encoder
    "n_layers": "12", "d_model": "64", "n_heads": "4", "d_ff": "256",
    "max_seq_len": "64", "vocab_size": "1024", "dropout_rate": "0.1",
    # cascade
    "n_stages": "5", "layer_schedule": "4,6,8,10,12", "head_hidden": "",
    "head_depth": "3", "final_head_pooling": "mean",
    # training
    "peak_lr": "3e-4", "warmup_updates": "200", "total_updates": "",
    "epochs": "20", "batch_examples": "64", "batch_token_budget": "",
    "adam_beta1": "0.9", "adam_beta2": "0.999", "adam_eps": "1e-8",
    # synthetic data
    "n_questions": "200", "cands_per_question": "32",
    "positives_per_question": "4", "noise": "0.1", "question_len": "4",
    "candidate_len": "8", "min_topic_overlap": "2",
    "train_frac": "0.8", "dev_frac": "0.1", "test_frac": "0.1",
}


class RunConfig:
    """Flat settings resolved from defaults, a config file and CLI flags."""

    def __init__(self, values: dict[str, str]):
        self.values = values

    @classmethod
    def resolve(cls, args: argparse.Namespace) -> "RunConfig":
        values = dict(DEFAULTS)
        if getattr(args, "config", None):
            values.update(_read_config_file(args.config))
        for item in getattr(args, "set", None) or []:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value.strip()
        if getattr(args, "seed", None) is not None:
            values["seed"] = str(args.seed)
        return cls(values)

    # typed readers ---------------------------------------------------------

    def _get(self, key: str) -> str:
        return self.values[key]

    def int_(self, key: str) -> int:
        try:
            return int(self._get(key))
        except ValueError:
            raise ConfigError(f"config key {key} must be an integer, "
                              f"got {self._get(key)!r}") from None

    def float_(self, key: str) -> float:
        try:
            return float(self._get(key))
        except ValueError:
            raise ConfigError(f"config key {key} must be a number, "
                              f"got {self._get(key)!r}") from None

    def opt_int(self, key: str) -> int | None:
        return None if self._get(key) == "" else self.int_(key)

    def int_tuple(self, key: str) -> tuple[int, ...]:
        try:
            return tuple(int(v) for v in self._get(key).split(","))
        except ValueError:
            raise ConfigError(f"config key {key} must be comma-separated "
                              f"integers, got {self._get(key)!r}") from None

    # assembled configs -----------------------------------------------------

    @property
    def seed(self) -> int:
        return self.int_("seed")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            n_layers=self.int_("n_layers"), d_model=self.int_("d_model"),
            n_heads=self.int_("n_heads"), d_ff=self.int_("d_ff"),
            max_seq_len=self.int_("max_seq_len"),
            vocab_size=self.int_("vocab_size"),
            dropout_rate=self.float_("dropout_rate"),
        )

    def cascade_config(self) -> CascadeConfig:
        return CascadeConfig(
            n_stages=self.int_("n_stages"),
            layer_schedule=self.int_tuple("layer_schedule"),
            head_hidden=self.opt_int("head_hidden"),
            head_depth=self.int_("head_depth"),
            final_head_pooling=self._get("final_head_pooling"),
        )

    def train_config(self) -> TR.TrainConfig:
        return TR.TrainConfig(
            peak_lr=self.float_("peak_lr"),
            warmup_updates=self.int_("warmup_updates"),
            total_updates=self.opt_int("total_updates"),
            epochs=self.int_("epochs"),
            batch_examples=self.int_("batch_examples"),
            batch_token_budget=self.opt_int("batch_token_budget"),
            adam_beta1=self.float_("adam_beta1"),
            adam_beta2=self.float_("adam_beta2"),
            adam_eps=self.float_("adam_eps"),
            seed=self.seed,
        )

    def write(self, out_dir: Path) -> None:
        lines = [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        (out_dir / "config.txt").write_text("\n".join(lines) + "\n",
                                            encoding="utf-8")


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def _out_dir(args: argparse.Namespace) -> Path:
    if not getattr(args, "out_dir", None):
        raise UsageError("this command requires --out-dir")
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _alpha_schedule(args: argparse.Namespace, n_stages: int) -> R.DropSchedule:
    alphas = getattr(args, "alpha", None)
    if not alphas:
        return R.DropSchedule.uniform(0.0, n_stages)
    if len(alphas) == 1:
        return R.DropSchedule.uniform(alphas[0], n_stages)
    if len(alphas) != n_stages - 1:
        raise UsageError(
            f"--alpha takes 1 or {n_stages - 1} values, got {len(alphas)}"
        )
    return R.DropSchedule(ratios=tuple(alphas))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = RunConfig.resolve(args)
    out = _out_dir(args)
    groups = D.generate_synthetic(
        n_questions=cfg.int_("n_questions"),
        cands_per_question=cfg.int_("cands_per_question"),
        positives_per_question=cfg.int_("positives_per_question"),
        vocab_size=cfg.int_("vocab_size"),
        noise=cfg.float_("noise"),
        seed=cfg.seed,
        question_len=cfg.int_("question_len"),
        candidate_len=cfg.int_("candidate_len"),
        min_topic_overlap=cfg.int_("min_topic_overlap"),
    )
    fractions = (cfg.float_("train_frac"), cfg.float_("dev_frac"),
                 cfg.float_("test_frac"))
    splits = D.split(groups, fractions, seed=cfg.seed)
    for name, part in zip(("train", "dev", "test"), splits):
        D.write_tsv(out / f"{name}.tsv", part)
        stats = D.dataset_stats(part)
        print(f"{name}: {stats.questions} questions, "
              f"{stats.mean_candidates:.1f} candidates/question, "
              f"{stats.mean_positives:.2f} positives/question")
    cfg.write(out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig.resolve(args)
    out = _out_dir(args)
    data_dir = Path(args.data_dir)
    train_groups = D.read_tsv(data_dir / "train.tsv")
    dev_groups = D.read_tsv(data_dir / "dev.tsv")
    initial_update = 0
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        initial_update = int(meta.get("update_count", 0))
    else:
        model = CascadeModel(cfg.encoder_config(), cfg.cascade_config(),
                             seed=cfg.seed)
    train_cfg = cfg.train_config()
    with open(out / "train_log.tsv", "w", encoding="utf-8") as log:
        result = TR.train(model, train_groups, dev_groups, train_cfg,
                          log_handle=log, initial_update=initial_update)
    TR.load_params(model, result.best_params)
    save_checkpoint(out / "model.ckpt", model, metadata={
        "seed": cfg.seed,
        "update_count": result.final_update,
        "best_epoch": result.best_epoch,
        "best_final_map": result.best_final_map,
    })
    print(f"trained {len(result.history)} epochs in {result.wall_seconds:.1f}s; "
          f"best final-stage dev MAP {result.best_final_map:.4f} "
          f"at epoch {result.best_epoch}")
    cfg.write(out)
    return 0


def _metric_line(summary: M.MetricSummary, relative_cost: float) -> str:
    return ("map\tmrr\tp1\tndcg10\trelative_cost\n"
            f"{summary.map:.4f}\t{summary.mrr:.4f}\t{summary.p_at_1:.4f}\t"
            f"{summary.ndcg_at_10:.4f}\t{relative_cost:.4f}")


def _evaluate(args: argparse.Namespace):
    """Shared by cmd_evaluate and cmd_infer.

    Returns (metrics, relative cost, [(group, ranking, trace), ...]).
    """
    checkpoints = args.checkpoint or []
    groups = D.read_tsv(args.data)
    batch_size = args.batch or 128

    if args.mode == "monolithic":
        if not checkpoints:
            raise UsageError("--checkpoint is required")
        if args.layers is None:
            raise UsageError("mode=monolithic requires --layers")
        model, _ = load_checkpoint(checkpoints[0])
        ranked = []
        rankings = []
        for group in groups:
            order, _scores = R.monolithic_rank(group, model, args.layers)
            rankings.append((group, order, None))
            ranked.append([int(group.labels[i]) for i in order])
        cost = R.relative_cost_monolithic(args.layers, model.enc_cfg.n_layers)
        return M.aggregate(ranked), cost, rankings

    if args.mode == "cascade":
        if not checkpoints:
            raise UsageError("--checkpoint is required")
        model, _ = load_checkpoint(checkpoints[0])
        schedule = _alpha_schedule(args, model.n_stages)
        ranked = []
        rankings = []
        for group in groups:
            result = R.cascade_infer(group, model, schedule)
            rankings.append((group, result.ranking, result.trace))
            ranked.append([int(group.labels[i]) for i in result.ranking])
        cost = R.relative_cost_cascade(batch_size, schedule,
                                       model.cas_cfg.layer_schedule)
        return M.aggregate(ranked), cost.relative_cost, rankings

    if args.mode == "sr":
        cfg = RunConfig.resolve(args)
        n_stages = cfg.cascade_config().n_stages
        if len(checkpoints) != n_stages:
            raise UsageError(
                f"mode=sr requires {n_stages} --checkpoint arguments "
                f"(one per stage), got {len(checkpoints)}"
            )
        models = []
        for path in checkpoints:
            model, _ = load_checkpoint(path)
            models.append(model)
        layer_schedule = tuple(m.enc_cfg.n_layers for m in models)
        if any(b <= a for a, b in zip(layer_schedule, layer_schedule[1:])):
            raise ConfigError(
                f"sr checkpoints must come in strictly increasing depth, "
                f"got {layer_schedule}"
            )
        schedule = _alpha_schedule(args, len(models))
        ranked = []
        rankings = []
        for group in groups:
            result = R.sequential_rerank(group, models, schedule, layer_schedule)
            rankings.append((group, result.ranking, result.trace))
            ranked.append([int(group.labels[i]) for i in result.ranking])
        cost = R.relative_cost_sequential(batch_size, schedule, layer_schedule)
        return M.aggregate(ranked), cost.relative_cost, rankings

    raise UsageError(f"unknown mode {args.mode!r}")


def cmd_evaluate(args: argparse.Namespace) -> int:
    summary, cost, _ = _evaluate(args)
    line = _metric_line(summary, cost)
    print(line)
    if args.out_dir:
        out = _out_dir(args)
        (out / "eval.tsv").write_text(line + "\n", encoding="utf-8")
        RunConfig.resolve(args).write(out)
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    _, _, rankings = _evaluate(args)
    lines = ["question_id\trank\tcandidate\tlabel"]
    for group, order, _trace in rankings:
        for rank, cand in enumerate(order, start=1):
            lines.append(f"{group.question_id}\t{rank}\t{cand}\t"
                         f"{group.examples[cand].label}")
    text = "\n".join(lines)
    print(text)
    if args.out_dir:
        out = _out_dir(args)
        (out / "ranking.tsv").write_text(text + "\n", encoding="utf-8")
        RunConfig.resolve(args).write(out)
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    cfg = RunConfig.resolve(args)
    layer_schedule = cfg.cascade_config().layer_schedule
    n_stages = len(layer_schedule)
    batch = args.batch or 128
    lines = []

    if args.layers is not None:
        rel = R.relative_cost_monolithic(args.layers, layer_schedule[-1])
        lines.append(f"monolithic depth {args.layers}: relative cost "
                     f"{rel:.4f} ({_pct(rel)})")

    schedule = _alpha_schedule(args, n_stages)
    report = R.relative_cost_cascade(batch, schedule, layer_schedule)
    lines.append(f"cascade alphas {schedule.ratios} batch {batch}:")
    lines.append(f"  layerwise sizes: {','.join(map(str, report.layerwise_sizes))}")
    lines.append(f"  relative cost {report.relative_cost:.4f} "
                 f"({_pct(report.relative_cost)}), average batch "
                 f"{report.average_batch_size:.1f}")
    sr = R.relative_cost_sequential(batch, schedule, layer_schedule)
    lines.append(f"  sequential-reranker cost {sr.relative_cost:.4f} "
                 f"({_pct(sr.relative_cost)})")
    if args.ceiling:
        best, gain = R.max_feasible_batch(args.ceiling, schedule, layer_schedule)
        lines.append(f"  ceiling {args.ceiling}: max feasible batch {best}, "
                     f"throughput gain {gain:.2f}x")
    if args.sizes:
        counts = [batch] + [int(v) for v in args.sizes.split(",")]
        fixture = R.cascade_cost_from_counts(batch, counts, layer_schedule)
        lines.append(f"given sizes {args.sizes} batch {batch}:")
        lines.append(f"  relative cost {fixture.relative_cost:.4f} "
                     f"({_pct(fixture.relative_cost)}), average batch "
                     f"{fixture.average_batch_size:.1f}")
        if args.ceiling:
            feasible = fixture.average_batch_size <= args.ceiling
            lines.append(f"  ceiling {args.ceiling}: batch {batch} is "
                         f"{'feasible' if feasible else 'infeasible'}, "
                         f"gain {batch / args.ceiling:.2f}x")
    print("\n".join(lines))
    return 0


def _pct(relative_cost: float) -> str:
    delta = (relative_cost - 1.0) * 100.0
    return f"{delta:+.1f}%"


def cmd_grid_search(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model, _ = load_checkpoint(args.checkpoint[0])
    groups = D.read_tsv(args.data)
    values = [float(v) for v in args.grid.split(",")]
    records = R.grid_search(model, groups, values, cost_batch=args.batch or 128)
    records.sort(key=lambda r: (r.cost.relative_cost, r.ratios))
    n_prune = model.n_stages - 1
    header = "\t".join(f"alpha{i}" for i in range(1, n_prune + 1))
    lines = [f"{header}\trelative_cost\tmap\tndcg10\tp1\tmrr"]
    for rec in records:
        ratios = "\t".join(f"{a:g}" for a in rec.ratios)
        m = rec.metrics
        lines.append(f"{ratios}\t{rec.cost.relative_cost:.6f}\t{m.map:.4f}\t"
                     f"{m.ndcg_at_10:.4f}\t{m.p_at_1:.4f}\t{m.mrr:.4f}")
    (out / "grid.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    RunConfig.resolve(args).write(out)
    print(f"wrote {len(records)} configurations to {out / 'grid.tsv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctrank",
        description="Cascade transformer ranking experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out-dir", help="directory for outputs")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a cascade model")
    common(p)
    p.add_argument("--data-dir", required=True,
                   help="directory with train.tsv and dev.tsv")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    def eval_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--checkpoint", action="append",
                       help="model checkpoint (repeat for sr stages)")
        p.add_argument("--data", required=True, help="dataset TSV")
        p.add_argument("--mode", default="cascade",
                       choices=("cascade", "sr", "monolithic"))
        p.add_argument("--alpha", action="append", type=float,
                       help="drop ratio (repeat for per-stage schedules)")
        p.add_argument("--layers", type=int, help="depth for mode=monolithic")
        p.add_argument("--batch", type=int, help="batch size for cost accounting")

    p = sub.add_parser("evaluate", help="metrics plus relative cost")
    common(p)
    eval_flags(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("infer", help="write full rankings")
    common(p)
    eval_flags(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("cost", help="analytical cost model (no model needed)")
    common(p)
    p.add_argument("--alpha", action="append", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--ceiling", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--sizes", help="comma-separated post-drop stage sizes")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("grid-search", help="sweep drop-ratio configurations")
    common(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default="0.1,0.2,0.3,0.4,0.5,0.6",
                   help="comma-separated ratio values")
    p.add_argument("--batch", type=int)
    p.set_defaults(fn=cmd_grid_search)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CtrankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
