"""End-to-end command-line behaviour on a miniature experiment."""

import numpy as np
import pytest

from ctrank import data as D
from ctrank.checkpoint import load_checkpoint, save_checkpoint
from ctrank.cli import main
from conftest import tiny_model

SMALL = [
    "--set", "n_questions=8", "--set", "cands_per_question=6",
    "--set", "positives_per_question=2", "--set", "vocab_size=96",
    "--set", "train_frac=0.5", "--set", "dev_frac=0.25", "--set", "test_frac=0.25",
]
TINY_MODEL = [
    "--set", "d_model=16", "--set", "n_heads=2", "--set", "d_ff=32",
    "--set", "vocab_size=96", "--set", "max_seq_len=32",
]


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["gen-data", "--out-dir", str(out), "--seed", "5", *SMALL]) == 0
    return out


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "random.ckpt"
    save_checkpoint(path, tiny_model(seed=40), metadata={"seed": 40})
    return path


class TestGenData:
    def test_writes_three_splits_and_config(self, dataset_dir):
        for name in ("train.tsv", "dev.tsv", "test.tsv", "config.txt"):
            assert (dataset_dir / name).exists()
        groups = D.read_tsv(dataset_dir / "train.tsv")
        assert len(groups) == 4

    def test_same_seed_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["gen-data", "--out-dir", str(a), "--seed", "9", *SMALL])
        main(["gen-data", "--out-dir", str(b), "--seed", "9", *SMALL])
        for name in ("train.tsv", "dev.tsv", "test.tsv", "config.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_invalid_fractions_exit_2(self, tmp_path, capsys):
        code = main(["gen-data", "--out-dir", str(tmp_path / "x"),
                     "--set", "train_frac=0.5", "--set", "dev_frac=0.1",
                     "--set", "test_frac=0.1"])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, tmp_path):
        assert main(["gen-data", "--out-dir", str(tmp_path / "x"),
                     "--set", "bogus=1"]) == 2


class TestTrain:
    def test_toy_training_run(self, tmp_path, dataset_dir):
        out = tmp_path / "run"
        code = main([
            "train", "--data-dir", str(dataset_dir), "--out-dir", str(out),
            "--seed", "3", *TINY_MODEL,
            "--set", "epochs=2", "--set", "batch_examples=12",
        ])
        assert code == 0
        assert (out / "model.ckpt").exists()
        log = (out / "train_log.tsv").read_text().strip().split("\n")
        assert len(log) == 3  # header + one line per epoch
        assert len(log[1].split("\t")) == 2 + 5 * 4
        model, meta = load_checkpoint(out / "model.ckpt")
        assert meta["update_count"] > 0

    def test_resume_continues_update_counter(self, tmp_path, dataset_dir):
        first = tmp_path / "first"
        main(["train", "--data-dir", str(dataset_dir), "--out-dir", str(first),
              "--seed", "3", *TINY_MODEL, "--set", "epochs=1",
              "--set", "batch_examples=12"])
        _, meta1 = load_checkpoint(first / "model.ckpt")
        second = tmp_path / "second"
        code = main(["train", "--data-dir", str(dataset_dir),
                     "--out-dir", str(second), "--seed", "3", *TINY_MODEL,
                     "--set", "epochs=1", "--set", "batch_examples=12",
                     "--resume", str(first / "model.ckpt")])
        assert code == 0
        _, meta2 = load_checkpoint(second / "model.ckpt")
        assert meta2["update_count"] == 2 * meta1["update_count"]

    def test_missing_data_exit_2(self, tmp_path):
        code = main(["train", "--data-dir", str(tmp_path / "nope"),
                     "--out-dir", str(tmp_path / "out")])
        assert code == 2


class TestEvaluate:
    def test_cascade_alpha_zero_equals_monolithic_12(self, tmp_path, dataset_dir,
                                                     checkpoint, capsys):
        data = str(dataset_dir / "dev.tsv")
        assert main(["evaluate", "--checkpoint", str(checkpoint), "--data", data,
                     "--mode", "cascade", "--alpha", "0"]) == 0
        cascade_out = capsys.readouterr().out.strip().split("\n")[-1]
        assert main(["evaluate", "--checkpoint", str(checkpoint), "--data", data,
                     "--mode", "monolithic", "--layers", "12"]) == 0
        mono_out = capsys.readouterr().out.strip().split("\n")[-1]
        assert cascade_out.split("\t")[:4] == mono_out.split("\t")[:4]

    def test_cascade_cost_column(self, dataset_dir, checkpoint, capsys):
        assert main(["evaluate", "--checkpoint", str(checkpoint),
                     "--data", str(dataset_dir / "dev.tsv"),
                     "--mode", "cascade", "--alpha", "0.5", "--batch", "128"]) == 0
        out = capsys.readouterr().out.strip().split("\n")[-1]
        relative_cost = float(out.split("\t")[-1])
        assert round((relative_cost - 1) * 100) == -51

    def test_sr_requires_five_checkpoints(self, dataset_dir, checkpoint):
        code = main(["evaluate", "--checkpoint", str(checkpoint),
                     "--data", str(dataset_dir / "dev.tsv"), "--mode", "sr"])
        assert code == 2

    def test_alpha_out_of_range_exit_2(self, dataset_dir, checkpoint):
        code = main(["evaluate", "--checkpoint", str(checkpoint),
                     "--data", str(dataset_dir / "dev.tsv"),
                     "--mode", "cascade", "--alpha", "1.0"])
        assert code == 2

    def test_writes_outputs(self, tmp_path, dataset_dir, checkpoint):
        out = tmp_path / "eval"
        assert main(["evaluate", "--checkpoint", str(checkpoint),
                     "--data", str(dataset_dir / "dev.tsv"),
                     "--mode", "cascade", "--out-dir", str(out)]) == 0
        assert (out / "eval.tsv").exists() and (out / "config.txt").exists()


class TestInfer:
    def test_ranking_file_schema(self, tmp_path, dataset_dir, checkpoint):
        out = tmp_path / "infer"
        assert main(["infer", "--checkpoint", str(checkpoint),
                     "--data", str(dataset_dir / "dev.tsv"),
                     "--mode", "cascade", "--alpha", "0.3",
                     "--out-dir", str(out)]) == 0
        lines = (out / "ranking.tsv").read_text().strip().split("\n")
        assert lines[0] == "question_id\trank\tcandidate\tlabel"
        groups = D.read_tsv(dataset_dir / "dev.tsv")
        assert len(lines) == 1 + sum(len(g) for g in groups)
        first = lines[1].split("\t")
        assert first[1] == "1"


class TestCost:
    def test_reference_scenario(self, capsys):
        assert main(["cost", "--alpha", "0.3", "--batch", "128",
                     "--ceiling", "84", "--sizes", "90,63,44,28"]) == 0
        out = capsys.readouterr().out
        assert "average batch 81.0" in out
        assert "average batch 80.2" in out
        assert "max feasible batch" in out
        assert "gain 1.52x" in out

    def test_alpha_zero_cost_one(self, capsys):
        assert main(["cost", "--alpha", "0"]) == 0
        out = capsys.readouterr().out
        assert "relative cost 1.0000 (+0.0%)" in out

    def test_monolithic_six_layers(self, capsys):
        assert main(["cost", "--alpha", "0", "--layers", "6"]) == 0
        assert "(-50.0%)" in capsys.readouterr().out


class TestGridSearch:
    def test_grid_rows_sorted_by_cost(self, tmp_path, dataset_dir, checkpoint):
        out = tmp_path / "grid"
        assert main(["grid-search", "--checkpoint", str(checkpoint),
                     "--data", str(dataset_dir / "dev.tsv"),
                     "--grid", "0.2,0.5", "--out-dir", str(out)]) == 0
        lines = (out / "grid.tsv").read_text().strip().split("\n")
        assert lines[0].split("\t") == [
            "alpha1", "alpha2", "alpha3", "alpha4",
            "relative_cost", "map", "ndcg10", "p1", "mrr"]
        assert len(lines) == 1 + 2 ** 4
        costs = [float(line.split("\t")[4]) for line in lines[1:]]
        assert costs == sorted(costs)

    def test_uniform_rows_match_evaluate(self, tmp_path, dataset_dir, checkpoint,
                                         capsys):
        out = tmp_path / "grid"
        main(["grid-search", "--checkpoint", str(checkpoint),
              "--data", str(dataset_dir / "dev.tsv"), "--grid", "0.4",
              "--out-dir", str(out)])
        capsys.readouterr()
        row = (out / "grid.tsv").read_text().strip().split("\n")[1].split("\t")
        main(["evaluate", "--checkpoint", str(checkpoint),
              "--data", str(dataset_dir / "dev.tsv"), "--mode", "cascade",
              "--alpha", "0.4", "--batch", "128"])
        eval_row = capsys.readouterr().out.strip().split("\n")[-1].split("\t")
        # grid columns: map ndcg p1 mrr; evaluate columns: map mrr p1 ndcg cost
        assert row[5] == eval_row[0]          # map
        assert row[6] == eval_row[3]          # ndcg10
        assert row[7] == eval_row[2]          # p1
        assert row[8] == eval_row[1]          # mrr
        assert float(row[4]) == pytest.approx(float(eval_row[4]), abs=1e-4)
