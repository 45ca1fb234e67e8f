import csv
import json

import pytest

from freerea.cli import main

SKELETON_TOML = """\
input_shape = [2, 8, 8]
stages = [[1, 4], [1, 8]]
num_classes = 3
"""

SMALL_RUN_TOML = """\
population_size = 6
tournament_size = 2
"""

ALL_ZERO = "nats:(zero|zero|zero|zero|zero|zero)"
MIXED = "nats:(conv3x3|skip|avgpool3x3|conv1x1|zero|conv3x3)"


@pytest.fixture
def tiny_files(tmp_path):
    sk = tmp_path / "skeleton.toml"
    sk.write_text(SKELETON_TOML)
    cfg = tmp_path / "config.toml"
    cfg.write_text(SMALL_RUN_TOML)
    return {"skeleton": str(sk), "config": str(cfg), "dir": tmp_path}


def read_json(path):
    return json.loads(path.read_text())


class TestScoreAndCost:
    def test_score_all_zero_genotype(self, capsys, tiny_files):
        rc = main(["score", ALL_ZERO, "--seed", "7", "--repeats", "1",
                   "--skeleton", tiny_files["skeleton"], "--lr-batch", "8"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["metrics"]["skip_score"] == 0.0
        assert doc["metrics"]["linear_regions"]["mean"] == -float("inf")

    def test_score_deterministic(self, capsys, tiny_files):
        argv = ["score", MIXED, "--seed", "11", "--repeats", "2",
                "--skeleton", tiny_files["skeleton"], "--lr-batch", "8"]
        main(argv)
        first = capsys.readouterr().out
        main(argv)
        second = capsys.readouterr().out
        assert first == second

    def test_score_and_cost_agree(self, capsys, tiny_files):
        main(["score", MIXED, "--seed", "3", "--repeats", "1",
              "--skeleton", tiny_files["skeleton"], "--lr-batch", "8"])
        score_doc = json.loads(capsys.readouterr().out)
        main(["cost", MIXED, "--skeleton", tiny_files["skeleton"]])
        cost_doc = json.loads(capsys.readouterr().out)
        assert score_doc["params"] == cost_doc["params"]
        assert score_doc["flops"] == cost_doc["flops"]

    def test_bad_genotype_is_config_error(self, capsys):
        assert main(["score", "nats:(nope)"]) == 1
        assert "error" in capsys.readouterr().err

    def test_env_seed_fallback(self, capsys, tiny_files, monkeypatch):
        monkeypatch.setenv("FREEREA_SEED", "424242")
        main(["score", ALL_ZERO, "--repeats", "1",
              "--skeleton", tiny_files["skeleton"], "--lr-batch", "8"])
        doc = json.loads(capsys.readouterr().out)
        assert doc["seed"] == 424242


class TestEnumerate:
    def test_streams_all_genotypes(self, capsys):
        assert main(["enumerate", "--space", "nats"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 15_625
        assert len(set(lines)) == 15_625

    def test_writes_file_and_manifest(self, tmp_path):
        out = tmp_path / "enum"
        assert main(["enumerate", "--space", "nats", "--out", str(out)]) == 0
        assert len((out / "genotypes.txt").read_text().splitlines()) == 15_625
        manifest = read_json(out / "manifest.json")
        assert manifest["command"] == "enumerate"
        assert str(out / "genotypes.txt") in manifest["outputs"]


class TestSearch:
    def test_tabular_fitness_run(self, capsys, tmp_path, synth_table_path):
        out = tmp_path / "run"
        rc = main(["search", "--tabular", str(synth_table_path),
                   "--fitness", "tabular", "--max-iters", "100",
                   "--seed", "5", "--out", str(out)])
        assert rc == 0
        doc = read_json(out / "run_000.json")
        assert doc["seed"] == 5
        assert doc["steps"] == 100
        assert len(doc["history"]) == 101
        assert doc["best"]["table_accuracy"] is not None
        summary = json.loads(capsys.readouterr().out)
        assert summary["runs"] == 1

    def test_byte_identical_reruns(self, tmp_path, synth_table_path, capsys):
        argv = ["search", "--tabular", str(synth_table_path), "--fitness", "tabular",
                "--max-iters", "60", "--runs", "2", "--seed", "9"]
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(argv + ["--out", str(out_a)])
        main(argv + ["--out", str(out_b)])
        capsys.readouterr()
        for name in ["run_000.json", "run_001.json", "aggregate.csv"]:
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
        ma, mb = read_json(out_a / "manifest.json"), read_json(out_b / "manifest.json")
        for m in (ma, mb):
            m.pop("started_at"), m.pop("finished_at"), m.pop("wall_time_sec")
        ma["outputs"] = [p.replace(str(out_a), "") for p in ma["outputs"]]
        mb["outputs"] = [p.replace(str(out_b), "") for p in mb["outputs"]]
        assert ma == mb

    def test_parallel_jobs_match_serial(self, tmp_path, synth_table_path, capsys):
        argv = ["search", "--tabular", str(synth_table_path), "--fitness", "tabular",
                "--max-iters", "40", "--runs", "2", "--seed", "21"]
        serial, parallel = tmp_path / "s", tmp_path / "p"
        main(argv + ["--out", str(serial), "--jobs", "1"])
        main(argv + ["--out", str(parallel), "--jobs", "2"])
        capsys.readouterr()
        for name in ["run_000.json", "run_001.json"]:
            assert (serial / name).read_bytes() == (parallel / name).read_bytes()

    def test_aggregate_csv_shape(self, tmp_path, synth_table_path, capsys):
        out = tmp_path / "agg"
        main(["search", "--tabular", str(synth_table_path), "--fitness", "tabular",
              "--max-iters", "30", "--runs", "3", "--seed", "2", "--out", str(out)])
        capsys.readouterr()
        with open(out / "aggregate.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["run", "seed", "best_genotype", "best_fitness", "table_accuracy"]
        assert [r[0] for r in rows[1:]] == ["0", "1", "2", "mean", "std", "optimum", "regret"]

    def test_metric_fitness_small_run(self, tmp_path, tiny_files, capsys):
        out = tiny_files["dir"] / "m"
        rc = main(["search", "--config", tiny_files["config"],
                   "--skeleton", tiny_files["skeleton"], "--max-iters", "2",
                   "--repeats", "1", "--lr-batch", "8", "--seed", "4",
                   "--out", str(out)])
        capsys.readouterr()
        assert rc == 0
        doc = read_json(out / "run_000.json")
        assert doc["config"]["population_size"] == 6  # from the config file
        assert "log_synflow" in doc["best"]["metrics"]

    def test_constrained_run_respects_bounds(self, tmp_path, synth_table_path, capsys):
        out = tmp_path / "c"
        main(["search", "--tabular", str(synth_table_path), "--fitness", "tabular",
              "--max-iters", "50", "--seed", "3", "--constraints", "4e7,3e5",
              "--out", str(out)])
        capsys.readouterr()
        doc = read_json(out / "run_000.json")
        assert doc["best"]["flops"] <= 4e7
        assert doc["best"]["params"] <= 3e5

    def test_plot_written(self, tmp_path, synth_table_path, capsys):
        out = tmp_path / "plot"
        main(["search", "--tabular", str(synth_table_path), "--fitness", "tabular",
              "--max-iters", "20", "--seed", "6", "--plot", "--out", str(out)])
        capsys.readouterr()
        svg = (out / "trajectory.svg").read_text()
        assert svg.lstrip().startswith("<?xml")

    def test_missing_tabular_is_config_error(self, tmp_path, capsys):
        rc = main(["search", "--tabular", str(tmp_path / "nope.csv"),
                   "--fitness", "tabular", "--max-iters", "1"])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_no_budget_is_config_error(self, capsys):
        assert main(["search", "--seed", "1"]) == 1
        capsys.readouterr()


class TestCorrelate:
    def test_sampled_report(self, tmp_path, tiny_files, synth_table_path, capsys):
        out = tmp_path / "corr"
        rc = main(["correlate", "--tabular", str(synth_table_path),
                   "--sample-size", "4", "--repeats", "1",
                   "--skeleton", tiny_files["skeleton"], "--lr-batch", "8",
                   "--seed", "8", "--out", str(out)])
        capsys.readouterr()
        assert rc == 0
        with open(out / "correlations.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["metric", "kendall", "spearman", "note"]
        assert {r[0] for r in rows[1:]} == {"log_synflow", "synflow",
                                            "linear_regions", "skip_score"}

    def test_missing_file_is_config_error(self, tmp_path, capsys):
        rc = main(["correlate", "--tabular", str(tmp_path / "missing.csv")])
        assert rc == 1
        capsys.readouterr()


class TestAblate:
    def test_fitness_mode_emits_four_rows(self, tmp_path, tiny_files, capsys):
        out = tiny_files["dir"] / "abl"
        rc = main(["ablate", "--mode", "fitness", "--runs", "1",
                   "--config", tiny_files["config"],
                   "--skeleton", tiny_files["skeleton"], "--max-iters", "2",
                   "--repeats", "1", "--lr-batch", "8", "--seed", "5",
                   "--out", str(out)])
        capsys.readouterr()
        assert rc == 0
        with open(out / "ablation.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 5
        assert [r[0] for r in rows[1:]] == ["baseline", "no-log-synflow",
                                            "no-linear-regions", "no-skip"]

    def test_nn_mode_emits_six_pairs(self, tmp_path, synth_table_path, capsys):
        out = tmp_path / "nn"
        with pytest.warns(UserWarning):  # the (100, 2) configuration
            rc = main(["ablate", "--mode", "nn", "--runs", "2",
                       "--tabular", str(synth_table_path), "--fitness", "tabular",
                       "--max-iters", "30", "--seed", "5", "--out", str(out)])
        capsys.readouterr()
        assert rc == 0
        with open(out / "ablation.csv") as fh:
            rows = list(csv.reader(fh))
        pairs = [(int(r[1]), int(r[2])) for r in rows[1:]]
        assert pairs == [(25, 5), (100, 2), (100, 50), (20, 20), (100, 25), (64, 16)]


class TestBatchFile:
    def test_score_with_user_batch(self, capsys, tiny_files, tmp_path):
        import numpy as np
        from freerea.metrics import write_batch_file
        batch = np.random.default_rng(0).standard_normal((8, 2, 8, 8))
        bf = tmp_path / "batch.bin"
        write_batch_file(bf, batch)
        rc = main(["score", MIXED, "--seed", "2", "--repeats", "1",
                   "--skeleton", tiny_files["skeleton"], "--batch-file", str(bf)])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["metrics"]["linear_regions"]["mean"] != 0.0
