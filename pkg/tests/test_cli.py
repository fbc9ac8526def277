"""
Command-line surface: one small pipeline through every subcommand plus the
error envelope
"""

import json

import pytest

import main


def _ok(argv):
    assert main.main([str(a) for a in argv]) == 0


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    _ok(["synth", "--seed", 3, "--n-docs", 120, "--n-queries", 12, "--vocab-size", 40,
         "--relevant-per-query", 2, "--holdout", 2, "--run-dir", data])
    _ok(["build-index", "--corpus", data / "collection.tsv", "--run-dir", data])
    model_dir = root / "model"
    _ok([
        "train", "--corpus", data / "collection.tsv", "--queries", data / "queries.train.tsv",
        "--qrels", data / "qrels.txt", "--index", data / "index.bin", "--vocab", data / "vocab.txt",
        "--layers", 1, "--d-model", 16, "--heads", 2, "--max-steps", 2, "--validation-every", 2,
        "--batch-positives", 2, "--negatives", 2, "--pool-size", 20, "--validation-size", 2,
        "--validation-depth", 10, "--max-len", 32, "--prefetch", 0, "--run-dir", model_dir,
    ])
    return root


def _common(workspace):
    data = workspace / "data"
    return [
        "--corpus", data / "collection.tsv", "--queries", data / "queries.tsv",
        "--index", data / "index.bin", "--vocab", data / "vocab.txt",
        "--checkpoint", workspace / "model" / "checkpoint.bin",
    ]


class TestPipeline:

    def test_synth_outputs(self, workspace):
        data = workspace / "data"
        for name in ("collection.tsv", "queries.tsv", "qrels.txt", "vocab.txt", "index.bin",
                     "queries.train.tsv", "queries.test.tsv"):
            assert (data / name).exists(), name
        assert len((data / "queries.test.tsv").read_text().splitlines()) == 2

    def test_synth_with_same_seed_is_identical(self, tmp_path):
        trees = []
        for name in ("a", "b"):
            out = tmp_path / name
            _ok(["synth", "--seed", 1, "--n-docs", 80, "--n-queries", 6, "--vocab-size", 40, "--holdout", 2,
                 "--run-dir", out])
            trees.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert sorted(trees[0]) == sorted(trees[1])
        assert trees[0] == trees[1]

    def test_shared_flags_follow_the_subcommand(self):
        args = main.build_parser().parse_args(["evaluate", "--seed", "4", "--threads", "3", "--log-level", "DEBUG"])
        assert (args.seed, args.threads, args.log_level) == (4, 3, "DEBUG")
        with pytest.raises(SystemExit):
            main.build_parser().parse_args(["--seed", "4", "evaluate"])

    def test_train_outputs(self, workspace):
        model = workspace / "model"
        assert (model / "checkpoint.bin").exists()
        log = (model / "train_log.csv").read_text().splitlines()
        assert log[0] == "step,train_loss,val_ndcg10"
        assert json.loads((model / "train_config.json").read_text())["max_steps"] == 2

    def test_rerank_fixed_depth_then_evaluate(self, workspace):
        out = workspace / "rerank"
        data = workspace / "data"
        _ok(["rerank", *_common(workspace), "--qrels", data / "qrels.txt", "--depth", 5,
             "--n-retrieve", 20, "--run-dir", out])
        rows = (out / "run.txt").read_text().splitlines()
        assert rows and len(rows[0].split()) == 6
        assert (out / "latency.csv").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics) == {"ndcg@10", "mrr@10"}

        evaluated = workspace / "evaluate"
        _ok(["evaluate", "--run", out / "run.txt", "--qrels", data / "qrels.txt",
             "--metrics", "ndcg@10,mrr@5", "--run-dir", evaluated])
        again = json.loads((evaluated / "metrics.json").read_text())
        assert again["ndcg@10"]["n_queries"] == metrics["ndcg@10"]["n_queries"]
        assert again["ndcg@10"]["mean"] == pytest.approx(metrics["ndcg@10"]["mean"], abs=1e-6)
        assert 0.0 <= again["ndcg@10"]["mean"] <= 1.0
        assert "mrr@5" in again

    def test_calibrate_then_budgeted_rerank(self, workspace):
        out = workspace / "budget"
        _ok(["calibrate", *_common(workspace), "--batch-size", 4, "--n-retrieve", 50, "--run-dir", out])
        profile = json.loads((out / "profile.json").read_text())
        assert profile["lambda_ms"] > 0 and profile["batch_size"] == 4
        _ok(["rerank", *_common(workspace), "--profile", out / "profile.json", "--omega", 1000,
             "--n-retrieve", 50, "--run-dir", out])
        assert (out / "run.txt").exists()

    def test_untimed_threaded_rerank(self, workspace):
        out = workspace / "threaded"
        _ok(["rerank", "--threads", 2, *_common(workspace), "--depth", 5, "--n-retrieve", 20,
             "--no-latency", "--run-dir", out])
        assert (out / "run.txt").exists()
        assert not (out / "latency.csv").exists()

    def test_sweep_and_probe(self, workspace):
        out = workspace / "sweep"
        data = workspace / "data"
        _ok(["sweep", *_common(workspace), "--qrels", data / "qrels.txt", "--k-grid", "1,5,10",
             "--omega", 1000, "--run-dir", out])
        assert len((out / "tradeoff.csv").read_text().splitlines()) == 4
        assert "low-latency-zone" in (out / "tradeoff.svg").read_text()
        _ok(["probe-confidence", *_common(workspace), "--depth", 5, "--run-dir", out])
        assert len((out / "confidence.csv").read_text().splitlines()) == 6

    def test_config_file_supplies_paths(self, workspace, tmp_path):
        data = workspace / "data"
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"corpus": str(data / "collection.tsv"), "run_dir": str(tmp_path / "out")}))
        _ok(["build-index", "--config", config])
        assert (tmp_path / "out" / "index.bin").exists()


class TestErrors:

    def test_missing_input_file(self, tmp_path, capsys):
        assert main.main(["build-index", "--corpus", str(tmp_path / "nope.tsv"), "--run-dir", str(tmp_path)]) == 2
        error = _error(capsys)
        assert error["status"] == "error"
        assert error["error"] == "MISSING_FILE"

    def test_rerank_needs_depth_or_budget(self, workspace, tmp_path, capsys):
        argv = ["rerank", *_common(workspace), "--run-dir", tmp_path]
        assert main.main([str(a) for a in argv]) == 2
        assert _error(capsys)["error"] == "INVALID_CONFIG"

    def test_unknown_config_key(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"corpse": "typo"}))
        assert main.main(["build-index", "--config", str(config)]) == 2
        error = _error(capsys)
        assert error["error"] == "INVALID_CONFIG"
        assert "corpse" in error["message"]

    def test_runtime_errors_exit_one(self, tmp_path, capsys):
        corpus = tmp_path / "collection.tsv"
        corpus.write_text("d1\tfine\nd2\tbroken\textra\n")
        assert main.main(["build-index", "--corpus", str(corpus), "--run-dir", str(tmp_path)]) == 1
        assert _error(capsys)["error"] == "PARSE_ERROR"

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            main.main(["--version"])
        assert info.value.code == 0
        assert "checkpoint format" in capsys.readouterr().out
