import json

import pytest

from tcsp import cli
from tcsp import corpus as cp


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.jsonl"
    cfg = cp.GeneratorConfig(seed=21, num_examples=48, nested_fraction=0.5,
                             min_len=4, max_len=9)
    cp.write_jsonl(cp.generate_synthetic(cfg), path)
    return path


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


class TestConvert:
    def test_tree2flat_flat2tree_byte_round_trip(self, data_file, tmp_path):
        flat = tmp_path / "flat.txt"
        back = tmp_path / "back.jsonl"
        assert run("convert", "--input", data_file, "--direction", "tree2flat",
                   "--output", flat) == 0
        assert run("convert", "--input", flat, "--direction", "flat2tree",
                   "--output", back) == 0
        assert back.read_bytes() == data_file.read_bytes()

    def test_empty_input_empty_output_exit_zero(self, tmp_path):
        src = tmp_path / "empty.jsonl"
        src.write_text("")
        out = tmp_path / "out.txt"
        assert run("convert", "--input", src, "--direction", "tree2flat",
                   "--output", out) == 0
        assert out.read_text() == ""

    def test_bad_direction_is_usage_error(self, data_file, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("convert", "--input", data_file, "--direction", "sideways",
                "--output", tmp_path / "x")
        assert exc.value.code == 2

    def test_bad_record_exit_one_with_sidecar(self, tmp_path):
        src = tmp_path / "bad.jsonl"
        src.write_text(
            '{"id":"a","locale":"en","domain":"d","utterance":"x","tree":"[IN:A x ]"}\n'
            '{"id":"b","locale":"en","domain":"d","utterance":"y","tree":"[IN:A y"}\n'
        )
        out = tmp_path / "out.txt"
        assert run("convert", "--input", src, "--direction", "tree2flat",
                   "--output", out) == 1
        sidecar = json.loads((tmp_path / "out.txt.errors.json").read_text())
        assert sidecar[0]["line"] == 2


class TestRoundtripCheck:
    def test_generated_corpus_passes(self, tmp_path):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"seed": 5, "num_examples": 40}))
        assert run("roundtrip-check", "--generate", cfg) == 0

    def test_input_corpus_passes(self, data_file):
        assert run("roundtrip-check", "--input", data_file) == 0

    def test_broken_file_fails_and_names_record(self, tmp_path, capsys):
        src = tmp_path / "broken.jsonl"
        src.write_text(
            '{"id":"ok1","locale":"en","domain":"d","utterance":"x","tree":"[IN:A x ]"}\n'
            '{"id":"bad1","locale":"en","domain":"d","utterance":"y z","tree":"[IN:A y z"}\n'
        )
        assert run("roundtrip-check", "--input", src) == 1
        out = capsys.readouterr().out
        assert "1 failed" in out

    def test_requires_exactly_one_source(self, data_file):
        assert run("roundtrip-check") == 2


class TestGenerateData:
    def test_deterministic_manifest_run(self, tmp_path):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"seed": 9, "num_examples": 30}))
        out1, out2 = tmp_path / "run1", tmp_path / "run2"
        assert run("generate-data", "--config", cfg, "--out-dir", out1) == 0
        assert run("generate-data", "--config", cfg, "--out-dir", out2) == 0
        assert (out1 / "dataset.jsonl").read_bytes() == (out2 / "dataset.jsonl").read_bytes()
        manifest = json.loads((out1 / "manifest.json").read_text())
        assert manifest["command"] == "generate-data"
        assert manifest["resolved"]["seed"] == 9
        assert (out1 / "ontology.json").exists()

    def test_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"seed": 9, "num_examples": 30}))
        out = tmp_path / "run"
        assert run("generate-data", "--config", cfg, "--out-dir", out,
                   "--num-examples", 10) == 0
        lines = (out / "dataset.jsonl").read_text().strip().splitlines()
        assert len(lines) == 10


class TestTrainEval:
    def test_zero_epoch_train_writes_checkpoint(self, data_file, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--data", data_file, "--family", "x2parser",
                   "--epochs", 0, "--d-model", 32, "--d-ff", 32, "--layers", 1,
                   "--out-dir", out) == 0
        assert (out / "checkpoint.ckpt").exists()
        assert (out / "metrics.csv").exists()
        assert json.loads((out / "manifest.json").read_text())["command"] == "train"

    def test_train_eval_finetune_chain(self, data_file, tmp_path):
        out = tmp_path / "run"
        assert run("train", "--data", data_file, "--family", "x2parser",
                   "--epochs", 2, "--d-model", 32, "--d-ff", 32, "--layers", 1,
                   "--out-dir", out) == 0
        out2 = tmp_path / "eval"
        assert run("eval", "--checkpoint", out / "checkpoint.ckpt",
                   "--data", data_file, "--out-dir", out2) == 0
        report = json.loads((out2 / "eval_report.json").read_text())
        assert report["total"] == 48
        assert report["nested_count"] + report["non_nested_count"] == 48
        out3 = tmp_path / "ft"
        assert run("finetune", "--checkpoint", out / "checkpoint.ckpt",
                   "--data", data_file, "--epochs", 1, "--out-dir", out3) == 0
        assert (out3 / "checkpoint.ckpt").exists()

    def test_eval_reports_reproducible(self, data_file, tmp_path):
        out = tmp_path / "run"
        run("train", "--data", data_file, "--family", "nlm", "--epochs", 1,
            "--d-model", 32, "--d-ff", 32, "--layers", 1, "--out-dir", out)
        a, b = tmp_path / "e1", tmp_path / "e2"
        run("eval", "--checkpoint", out / "checkpoint.ckpt", "--data", data_file,
            "--out-dir", a)
        run("eval", "--checkpoint", out / "checkpoint.ckpt", "--data", data_file,
            "--out-dir", b)
        assert (a / "eval_report.json").read_bytes() == (b / "eval_report.json").read_bytes()

    def test_missing_file_exit_one(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope.jsonl", "--family",
                   "x2parser", "--out-dir", tmp_path / "o") == 1


class TestBenchAndFewshot:
    def test_bench_latency_dummy_models(self, data_file, tmp_path):
        out = tmp_path / "bench"
        assert run("bench-latency", "--data", data_file,
                   "--families", "x2parser,nlm", "--repetitions", 1,
                   "--d-model", 32, "--d-ff", 32, "--layers", 1,
                   "--buckets", "16,32,64", "--out-dir", out) == 0
        payload = json.loads((out / "latency.json").read_text())
        assert set(payload["models"]) == {"x2parser", "nlm"}
        assert payload["buckets"] == [16, 32, 64]

    def test_fewshot_report_schema(self, data_file, tmp_path):
        out = tmp_path / "few"
        assert run("fewshot", "--data", data_file, "--target-domain", "music",
                   "--families", "x2parser", "--fractions", "0.1",
                   "--epochs", 1, "--finetune-epochs", 1,
                   "--d-model", 32, "--d-ff", 32, "--layers", 1,
                   "--out-dir", out) == 0
        payload = json.loads((out / "fewshot_report.json").read_text())
        assert payload["splits_verified"] is True
        assert "0.1" in payload["exact_match"]["x2parser"]

    def test_fewshot_unknown_domain_exit_one(self, data_file, tmp_path):
        assert run("fewshot", "--data", data_file, "--target-domain", "nosuch",
                   "--families", "x2parser", "--fractions", "0.1", "--epochs", 0,
                   "--out-dir", tmp_path / "x") == 1
