import json

import pytest
import torch
from torch import nn

from tcsp import corpus as cp
from tcsp import decomposer as dc
from tcsp import harness as hn


@pytest.fixture(scope="module")
def dataset():
    cfg = cp.GeneratorConfig(seed=9, num_examples=90, nested_fraction=0.5,
                             min_len=4, max_len=9)
    return cp.generate_synthetic(cfg)


class TestEvaluate:
    def test_gold_oracle_scores_one_everywhere(self, dataset):
        report = hn.evaluate(hn.GoldOracle(dataset), dataset)
        assert report.exact_match == 1.0
        assert report.nested_em == 1.0 and report.non_nested_em == 1.0
        assert all(v == 1.0 for v in report.per_domain.values())

    def test_partition_counts_sum_to_total(self, dataset):
        report = hn.evaluate(hn.GoldOracle(dataset), dataset)
        assert report.nested_count + report.non_nested_count == report.total
        assert report.total == len(dataset)
        # partition agrees with a direct tree walk
        assert report.nested_count == sum(dc.is_nested(ex.tree) for ex in dataset)

    def test_single_flipped_tag_drops_one_example(self, dataset):
        class AlmostOracle(hn.GoldOracle):
            def __init__(self, ds, broken_id):
                super().__init__(ds)
                ex = next(e for e in ds if e.id == broken_id)
                frame = ex.frame
                self.frames[ex.tokens] = dc.DecomposedFrame(
                    "WRONG_INTENT", frame.intent_tags, frame.slot_stacks
                )

        broken = dataset.examples[7].id
        report = hn.evaluate(AlmostOracle(dataset, broken), dataset)
        n = len(dataset)
        assert report.exact_match == pytest.approx((n - 1) / n)

    def test_decode_failures_score_zero(self, dataset):
        class NoneModel:
            def parse_batch(self, seqs, repair=False):
                return [None] * len(seqs)

        report = hn.evaluate(NoneModel(), dataset)
        assert report.exact_match == 0.0

    def test_evaluate_is_pure(self, dataset):
        model = hn.build_model("x2parser", dataset, seed=0,
                               encoder_kwargs={"d_model": 32, "d_ff": 32, "n_layers": 1})
        assert hn.evaluate(model, dataset) == hn.evaluate(model, dataset)


class TestTrain:
    def test_loss_decreases_on_tiny_overfit(self, dataset):
        small = cp.Dataset(dataset.examples[:16])
        model = hn.build_model("x2parser", small, seed=0,
                               encoder_kwargs={"d_model": 32, "d_ff": 32, "n_layers": 1})
        res = hn.train(model, small, hn.TrainConfig.toy(epochs=5, batch_size=8), seed=0)
        assert res.log[-1]["loss"] < res.log[0]["loss"]

    def test_identical_seed_identical_log(self, dataset):
        small = cp.Dataset(dataset.examples[:12])

        def run():
            model = hn.build_model("nlm", small, seed=1,
                                   encoder_kwargs={"d_model": 32, "d_ff": 32, "n_layers": 1})
            return hn.train(model, small, hn.TrainConfig.toy(epochs=3, batch_size=4), seed=5).log

        assert run() == run()

    def test_oversized_batch_is_single_short_batch(self, dataset):
        small = cp.Dataset(dataset.examples[:5])
        model = hn.build_model("x2parser", small, seed=0,
                               encoder_kwargs={"d_model": 32, "d_ff": 32, "n_layers": 1})
        res = hn.train(model, small, hn.TrainConfig.toy(epochs=2, batch_size=64), seed=0)
        assert len(res.log) == 2  # one step per epoch, no crash

    def test_zero_epochs_returns_untrained(self, dataset):
        small = cp.Dataset(dataset.examples[:6])
        model = hn.build_model("x2parser", small, seed=0,
                               encoder_kwargs={"d_model": 32, "d_ff": 32, "n_layers": 1})
        res = hn.train(model, small, hn.TrainConfig.toy(epochs=0), seed=0)
        assert res.log == []

    def test_nonfinite_loss_aborts_with_diagnostic(self, dataset):
        small = cp.Dataset(dataset.examples[:4])

        class Diverges(nn.Module):
            def __init__(self):
                super().__init__()
                self.w = nn.Parameter(torch.ones(1))

            def prepare_batch(self, examples):
                return examples

            def loss(self, prepared):
                return self.w * float("nan")

            def parse_batch(self, seqs, repair=False):
                return [None] * len(seqs)

        with pytest.raises(hn.NonFiniteLoss, match="epoch 0"):
            hn.train(Diverges(), small, hn.TrainConfig.toy(epochs=1), seed=0)

    def test_eval_split_carves_holdout(self, dataset):
        small = cp.Dataset(dataset.examples[:20])
        model = hn.build_model("x2parser", small, seed=0,
                               encoder_kwargs={"d_model": 32, "d_ff": 32, "n_layers": 1})
        cfg = hn.TrainConfig.toy(epochs=1, batch_size=8, eval_split=0.25)
        res = hn.train(model, small, cfg, seed=0)
        assert len(res.log) == 1

    def test_metric_log_csv(self, dataset, tmp_path):
        path = tmp_path / "log.csv"
        hn.write_metric_log(path, [{"epoch": 0, "loss": 1.5, "em": 0.25}])
        text = path.read_text()
        assert text.splitlines()[0] == "epoch,loss,em"
        assert "0,1.5,0.25" in text


class TestFewShot:
    def test_oracle_pipes_through_protocol(self, dataset):
        report = hn.run_few_shot_protocol(
            dataset,
            target_domain="music",
            train_config=hn.TrainConfig.toy(epochs=1),
            families=("x2parser", "nlm", "seq2seq"),
            fractions=(0.03, 0.10),
            model_factory=lambda family: hn.GoldOracle(dataset),
        )
        assert report.splits_verified
        for family in ("x2parser", "nlm", "seq2seq"):
            for f in ("0.03", "0.1"):
                assert report.exact_match[family][f] == 1.0

    def test_report_shape_complete(self, dataset):
        report = hn.run_few_shot_protocol(
            dataset,
            target_domain="alarm",
            train_config=hn.TrainConfig.toy(epochs=0),
            families=("x2parser",),
            fractions=(0.1,),
            encoder_kwargs={"d_model": 32, "d_ff": 32, "n_layers": 1},
        )
        payload = json.loads(hn.report_to_json(report))
        assert payload["target_domain"] == "alarm"
        assert payload["exact_match"]["x2parser"]["0.1"] is not None
        assert payload["split_sizes"]["0.1"]["target_finetune"] >= 1
        text = report.to_text()
        assert "x2parser" in text and "10%" in text


class TestLatency:
    def test_buckets_and_instrumentation(self, dataset):
        report = hn.latency_benchmark(
            {"oracle": hn.GoldOracle(dataset)}, dataset,
            buckets=(10, 20, 30, 40), repetitions=1, warmup=0,
        )
        stats = report.models["oracle"]
        assert sum(s.count for s in stats.values()) > 0
        for s in stats.values():
            if s.count:
                assert s.mean_ms is not None and s.mean_ms >= 0

    def test_empty_bucket_reported_not_raised(self, dataset):
        tiny = cp.Dataset(dataset.examples[:3])
        report = hn.latency_benchmark(
            {"oracle": hn.GoldOracle(tiny)}, tiny,
            buckets=(2, 2000), repetitions=1, warmup=0,
        )
        # shortest possible linearization (root + one token) exceeds 2 symbols
        assert report.models["oracle"][2].count == 0
        assert report.models["oracle"][2].mean_ms is None
        assert report.models["oracle"][2000].count > 0

    def test_step_counts_recorded(self, dataset):
        small = cp.Dataset(dataset.examples[:6])
        model = hn.build_model("x2parser", small, seed=0,
                               encoder_kwargs={"d_model": 32, "d_ff": 32, "n_layers": 1})
        report = hn.latency_benchmark({"x2parser": model}, small,
                                      buckets=(64,), repetitions=1, warmup=1)
        stats = report.models["x2parser"][64]
        assert stats.mean_steps == 2.0
        assert report.param_counts["x2parser"] > 0


def test_build_model_rejects_unknown_family(dataset):
    with pytest.raises(hn.TrainingError):
        hn.build_model("rnn", dataset)
