import json

import pytest

from tcsp import corpus as cp
from tcsp import decomposer as dc
from tcsp import treebank as tb


@pytest.fixture(scope="module")
def small_dataset():
    cfg = cp.GeneratorConfig(seed=3, num_examples=120, nested_fraction=0.5)
    return cp.generate_synthetic(cfg)


class TestGenerator:
    def test_seed_determinism_byte_identical(self, tmp_path):
        cfg = cp.GeneratorConfig(seed=11, num_examples=60)
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        cp.write_jsonl(cp.generate_synthetic(cfg), a)
        cp.write_jsonl(cp.generate_synthetic(cfg), b)
        assert a.read_bytes() == b.read_bytes()

    def test_nested_fraction_zero(self):
        cfg = cp.GeneratorConfig(seed=5, num_examples=40, nested_fraction=0.0)
        ds = cp.generate_synthetic(cfg)
        assert not any(dc.is_nested(ex.tree) for ex in ds)

    def test_nested_fraction_exact(self, small_dataset):
        nested = sum(dc.is_nested(ex.tree) for ex in small_dataset)
        assert nested == 60

    def test_all_round_trip(self, small_dataset):
        for ex in small_dataset:
            assert dc.reconstruct(ex.frame, ex.tokens) == ex.tree

    def test_lengths_within_range(self, small_dataset):
        cfg = cp.GeneratorConfig()
        for ex in small_dataset:
            assert cfg.min_len <= len(ex.tokens) <= cfg.max_len

    def test_labels_come_from_ontology(self, small_dataset):
        onto = cp.build_ontology(cp.GeneratorConfig(seed=3))
        for ex in small_dataset:
            for node in ex.tree.root.nodes():
                pool = onto.intents if node.kind == tb.INTENT else onto.slots
                assert node.label in pool[ex.domain]

    def test_bad_config_rejected(self):
        with pytest.raises(cp.CorpusError):
            cp.GeneratorConfig(nested_fraction=1.5)
        with pytest.raises(cp.CorpusError):
            cp.GeneratorConfig(max_slot_depth=4)
        with pytest.raises(cp.CorpusError):
            cp.GeneratorConfig(min_len=9, max_len=4)


class TestJsonl:
    def test_write_read_round_trip(self, small_dataset, tmp_path):
        path = tmp_path / "data.jsonl"
        cp.write_jsonl(small_dataset, path)
        result = cp.read_jsonl(path)
        assert not result.errors
        assert result.dataset == small_dataset

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        result = cp.read_jsonl(path)
        assert len(result.dataset) == 0 and not result.errors

    def test_bad_record_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        rows = [
            {"id": "a", "locale": "en", "domain": "d", "utterance": "x", "tree": "[IN:A x ]"},
            {"id": "b", "locale": "en", "domain": "d", "utterance": "x", "tree": "[IN:A x"},
            {"id": "c", "locale": "en", "domain": "d", "utterance": "x y", "tree": "[IN:A x y ]"},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        result = cp.read_jsonl(path)
        assert len(result.dataset) == 2
        assert [e.line for e in result.errors] == [2]
        with pytest.raises(cp.CorpusError, match="line 2"):
            cp.read_jsonl(path, fail_fast=True)

    def test_ingestion_serialization_identity(self, small_dataset, tmp_path):
        p1, p2 = tmp_path / "one.jsonl", tmp_path / "two.jsonl"
        cp.write_jsonl(small_dataset, p1)
        cp.write_jsonl(cp.read_jsonl(p1).dataset, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestMtopTsv:
    COLS = {"id": 0, "utterance": 1, "domain": 2, "representation": 3}

    def test_full_form_matches_jsonl_path(self, small_dataset, tmp_path):
        path = tmp_path / "full.tsv"
        with open(path, "w") as fh:
            for ex in small_dataset:
                fh.write(
                    "\t".join(
                        [ex.id, " ".join(ex.tokens), ex.domain, tb.serialize(ex.tree)]
                    )
                    + "\n"
                )
        result = cp.read_mtop_tsv(path, self.COLS)
        assert not result.errors
        assert [ex.tree for ex in result.dataset] == [ex.tree for ex in small_dataset]

    def test_decoupled_reattachment(self, tmp_path):
        path = tmp_path / "dec.tsv"
        path.write_text("r1\tplay some jazz now\tmusic\t[IN:PLAY [SL:GENRE jazz ] ]\n")
        result = cp.read_mtop_tsv(path, self.COLS)
        assert not result.errors
        assert (
            tb.serialize(result.dataset[0].tree)
            == "[IN:PLAY play some [SL:GENRE jazz ] now ]"
        )

    def test_missing_column_key(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("a\tb\n")
        with pytest.raises(cp.MissingColumn):
            cp.read_mtop_tsv(path, {"utterance": 0, "domain": 1})

    def test_column_index_out_of_range(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("u v\tdom\n")
        result = cp.read_mtop_tsv(path, {"utterance": 0, "domain": 1, "representation": 7})
        assert len(result.dataset) == 0
        assert len(result.errors) == 1

    def test_unalignable_record_skipped_and_reported(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text(
            "r1\ta b\td\t[IN:A [SL:S zzz ] ]\nr2\ta b\td\t[IN:A a b ]\n"
        )
        result = cp.read_mtop_tsv(path, self.COLS)
        assert [ex.id for ex in result.dataset] == ["r2"]
        assert result.errors[0].line == 1


class TestFewShotSplit:
    def test_partitions_disjoint_and_exhaustive(self, small_dataset):
        split = cp.few_shot_split(small_dataset, "music", 0.1, seed=0)
        ids = lambda d: {ex.id for ex in d}
        assert not ids(split.source_train) & ids(split.target_finetune)
        assert not ids(split.source_train) & ids(split.target_test)
        assert not ids(split.target_finetune) & ids(split.target_test)
        everything = ids(split.source_train) | ids(split.target_finetune) | ids(split.target_test)
        assert everything == {ex.id for ex in small_dataset}
        assert all(ex.domain == "music" for ex in split.target_finetune)
        assert all(ex.domain == "music" for ex in split.target_test)
        assert all(ex.domain != "music" for ex in split.source_train)

    def test_fraction_arithmetic(self, small_dataset):
        pool = sum(ex.domain == "music" for ex in small_dataset)
        split = cp.few_shot_split(small_dataset, "music", 0.1, seed=0)
        assert len(split.target_finetune) == max(1, int(0.1 * pool))

    def test_fraction_one_takes_whole_pool(self, small_dataset):
        split = cp.few_shot_split(small_dataset, "music", 1.0, seed=0)
        assert len(split.target_test) == 0

    def test_reproducible(self, small_dataset):
        a = cp.few_shot_split(small_dataset, "alarm", 0.06, seed=42)
        b = cp.few_shot_split(small_dataset, "alarm", 0.06, seed=42)
        assert [ex.id for ex in a.target_finetune] == [ex.id for ex in b.target_finetune]

    def test_unknown_domain(self, small_dataset):
        with pytest.raises(cp.UnknownDomain):
            cp.few_shot_split(small_dataset, "nope", 0.1, seed=0)

    def test_tiny_fraction_floors_to_one(self, small_dataset):
        split = cp.few_shot_split(small_dataset, "music", 0.0001, seed=0)
        assert len(split.target_finetune) == 1


class TestVocabs:
    def test_reserved_convention(self, small_dataset):
        vocabs = cp.build_vocabs(small_dataset)
        for v in (vocabs.token, vocabs.coarse, vocabs.intent_tag, vocabs.slot_tag):
            assert v.symbols[:3] == (cp.CLS, cp.PAD, cp.UNK)
            assert v.encode(cp.CLS) == 0 and v.encode(cp.PAD) == 1 and v.encode(cp.UNK) == 2

    def test_rebuild_identical(self, small_dataset):
        assert cp.build_vocabs(small_dataset) == cp.build_vocabs(small_dataset)

    def test_no_unk_on_training_tags(self, small_dataset):
        vocabs = cp.build_vocabs(small_dataset)
        for ex in small_dataset:
            assert vocabs.coarse.encode(ex.frame.coarse_intent) != cp.UNK_ID
            for tag in ex.frame.intent_tags:
                assert vocabs.intent_tag.encode(tag) != cp.UNK_ID
            for stack in ex.frame.slot_stacks:
                for tag in stack:
                    assert vocabs.slot_tag.encode(tag) != cp.UNK_ID

    def test_unknown_token_maps_to_unk(self, small_dataset):
        vocabs = cp.build_vocabs(small_dataset)
        assert vocabs.token.encode("never-seen-word") == cp.UNK_ID

    def test_save_load(self, small_dataset, tmp_path):
        vocabs = cp.build_vocabs(small_dataset)
        path = tmp_path / "tok.vocab"
        vocabs.token.save(path)
        assert cp.Vocab.load(path) == vocabs.token

    def test_o_always_present(self):
        # fully nested corpus still carries O in both tag vocabs
        cfg = cp.GeneratorConfig(seed=1, num_examples=10, nested_fraction=1.0)
        vocabs = cp.build_vocabs(cp.generate_synthetic(cfg))
        assert "O" in vocabs.intent_tag and "O" in vocabs.slot_tag


class TestEnumeration:
    def test_small_counts_are_stable(self):
        # frozen counts guard against accidental grammar drift
        assert sum(1 for _ in cp.enumerate_small_trees(1)) == 58
        assert sum(1 for _ in cp.enumerate_small_trees(2)) == 820

    def test_all_enumerated_trees_round_trip(self):
        for t in cp.enumerate_small_trees(3):
            assert dc.reconstruct(dc.decompose(t), t.surfaces) == t

    def test_enumerates_full_depth_structures(self):
        seen_stack3 = seen_nested_intent = False
        for t in cp.enumerate_small_trees(2):
            frame = dc.decompose(t)
            if any(len(s) == 3 for s in frame.slot_stacks):
                seen_stack3 = True
            if any(tag.endswith("-NESTED") for tag in frame.intent_tags):
                seen_nested_intent = True
        assert seen_stack3 and seen_nested_intent
