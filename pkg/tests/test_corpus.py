import json
from collections import Counter

import pytest

from driftlab.corpus import (
    CLS_ID,
    SEP_ID,
    UNK_ID,
    CorpusBuilder,
    GrammarSpec,
    SplitSizes,
    TaskSequence,
    build_continual_tasks,
    build_extra_pair_tasks,
    build_probing_tasks,
    export_task,
    ingest_dataset,
    order_sequence,
    parse_sentence,
    rederive_label,
    to_model_tokens,
    well_formed,
)
from driftlab.errors import ConfigurationError, GenerationError, IngestionError

SIZES = SplitSizes(train=120, validation=40, test=40)


@pytest.fixture(scope="module")
def builder():
    return CorpusBuilder(GrammarSpec(seed=42))


@pytest.fixture(scope="module")
def continual(builder):
    return build_continual_tasks(builder, SIZES)


@pytest.fixture(scope="module")
def probing(builder):
    return build_probing_tasks(builder, samples_per_class=40)


@pytest.fixture(scope="module")
def extras(builder):
    return build_extra_pair_tasks(builder, SIZES)


def all_examples(task):
    return task.train + task.validation + task.test


class TestLabelSpace:
    def test_label_sets_disjoint_across_all_tasks(self, continual, probing, extras):
        label_sets = [set(t.labels) for t in continual + probing + extras]
        union = set().union(*label_sets)
        assert len(union) == sum(len(s) for s in label_sets)

    def test_every_label_within_owning_task_range(self, continual, probing, extras):
        for task in continual + probing + extras:
            for ex in all_examples(task):
                assert ex.label in task.labels


class TestContinualTasks:
    def test_four_tasks(self, continual):
        assert [t.task_id for t in continual] == [
            "topic", "sentiment", "entailment", "acceptability"]

    def test_entailment_synonym_pairs_are_entail_by_construction(self, builder):
        task = next(t for t in build_continual_tasks(builder, SIZES)
                    if t.task_id == "entailment")
        entail = task.label_base
        v = builder.vocab
        found = 0
        for ex in task.train:
            if ex.label != entail or len(ex.tokens) != len(ex.second_segment):
                continue
            swaps = [(a, b) for a, b in zip(ex.tokens, ex.second_segment) if a != b]
            if len(swaps) == 1 and v.role(swaps[0][0]) == "syn":
                assert v.partner_of[swaps[0][0]] == swaps[0][1]
                found += 1
        assert found > 0

    def test_class_balance_within_one(self, continual):
        for task in continual:
            counts = Counter(ex.label for ex in task.train)
            assert len(counts) == task.n_classes
            assert max(counts.values()) - min(counts.values()) <= 1

    def test_acceptability_corrupt_is_ill_formed(self, builder, continual):
        task = next(t for t in continual if t.task_id == "acceptability")
        for ex in all_examples(task):
            assert well_formed(ex.tokens, builder.vocab) == (
                ex.label == task.label_base)


class TestProbingTasks:
    def test_seven_tasks_with_categories(self, probing):
        cats = {t.task_id: t.category for t in probing}
        assert cats == {
            "bshift": "syntactic", "tree_depth": "syntactic",
            "subj_num": "syntactic", "obj_num": "syntactic",
            "tense": "semantic", "paraphrase": "semantic",
            "coord_inv": "semantic",
        }

    def test_bshift_positives_differ_in_two_adjacent_positions(self, probing):
        task = next(t for t in probing if t.task_id == "bshift")
        positives = [ex for ex in all_examples(task)
                     if ex.label == task.label_base + 1]
        assert positives
        for ex in positives:
            source = ex.meta["source"]
            assert len(source) == len(ex.tokens)
            diff = [i for i, (a, b) in enumerate(zip(source, ex.tokens)) if a != b]
            assert len(diff) == 2 and diff[1] == diff[0] + 1
            assert ex.tokens[diff[0]] == source[diff[1]]
            assert ex.tokens[diff[1]] == source[diff[0]]

    def test_tense_label_recoverable_from_main_verb_class(self, builder, probing):
        task = next(t for t in probing if t.task_id == "tense")
        for ex in all_examples(task):
            parsed = parse_sentence(ex.tokens, builder.vocab)
            is_past = builder.vocab.role(parsed.main_verb()) == "verb_past"
            assert ex.label == task.label_base + (1 if is_past else 0)

    def test_splits_balanced_within_one(self, probing):
        for task in probing:
            for split in ("train", "validation", "test"):
                counts = Counter(ex.label for ex in task.split(split))
                assert max(counts.values()) - min(counts.values()) <= 1

    def test_tree_depth_needs_dmax_at_least_two(self):
        with pytest.raises(ConfigurationError):
            build_probing_tasks(CorpusBuilder(GrammarSpec(seed=0, d_max=1)),
                                samples_per_class=8)

    def test_samples_per_class_floor(self, builder):
        with pytest.raises(ConfigurationError):
            build_probing_tasks(builder, samples_per_class=1)


class TestGrammarInvariants:
    def test_generation_deterministic_per_seed(self):
        def corpus_bytes(seed):
            cb = CorpusBuilder(GrammarSpec(seed=seed))
            tasks = build_continual_tasks(cb, SIZES)
            return json.dumps([[ (ex.tokens, ex.second_segment, ex.label)
                                 for ex in all_examples(t)] for t in tasks])

        assert corpus_bytes(5) == corpus_bytes(5)
        assert corpus_bytes(5) != corpus_bytes(6)

    def test_splits_disjoint_as_token_sequences(self, continual, probing, extras):
        for task in continual + probing + extras:
            seen = set()
            for split in ("train", "validation", "test"):
                for ex in task.split(split):
                    key = ex.key()
                    assert key not in seen
                    seen.add(key)

    def test_every_label_rederivable(self, builder, continual, probing, extras):
        for task in continual + probing + extras:
            for ex in all_examples(task):
                assert rederive_label(task, ex, builder.vocab) == ex.label

    def test_role_classes_disjoint(self, builder):
        v = builder.vocab
        assert len(v.role_of) == len(v) - 4  # every non-control token has one role

    def test_empty_role_class_raises_naming_it(self):
        with pytest.raises(GenerationError, match="synonym"):
            GrammarSpec(n_synonym_pairs=0)


class TestOrderSequence:
    def test_order1_preset(self, continual):
        seq = order_sequence(continual, "order1")
        assert seq.task_ids == ["topic", "sentiment", "entailment", "acceptability"]

    def test_order2_is_reverse_of_order1(self, continual):
        fwd = order_sequence(continual, "order1")
        rev = order_sequence(continual, "order2")
        assert rev.task_ids == fwd.task_ids[::-1]

    def test_six_task_presets(self, continual, extras):
        seq = order_sequence(continual + extras, "order4")
        assert seq.task_ids == ["pair_paraphrase", "topic", "acceptability",
                                "entailment", "sentiment", "answer_match"]

    def test_duplicate_entry_rejected(self, continual):
        with pytest.raises(ConfigurationError):
            order_sequence(continual, ["topic", "topic"])

    def test_unknown_task_rejected(self, continual):
        with pytest.raises(ConfigurationError):
            order_sequence(continual, ["topic", "nonesuch"])

    def test_single_task_order_rejected(self, continual):
        with pytest.raises(ConfigurationError):
            order_sequence(continual, ["topic"])

    def test_sequence_rejects_duplicate_ids(self, continual):
        with pytest.raises(ConfigurationError):
            TaskSequence(tasks=[continual[0], continual[0]])


class TestModelTokens:
    def test_sentence_gets_cls_prefix(self, continual):
        ex = continual[0].train[0]
        tokens = to_model_tokens(ex, max_len=64)
        assert tokens[0] == CLS_ID
        assert tokens[1:] == list(ex.tokens)

    def test_pair_gets_separator(self, continual):
        task = next(t for t in continual if t.is_pair)
        ex = task.train[0]
        tokens = to_model_tokens(ex, max_len=64)
        sep_at = tokens.index(SEP_ID)
        assert tokens[1:sep_at] == list(ex.tokens)
        assert tokens[sep_at + 1:] == list(ex.second_segment)

    def test_overlong_input_truncated_without_error(self, continual):
        ex = continual[0].train[0]
        tokens = to_model_tokens(ex, max_len=4)
        assert len(tokens) == 4


class TestIngestion:
    def _write(self, tmp_path, records_by_split):
        for split, records in records_by_split.items():
            with open(tmp_path / f"{split}.jsonl", "w") as f:
                for r in records:
                    f.write(json.dumps(r) + "\n")

    def test_two_class_file_maps_to_next_free_ids(self, tmp_path):
        self._write(tmp_path, {
            "train": [{"text": "aa bb", "label": "pos"},
                      {"text": "bb cc", "label": "neg"}],
            "validation": [{"text": "aa", "label": "pos"}],
            "test": [{"text": "cc", "label": "neg"}],
        })
        task, vocab = ingest_dataset(tmp_path)
        assert task.n_classes == 2
        assert sorted({ex.label for ex in task.train}) == [0, 1]

    def test_vocab_size_is_train_tokens_plus_controls(self, tmp_path):
        self._write(tmp_path, {
            "train": [{"text": "aa bb cc", "label": "x"},
                      {"text": "bb dd", "label": "x"}],
            "validation": [{"text": "aa zz", "label": "x"}],
            "test": [{"text": "dd", "label": "x"}],
        })
        task, vocab = ingest_dataset(tmp_path)
        assert len(vocab) == 4 + 4  # aa bb cc dd + control tokens
        zz_id = [vocab.id_of(w) for w in "aa zz".split()]
        assert zz_id[1] == UNK_ID

    def test_unknown_field_reports_line(self, tmp_path):
        self._write(tmp_path, {
            "train": [{"text": "aa", "label": "x"},
                      {"text": "bb", "label": "x", "extra": 1}],
            "validation": [{"text": "aa", "label": "x"}],
            "test": [{"text": "aa", "label": "x"}],
        })
        with pytest.raises(IngestionError, match="line 2"):
            ingest_dataset(tmp_path)

    def test_empty_text_reports_line(self, tmp_path):
        self._write(tmp_path, {
            "train": [{"text": "  ", "label": "x"}],
            "validation": [{"text": "aa", "label": "x"}],
            "test": [{"text": "aa", "label": "x"}],
        })
        with pytest.raises(IngestionError, match="line 1"):
            ingest_dataset(tmp_path)

    def test_unseen_label_in_test_rejected(self, tmp_path):
        self._write(tmp_path, {
            "train": [{"text": "aa", "label": "x"}],
            "validation": [{"text": "aa", "label": "x"}],
            "test": [{"text": "aa", "label": "y"}],
        })
        with pytest.raises(IngestionError, match="never seen"):
            ingest_dataset(tmp_path)

    def test_pair_records_supported(self, tmp_path):
        self._write(tmp_path, {
            "train": [{"text": "aa bb", "text_pair": "cc", "label": "p"},
                      {"text": "dd", "text_pair": "ee", "label": "q"}],
            "validation": [{"text": "aa", "text_pair": "cc", "label": "p"}],
            "test": [{"text": "dd", "text_pair": "ee", "label": "q"}],
        })
        task, _ = ingest_dataset(tmp_path)
        assert task.is_pair
        assert task.train[0].second_segment is not None

    def test_export_then_ingest_round_trip(self, tmp_path, builder, continual):
        task = continual[1]  # sentiment
        export_task(task, builder.vocab, tmp_path / "sentiment")
        back, vocab = ingest_dataset(tmp_path / "sentiment", task_id="sentiment2")
        assert back.n_classes == task.n_classes
        assert len(back.train) == len(task.train)
        texts = {vocab.text(ex.tokens) for ex in back.train}
        originals = {builder.vocab.text(ex.tokens) for ex in task.train}
        assert texts == originals

    def test_missing_split_file(self, tmp_path):
        self._write(tmp_path, {"train": [{"text": "aa", "label": "x"}]})
        with pytest.raises(IngestionError, match="validation"):
            ingest_dataset(tmp_path)
