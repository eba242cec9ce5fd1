import numpy as np
import pytest

from driftlab import numerics as nm
from driftlab.continual import (
    AccuracyMatrix,
    MemoryBuffer,
    StrategyConfig,
    TrainConfig,
    derpp_regularizer,
    er_step,
    evaluate_accuracy,
    lwf_regularizer,
    representation_drift,
    store_to_buffer,
    train_sequence,
    train_single,
)
from driftlab.corpus import CorpusBuilder, GrammarSpec, SplitSizes, TaskSequence
from driftlab.encoder import EncoderConfig, EncoderModel, parameter_hash
from driftlab.errors import ConfigurationError, InputError, ShapeError, TrainingError
from driftlab.seeding import rng_stream

CFG = EncoderConfig(vocab_size=300, d_model=32, n_layers=2, n_heads=2,
                    d_ff=48, max_len=48)
HYPER = TrainConfig(batch_size=32, epochs=2, lr=1e-3, patience=3)
SIZES = SplitSizes(train=160, validation=64, test=64)


@pytest.fixture(scope="module")
def tasks():
    cb = CorpusBuilder(GrammarSpec(seed=9))
    return {
        "topic": cb.topic_task(SIZES),
        "sentiment": cb.sentiment_task(SIZES),
    }


@pytest.fixture(scope="module")
def pair(tasks):
    return TaskSequence(tasks=[tasks["topic"], tasks["sentiment"]])


def fresh_model(seed=7):
    return EncoderModel(CFG, seed=seed)


@pytest.fixture(scope="module")
def ft_run(pair):
    return train_sequence(fresh_model(), pair, StrategyConfig("ft"), HYPER, seed=7)


class TestRegularizers:
    def test_lwf_zero_for_identical_representations(self):
        z = nm.constant(np.ones((4, 8)))
        assert lwf_regularizer(z, nm.constant(np.ones((4, 8)))).item() == 0.0

    def test_lwf_three_four_five(self):
        a = nm.constant(np.array([[3.0, 4.0]]))
        b = nm.constant(np.zeros((1, 2)))
        assert lwf_regularizer(a, b).item() == pytest.approx(5.0)

    def test_lwf_shape_mismatch(self):
        with pytest.raises(ShapeError):
            lwf_regularizer(nm.constant(np.ones((2, 3))), nm.constant(np.ones((3, 2))))

    def test_derpp_zero_when_alpha_beta_zero(self):
        cur = nm.constant(np.array([[1.0, -1.0]]))
        out = derpp_regularizer(cur, np.array([[0.0, 0.0]]), [0], 0, 0.0, 0.0)
        assert out.item() == 0.0

    def test_derpp_zero_when_logits_match_and_beta_zero(self):
        cur = nm.constant(np.array([[2.0, 3.0]]))
        out = derpp_regularizer(cur, np.array([[2.0, 3.0]]), [1], 0, 1.0, 0.0)
        assert out.item() == 0.0

    def test_derpp_mse_convention_hand_case(self):
        cur = nm.constant(np.array([[1.0, 1.0]]))
        out = derpp_regularizer(cur, np.array([[0.0, 0.0]]), [0], 0, 1.0, 0.0)
        assert out.item() == pytest.approx(1.0)

    def test_derpp_width_mismatch(self):
        with pytest.raises(ShapeError):
            derpp_regularizer(nm.constant(np.ones((1, 3))), np.ones((1, 2)),
                              [0], 0, 1.0, 0.0)


class TestBuffer:
    def test_capacity_respected(self, tasks):
        buffer = MemoryBuffer()
        model = fresh_model()
        store_to_buffer(buffer, tasks["topic"], model, 10,
                        rng_stream(0, "s"), HYPER)
        assert buffer.count("topic") == 10
        assert len(buffer) == 10

    def test_oversized_k_stores_whole_training_set(self, tasks):
        buffer = MemoryBuffer()
        store_to_buffer(buffer, tasks["topic"], fresh_model(), 10_000,
                        rng_stream(0, "s"), HYPER)
        assert buffer.count("topic") == len(tasks["topic"].train)

    def test_sampling_seed_deterministic(self, tasks):
        buffer = MemoryBuffer()
        store_to_buffer(buffer, tasks["topic"], fresh_model(), 20,
                        rng_stream(0, "s"), HYPER)
        a = buffer.sample(8, rng_stream(1, "r"))
        b = buffer.sample(8, rng_stream(1, "r"))
        assert a == b

    def test_storing_same_task_twice_rejected(self, tasks):
        buffer = MemoryBuffer()
        store_to_buffer(buffer, tasks["topic"], fresh_model(), 5,
                        rng_stream(0, "s"), HYPER)
        with pytest.raises(TrainingError):
            store_to_buffer(buffer, tasks["topic"], fresh_model(), 5,
                            rng_stream(0, "s"), HYPER)

    def test_derpp_logits_frozen_at_storage_time(self, tasks):
        buffer = MemoryBuffer()
        model = fresh_model()
        head_seed = 7
        from driftlab.encoder import ClassifierHead
        task = tasks["topic"]
        head = ClassifierHead(task.task_id, CFG.d_model, task.n_classes,
                              task.label_base, seed=head_seed)
        store_to_buffer(buffer, task, model, 6, rng_stream(0, "s"), HYPER,
                        head=head)
        frozen = buffer.slots["topic"]["logits"].copy()
        for p in model.parameters():
            p.data += 0.5  # later training moves the model
        np.testing.assert_array_equal(buffer.slots["topic"]["logits"], frozen)
        assert frozen.shape[1] == task.n_classes

    def test_empty_buffer_is_silent_noop(self):
        out = er_step(fresh_model(), {}, MemoryBuffer(),
                      StrategyConfig("er"), HYPER, replay_rng=rng_stream(0, "r"))
        assert out is None


class TestTrainingLoop:
    def test_single_task_sequence_gives_1x1_matrix(self, tasks):
        seq = TaskSequence(tasks=[tasks["sentiment"]])
        result = train_sequence(fresh_model(), seq, StrategyConfig("ft"),
                                HYPER, seed=7)
        assert result.matrix.values.shape == (1, 1)
        assert not np.isnan(result.matrix.values[0, 0])

    def test_train_single_equals_singleton_sequence(self, tasks):
        seq = TaskSequence(tasks=[tasks["sentiment"]])
        seq_acc = train_sequence(fresh_model(), seq, StrategyConfig("ft"),
                                 HYPER, seed=7).matrix.values[0, 0]
        single_acc = train_single(CFG, tasks["sentiment"], HYPER, seed=7)
        assert single_acc == seq_acc

    def test_zero_epochs_is_chance_level(self, tasks):
        hyper = TrainConfig(batch_size=32, epochs=0, lr=1e-3)
        acc = train_single(CFG, tasks["sentiment"], hyper, seed=7)
        assert abs(acc - 50.0) < 20.0  # untrained balanced binary task

    def test_same_config_same_seed_bit_identical(self, pair, ft_run):
        again = train_sequence(fresh_model(), pair, StrategyConfig("ft"),
                               HYPER, seed=7)
        np.testing.assert_array_equal(ft_run.matrix.values, again.matrix.values)
        assert ft_run.batch_losses == again.batch_losses
        for a, b in zip(ft_run.checkpoint_states, again.checkpoint_states):
            for name in a["params"]:
                np.testing.assert_array_equal(a["params"][name], b["params"][name])

    def test_evaluation_does_not_mutate_model(self, tasks):
        model = fresh_model()
        from driftlab.encoder import ClassifierHead
        task = tasks["sentiment"]
        head = ClassifierHead(task.task_id, CFG.d_model, task.n_classes,
                              task.label_base, seed=7)
        before = parameter_hash(model, {"h": head})
        evaluate_accuracy(model, head, task.test, HYPER)
        assert parameter_hash(model, {"h": head}) == before

    def test_empty_split_raises(self, tasks):
        import copy

        broken = copy.copy(tasks["sentiment"])
        broken.validation = []
        seq = TaskSequence(tasks=[broken])
        with pytest.raises(TrainingError):
            train_sequence(fresh_model(), seq, StrategyConfig("ft"), HYPER, seed=7)


class TestReductionIdentities:
    def test_lwf_lambda_zero_matches_ft(self, pair, ft_run):
        run = train_sequence(fresh_model(), pair,
                             StrategyConfig("lwf", lwf_lambda=0.0), HYPER, seed=7)
        assert run.batch_losses == ft_run.batch_losses
        np.testing.assert_array_equal(run.matrix.values, ft_run.matrix.values)

    def test_er_replay_disabled_matches_ft(self, pair, ft_run):
        run = train_sequence(fresh_model(), pair,
                             StrategyConfig("er", replay_batch=0), HYPER, seed=7)
        assert run.batch_losses == ft_run.batch_losses

    def test_derpp_all_zero_matches_ft(self, pair, ft_run):
        run = train_sequence(
            fresh_model(), pair,
            StrategyConfig("derpp", alpha=0.0, beta=0.0, replay_batch=0),
            HYPER, seed=7)
        assert run.batch_losses == ft_run.batch_losses

    def test_er_with_replay_diverges_from_ft(self, pair, ft_run):
        run = train_sequence(fresh_model(), pair, StrategyConfig("er"),
                             HYPER, seed=7)
        assert run.batch_losses[1] != ft_run.batch_losses[1]
        # task 1 has an empty buffer: trajectory identical to ft
        assert run.batch_losses[0] == ft_run.batch_losses[0]


class TestLwFDrift:
    def test_high_lambda_reduces_representation_drift(self, pair, tasks, ft_run):
        lwf = train_sequence(fresh_model(), pair,
                             StrategyConfig("lwf", lwf_lambda=100.0), HYPER, seed=7)
        held_out = tasks["topic"].validation
        drift_ft = representation_drift(
            CFG, ft_run.checkpoint_states[0]["params"],
            ft_run.checkpoint_states[1]["params"], held_out, HYPER)
        drift_lwf = representation_drift(
            CFG, lwf.checkpoint_states[0]["params"],
            lwf.checkpoint_states[1]["params"], held_out, HYPER)
        assert drift_lwf < drift_ft


class TestAccuracyMatrix:
    def test_upper_triangle_rejected(self):
        m = AccuracyMatrix.empty(["a", "b"])
        with pytest.raises(InputError):
            m.set(0, 1, 50.0)

    def test_csv_round_trip_exact(self, tmp_path, ft_run):
        path = tmp_path / "m.csv"
        ft_run.matrix.to_csv(path)
        back = AccuracyMatrix.from_csv(path)
        assert back.task_ids == ft_run.matrix.task_ids
        np.testing.assert_array_equal(
            np.nan_to_num(back.values), np.nan_to_num(ft_run.matrix.values))

    def test_strategy_config_validation(self):
        with pytest.raises(ConfigurationError):
            StrategyConfig("nope")
        with pytest.raises(ConfigurationError):
            StrategyConfig("er", buffer_per_task=0)
        with pytest.raises(ConfigurationError):
            StrategyConfig("lwf", lwf_lambda=-1.0)
