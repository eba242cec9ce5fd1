import numpy as np
import pytest

from driftlab.corpus import CorpusBuilder, GrammarSpec, SplitSizes
from driftlab.encoder import EncoderConfig, EncoderModel, parameter_hash
from driftlab.errors import CompatibilityError, ConfigurationError, InputError
from driftlab.probing import (
    BASELINE_ID,
    ProbeConfig,
    ProbeGrid,
    _train_probe,
    probe_all,
    probe_layer,
)

CFG = EncoderConfig(vocab_size=300, d_model=32, n_layers=2, n_heads=2,
                    d_ff=48, max_len=48)
PCFG = ProbeConfig(epochs=8, samples_per_class=40)


@pytest.fixture(scope="module")
def builder():
    return CorpusBuilder(GrammarSpec(seed=21))


@pytest.fixture(scope="module")
def tense_task(builder):
    return builder.tense_task(SplitSizes(train=80, validation=32, test=40))


class TestProbeLayer:
    def test_zero_encoder_probes_to_chance(self, tense_task):
        model = EncoderModel(CFG, seed=0)
        for p in model.parameters():
            p.data[:] = 0.0
        acc = probe_layer(model, tense_task, -1, PCFG, seed=0)
        assert abs(acc - 50.0) <= 5.0

    def test_separable_features_reach_99(self):
        rng = np.random.default_rng(0)
        n, d = 120, 8
        y = np.arange(n) % 2
        X = rng.normal(size=(n, d)) * 0.05
        X[:, 0] += y * 4.0 - 2.0
        features = {
            "train": (X[:80], y[:80]),
            "validation": (X[80:100], y[80:100]),
            "test": (X[100:], y[100:]),
        }
        acc = _train_probe(features, 2, ProbeConfig(epochs=30), seed=0)
        assert acc >= 99.0

    def test_deterministic_per_seed(self, tense_task):
        model = EncoderModel(CFG, seed=3)
        a = probe_layer(model, tense_task, 1, PCFG, seed=5)
        b = probe_layer(model, tense_task, 1, PCFG, seed=5)
        assert a == b

    def test_encoder_untouched_by_probing(self, tense_task):
        model = EncoderModel(CFG, seed=3)
        before = parameter_hash(model)
        probe_layer(model, tense_task, -1, PCFG, seed=5)
        assert parameter_hash(model) == before

    def test_layer_out_of_range(self, tense_task):
        model = EncoderModel(CFG, seed=3)
        with pytest.raises(ConfigurationError):
            probe_layer(model, tense_task, CFG.n_layers + 1, PCFG, seed=0)

    def test_minus_one_is_topmost(self, tense_task):
        model = EncoderModel(CFG, seed=3)
        top = probe_layer(model, tense_task, -1, PCFG, seed=5)
        explicit = probe_layer(model, tense_task, CFG.n_layers, PCFG, seed=5)
        assert top == explicit


class TestProbeAll:
    @pytest.fixture(scope="class")
    def grid(self, builder, tense_task, tmp_path_factory):
        tasks = [tense_task,
                 builder.subj_num_task(SplitSizes(train=80, validation=32, test=40))]
        states = {
            BASELINE_ID: EncoderModel(CFG, seed=0).state_dict(),
            "1": EncoderModel(CFG, seed=1).state_dict(),
            "2": EncoderModel(CFG, seed=2).state_dict(),
        }
        cache = tmp_path_factory.mktemp("cache")
        return probe_all(states, CFG, tasks, PCFG, seed=0, cache_dir=str(cache))

    def test_grid_is_complete(self, grid):
        n_cells = len(grid.values)
        assert n_cells == 3 * 2 * (CFG.n_layers + 1)

    def test_values_are_percentages(self, grid):
        assert all(0.0 <= v <= 100.0 for v in grid.values.values())

    def test_baseline_floor(self, grid):
        for task in grid.tasks():
            assert grid.get(BASELINE_ID, task, -1) >= 10.0

    def test_baseline_independent_of_checkpoint_ordering(self, builder, tense_task,
                                                         tmp_path):
        states_fwd = {BASELINE_ID: EncoderModel(CFG, seed=0).state_dict(),
                      "1": EncoderModel(CFG, seed=1).state_dict()}
        states_rev = {"1": EncoderModel(CFG, seed=1).state_dict(),
                      BASELINE_ID: EncoderModel(CFG, seed=0).state_dict()}
        a = probe_all(states_fwd, CFG, [tense_task], PCFG, seed=0)
        b = probe_all(states_rev, CFG, [tense_task], PCFG, seed=0)
        assert a.get(BASELINE_ID, "tense", -1) == b.get(BASELINE_ID, "tense", -1)

    def test_mixed_configs_rejected(self, tense_task):
        other = EncoderConfig(vocab_size=300, d_model=16, n_layers=2, n_heads=2,
                              d_ff=48, max_len=48)
        states = {BASELINE_ID: EncoderModel(other, seed=0).state_dict()}
        with pytest.raises(CompatibilityError):
            probe_all(states, CFG, [tense_task], PCFG, seed=0)

    def test_csv_round_trip(self, grid, tmp_path):
        path = tmp_path / "probes.csv"
        grid.to_csv(path, seed=0)
        back, seeds = ProbeGrid.from_csv(path)
        assert seeds == [0]
        assert back.values == grid.values
        assert back.categories == grid.categories


class TestSubsampling:
    def test_cap_respected_and_balanced(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(100, 4))
        y = np.asarray([0] * 70 + [1] * 30)
        from driftlab.probing import _subsample_balanced

        X2, y2 = _subsample_balanced(X, y, 25, rng)
        counts = np.bincount(y2)
        assert counts[0] == 25 and counts[1] == 25

    def test_cache_reused(self, builder, tense_task, tmp_path):
        from driftlab.probing import extract_features

        model = EncoderModel(CFG, seed=3)
        first = extract_features(model, tense_task, PCFG, [0, 2],
                                 cache_dir=str(tmp_path))
        files = sorted(p.name for p in tmp_path.iterdir())
        assert len(files) == 2
        second = extract_features(model, tense_task, PCFG, [0, 2],
                                  cache_dir=str(tmp_path))
        for layer in (0, 2):
            for split in ("train", "validation", "test"):
                np.testing.assert_array_equal(first[layer][split][0],
                                              second[layer][split][0])

    def test_missing_cell_raises(self):
        grid = ProbeGrid(n_layers=2)
        with pytest.raises(InputError):
            grid.get("1", "tense", 1)
