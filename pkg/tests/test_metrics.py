import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftlab import metrics as M
from driftlab.continual import AccuracyMatrix
from driftlab.errors import InputError
from driftlab.probing import BASELINE_ID, ProbeGrid


def matrix_from_diag(task_ids, diag):
    m = AccuracyMatrix.empty(task_ids)
    for i, v in enumerate(diag):
        for j in range(i + 1):
            m.set(i, j, v if j == i else 0.0)
    return m


def grid_with_top(values_by_ckpt_task, n_layers=4, category="syntactic"):
    grid = ProbeGrid(n_layers=n_layers)
    for (ckpt, task), v in values_by_ckpt_task.items():
        grid.set(ckpt, task, n_layers, v, category)
    return grid


class TestOverallGenerality:
    def test_perfect_scores(self):
        m = matrix_from_diag(["a", "b"], [100.0, 100.0])
        assert M.overall_generality(m) == 100.0

    def test_single_task(self):
        m = matrix_from_diag(["a"], [73.25])
        assert M.overall_generality(m) == 73.25

    def test_hand_average(self):
        m = matrix_from_diag(list("abcd"), [74.75, 62.37, 72.64, 81.79])
        assert M.overall_generality(m) == pytest.approx(72.8875)

    def test_missing_diagonal(self):
        m = AccuracyMatrix.empty(["a", "b"])
        m.set(0, 0, 50.0)
        with pytest.raises(InputError):
            M.overall_generality(m)


class TestGeneralityDestruction:
    def test_zero_when_diagonal_matches_baselines(self):
        m = matrix_from_diag(list("abc"), [70.0, 80.0, 90.0])
        baselines = {"a": 70.0, "b": 80.0, "c": 90.0}
        assert M.generality_destruction(m, baselines) == 0.0

    def test_first_task_excluded(self):
        m = matrix_from_diag(["a", "b"], [10.0, 80.0])
        baselines = {"a": 99.0, "b": 81.0}  # task 1 shortfall is irrelevant
        assert M.generality_destruction(m, baselines) == pytest.approx(1.0)

    def test_paper_fixture_order1(self):
        assert M.fixture_gd("bert", 1) == pytest.approx(0.67, abs=0.005)

    def test_paper_fixture_order2(self):
        assert M.fixture_gd("bert", 2) == pytest.approx(0.37, abs=0.005)

    def test_fixture_gd_matches_results_table_for_all_models(self):
        reported = {(r["model"], r["order"]): r["GD"]
                    for r in M.load_results_table()}
        for model in ("bert", "distilbert", "albert", "roberta"):
            for order in (1, 2):
                assert M.fixture_gd(model, order) == pytest.approx(
                    reported[(model, order)], abs=0.005)

    def test_needs_two_tasks(self):
        m = matrix_from_diag(["a"], [50.0])
        with pytest.raises(InputError):
            M.generality_destruction(m, {"a": 50.0})

    def test_shift_invariance(self):
        m1 = matrix_from_diag(["a", "b"], [60.0, 70.0])
        m2 = matrix_from_diag(["a", "b"], [60.0, 75.0])
        b1 = {"a": 60.0, "b": 72.0}
        b2 = {"a": 60.0, "b": 77.0}  # both shifted by +5
        assert M.generality_destruction(m1, b1) == \
            M.generality_destruction(m2, b2)


class TestCategoryForgetting:
    def test_zero_when_grid_equals_baseline(self):
        cells = {(c, "t1"): 80.0 for c in (BASELINE_ID, "1", "2")}
        grid = grid_with_top(cells)
        assert M.syn_forgetting(grid, ["t1"]) == 0.0

    def test_uniform_halving_gives_fifty_percent(self):
        cells = {(BASELINE_ID, "t1"): 80.0, ("1", "t1"): 40.0, ("2", "t1"): 40.0,
                 (BASELINE_ID, "t2"): 60.0, ("1", "t2"): 30.0, ("2", "t2"): 30.0}
        grid = grid_with_top(cells, category="semantic")
        assert M.sem_forgetting(grid, ["t1", "t2"]) == pytest.approx(50.0)

    def test_hand_case_seven_point_five(self):
        cells = {(BASELINE_ID, "s"): 80.0}
        for m, v in enumerate([80.0, 72.0, 76.0, 68.0], start=1):
            cells[(str(m), "s")] = v
        grid = grid_with_top(cells)
        assert M.syn_forgetting(grid, ["s"]) == pytest.approx(7.5)

    def test_negative_when_knowledge_gained(self):
        cells = {(BASELINE_ID, "s"): 50.0, ("1", "s"): 60.0}
        grid = grid_with_top(cells)
        assert M.syn_forgetting(grid, ["s"]) == pytest.approx(-20.0)

    def test_zero_baseline_rejected(self):
        cells = {(BASELINE_ID, "s"): 0.0, ("1", "s"): 10.0}
        grid = grid_with_top(cells)
        with pytest.raises(InputError):
            M.syn_forgetting(grid, ["s"])

    def test_invariant_under_task_permutation(self):
        cells = {(BASELINE_ID, "a"): 80.0, ("1", "a"): 60.0,
                 (BASELINE_ID, "b"): 40.0, ("1", "b"): 30.0}
        grid = grid_with_top(cells)
        assert M.syn_forgetting(grid, ["a", "b"]) == \
            M.syn_forgetting(grid, ["b", "a"])

    def test_missing_cell_rejected(self):
        grid = grid_with_top({(BASELINE_ID, "s"): 80.0})
        with pytest.raises(InputError):
            M.syn_forgetting(grid, ["s"])


class TestPearson:
    def test_self_correlation_is_one(self):
        x = [1.0, 2.0, 5.0, 3.0]
        assert M.pearson(x, x) == pytest.approx(1.0)

    def test_negative_affine_gives_minus_one(self):
        x = [1.0, 2.0, 5.0, 3.0]
        y = [-2.0 * v + 7.0 for v in x]
        assert M.pearson(x, y) == pytest.approx(-1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=12),
           st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
    def test_invariant_under_positive_affine_maps(self, xs, a, b):
        rng = np.random.default_rng(1)
        ys = rng.normal(size=len(xs)).tolist()
        if np.std(xs) == 0.0 or np.std(ys) == 0.0:
            return
        base = M.pearson(xs, ys)
        mapped = M.pearson([a * v + b for v in xs], ys)
        assert mapped == pytest.approx(base, abs=1e-9)
        assert M.pearson(ys, xs) == pytest.approx(base, abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(InputError):
            M.pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            M.pearson([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_fixture_correlations_near_reported(self):
        computed = M.fixture_correlations()
        for key, reported in M.REPORTED_CORRELATIONS.items():
            assert abs(computed[key] - reported) <= 0.10


class TestAssembleReport:
    def _inputs(self):
        m = matrix_from_diag(["a", "b"], [90.0, 80.0])
        baselines = {"a": 92.0, "b": 85.0}
        cells = {}
        for task, cat in (("syn1", "syntactic"), ("sem1", "semantic")):
            for ckpt in (BASELINE_ID, "1", "2"):
                cells[(ckpt, task)] = 80.0 if ckpt == BASELINE_ID else 70.0
        grid = ProbeGrid(n_layers=2)
        for (ckpt, task), v in cells.items():
            grid.set(ckpt, task, 2, v,
                     "syntactic" if task == "syn1" else "semantic")
        return m, baselines, grid

    def test_single_run_has_no_correlations(self):
        m, baselines, grid = self._inputs()
        report = M.assemble_report(m, baselines, grid, ["syn1"], ["sem1"])
        assert report.pearson is None
        assert report.gd == pytest.approx(5.0)
        assert report.synf == pytest.approx(12.5)

    def test_three_runs_populate_correlations(self):
        m, baselines, grid = self._inputs()
        extra = [(1.0, 5.0, 4.0), (2.0, 9.0, 8.0)]
        report = M.assemble_report(m, baselines, grid, ["syn1"], ["sem1"],
                                   extra_runs=extra)
        assert report.pearson is not None
        assert set(report.pearson) == {"gd_synf", "gd_semf", "synf_semf"}
        for v in report.pearson.values():
            assert -1.0 <= v <= 1.0

    def test_serialization_round_trip(self):
        m, baselines, grid = self._inputs()
        report = M.assemble_report(m, baselines, grid, ["syn1"], ["sem1"],
                                   provenance={"config_hash": "ff", "seed": 3})
        back = M.MetricsReport.from_json(report.to_json())
        assert back.to_dict() == report.to_dict()

    def test_inconsistent_task_ids_rejected(self):
        m, baselines, grid = self._inputs()
        with pytest.raises(InputError):
            M.assemble_report(m, baselines, grid, ["missing_task"], ["sem1"])


class TestFixtures:
    def test_results_table_has_24_rows(self):
        rows = M.load_results_table()
        assert len(rows) == 24
        assert {r["model"] for r in rows} == {"bert", "distilbert", "albert",
                                              "roberta"}
        assert {r["order"] for r in rows} == set(range(1, 7))

    def test_single_task_table_shape(self):
        table = M.load_single_task_table()
        assert set(table) == {"bert", "distilbert", "albert", "roberta"}
        for model in table.values():
            assert set(model) == {"yahoo", "yelp", "mnli", "cola"}

    def test_first_task_delta_is_zero_for_order1(self):
        table = M.load_single_task_table()
        for model in table.values():
            assert model["yahoo"]["delta_order1"] == 0.0

    def test_unknown_model_rejected(self):
        with pytest.raises(InputError):
            M.fixture_gd("gpt", 1)

    def test_unsupported_order_rejected(self):
        with pytest.raises(InputError):
            M.fixture_gd("bert", 3)
