"""Generality-forgetting metrics over accuracy matrices and probe grids.

All values are percentages (0-100), matching how results tables report
them. G averages the just-after-training diagonal; GD averages the
shortfall against single-task baselines over tasks 2..N; SynF/SemF
average the relative top-layer probing drop against the initial model
over a task category. Published results ship as versioned fixtures so
the metric code is testable without any training.
"""

import csv
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .continual import AccuracyMatrix
from .errors import InputError
from .probing import BASELINE_ID, ProbeGrid


def overall_generality(matrix: AccuracyMatrix) -> float:
    """Mean of the diagonal accuracies R[m, m]."""
    diag = matrix.diagonal()
    if np.isnan(diag).any():
        raise InputError("accuracy matrix diagonal is not fully populated")
    return float(diag.mean())


def generality_destruction(matrix: AccuracyMatrix, baselines: dict) -> float:
    """Mean of (single-task accuracy - R[m, m]) over tasks 2..N."""
    n = len(matrix.task_ids)
    if n < 2:
        raise InputError("generality destruction needs at least 2 tasks")
    missing = [t for t in matrix.task_ids if t not in baselines]
    if missing:
        raise InputError(f"missing single-task baselines for {missing}")
    diag = matrix.diagonal()
    if np.isnan(diag).any():
        raise InputError("accuracy matrix diagonal is not fully populated")
    deltas = [baselines[matrix.task_ids[m]] - diag[m] for m in range(1, n)]
    return float(np.mean(deltas))


def _category_forgetting(grid: ProbeGrid, task_ids, checkpoints) -> float:
    per_task = []
    for task_id in task_ids:
        baseline = grid.get(BASELINE_ID, task_id, -1)
        if baseline == 0.0:
            raise InputError(
                f"baseline probing accuracy for {task_id!r} is zero; relative "
                "drop is undefined")
        drops = [(baseline - grid.get(ckpt, task_id, -1)) / baseline
                 for ckpt in checkpoints]
        per_task.append(float(np.mean(drops)))
    return float(np.mean(per_task)) * 100.0


def _numbered_checkpoints(grid: ProbeGrid) -> list:
    ckpts = [c for c in grid.checkpoints() if c != BASELINE_ID]
    if not ckpts:
        raise InputError("probe grid has no trained checkpoints")
    return ckpts


def syn_forgetting(grid: ProbeGrid, syn_tasks) -> float:
    """Mean relative top-layer drop over the syntactic probing tasks."""
    return _category_forgetting(grid, list(syn_tasks), _numbered_checkpoints(grid))


def sem_forgetting(grid: ProbeGrid, sem_tasks) -> float:
    """Mean relative top-layer drop over the semantic probing tasks."""
    return _category_forgetting(grid, list(sem_tasks), _numbered_checkpoints(grid))


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise InputError(f"pearson needs equal-length vectors, got {x.shape}/{y.shape}")
    if len(x) < 2:
        raise InputError("pearson needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(xc @ xc)
    sy = float(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise InputError("pearson is undefined for zero-variance input")
    return float((xc @ yc) / np.sqrt(sx * sy))


@dataclass
class MetricsReport:
    g: float
    gd: float
    synf: float
    semf: float
    pearson: dict | None = None          # gd_synf / gd_semf / synf_semf
    per_layer: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "g": self.g, "gd": self.gd, "synf": self.synf, "semf": self.semf,
            "pearson": self.pearson, "per_layer": self.per_layer,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(g=d["g"], gd=d["gd"], synf=d["synf"], semf=d["semf"],
                   pearson=d.get("pearson"), per_layer=d.get("per_layer", {}),
                   provenance=d.get("provenance", {}))

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def per_layer_curves(grid: ProbeGrid) -> dict:
    """{task: {checkpoint: [accuracy per probed layer]}} plus the layer axis."""
    layers = grid.layers()
    curves = {}
    for task_id in grid.tasks():
        curves[task_id] = {
            ckpt: [grid.values[(ckpt, task_id, l)] for l in layers]
            for ckpt in grid.checkpoints()
        }
    return {"layers": layers, "tasks": curves}


def assemble_report(matrix: AccuracyMatrix, baselines: dict, grid: ProbeGrid,
                    syn_tasks, sem_tasks, extra_runs=None,
                    provenance=None) -> MetricsReport:
    """Full report for one run; correlations only appear once at least
    three (order, seed) runs are available to correlate over."""
    grid_tasks = set(grid.tasks())
    for task_id in list(syn_tasks) + list(sem_tasks):
        if task_id not in grid_tasks:
            raise InputError(f"probe grid lacks task {task_id!r}")
    report = MetricsReport(
        g=overall_generality(matrix),
        gd=generality_destruction(matrix, baselines),
        synf=syn_forgetting(grid, syn_tasks),
        semf=sem_forgetting(grid, sem_tasks),
        per_layer=per_layer_curves(grid),
        provenance=dict(provenance or {}),
    )
    points = list(extra_runs or []) + [(report.gd, report.synf, report.semf)]
    if len(points) >= 3:
        gd_v, synf_v, semf_v = (np.asarray(col, dtype=np.float64)
                                for col in zip(*points))
        report.pearson = {
            "gd_synf": pearson(gd_v, synf_v),
            "gd_semf": pearson(gd_v, semf_v),
            "synf_semf": pearson(synf_v, semf_v),
        }
    return report


# ---------------------------------------------------------------------------
# shipped fixtures of published results
# ---------------------------------------------------------------------------

FIXTURE_ORDER1 = ["yahoo", "yelp", "mnli", "cola"]
FIXTURE_ORDER2 = ["cola", "mnli", "yelp", "yahoo"]
REPORTED_CORRELATIONS = {"gd_synf": 0.63, "gd_semf": 0.67, "synf_semf": 0.97}

CORRELATION_CAVEAT = (
    "fixture correlations are computed over the 24 table-level points "
    "(4 models x 6 orders); per-seed run data could shift them, so the "
    "comparison tolerance is widened to +/-0.10"
)


def _read_fixture(name: str) -> list:
    path = resources.files("driftlab.fixtures").joinpath(name)
    with path.open("r", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def load_results_table() -> list:
    """24 rows of model, order, G, GD, SynF, SemF."""
    rows = _read_fixture("paper_tables.csv")
    return [{"model": r["model"], "order": int(r["order"]), "G": float(r["G"]),
             "GD": float(r["GD"]), "SynF": float(r["SynF"]), "SemF": float(r["SemF"])}
            for r in rows]


def load_single_task_table() -> dict:
    """{model: {task: {"single", "delta_order1", "delta_order2"}}}."""
    table: dict = {}
    for r in _read_fixture("paper_single_task.csv"):
        table.setdefault(r["model"], {})[r["task"]] = {
            "single": float(r["single"]),
            "delta_order1": float(r["delta_order1"]),
            "delta_order2": float(r["delta_order2"]),
        }
    return table


def fixture_gd(model: str, order: int) -> float:
    """GD recomputed from the single-task/delta fixture for orders 1 and 2.

    The delta rows store (continual diagonal - single) per task, so GD is
    the mean of the negated deltas over the sequence's tasks 2..N.
    """
    if order not in (1, 2):
        raise InputError("single/delta fixture covers orders 1 and 2 only")
    table = load_single_task_table()
    if model not in table:
        raise InputError(f"fixture has no model {model!r}")
    sequence = FIXTURE_ORDER1 if order == 1 else FIXTURE_ORDER2
    key = f"delta_order{order}"
    deltas = [table[model][task][key] for task in sequence[1:]]
    return float(np.mean([-d for d in deltas]))


def fixture_correlations() -> dict:
    rows = load_results_table()
    gd = [r["GD"] for r in rows]
    synf = [r["SynF"] for r in rows]
    semf = [r["SemF"] for r in rows]
    return {
        "gd_synf": pearson(gd, synf),
        "gd_semf": pearson(gd, semf),
        "synf_semf": pearson(synf, semf),
    }
