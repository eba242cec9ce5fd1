"""Experiment orchestration: config, pipeline stages, artifacts.

A run directory is owned by exactly one config (identified by a hash of
everything that determines results). Stages write their artifact files
and are skipped on re-runs whenever a valid artifact for the same config
hash already exists, so a run can resume after interruption or feed the
metrics/report stages alone.
"""

import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from .continual import (
    AccuracyMatrix,
    StrategyConfig,
    TrainConfig,
    train_sequence,
    train_single,
    write_buffer_manifest,
)
from .corpus import (
    SEMANTIC_TASKS,
    SYNTACTIC_TASKS,
    CorpusBuilder,
    GrammarSpec,
    SplitSizes,
    build_probing_tasks,
    order_sequence,
)
from .encoder import EncoderConfig, EncoderModel, load_checkpoint, save_checkpoint
from .errors import ArtifactError, ConfigurationError
from .probing import BASELINE_ID, ProbeConfig, ProbeGrid, probe_all
from .report import emit_probe_charts, render_report
from .seeding import derive_seed

PRESETS = ("desk", "paper-hyper")
SNAPSHOT_NAME = "config.snapshot"


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "desk"
    out_dir: str = "runs/latest"
    seeds: tuple = (0,)
    probe_runs: int = 1
    order: str | tuple = "order1"
    grammar: GrammarSpec = field(default_factory=GrammarSpec)
    sizes: SplitSizes = field(default_factory=SplitSizes)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; have {PRESETS}")
        if not self.seeds:
            raise ConfigurationError("seeds must not be empty")
        if self.probe_runs < 1:
            raise ConfigurationError("probe_runs must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["order"] = self.order if isinstance(self.order, str) else list(self.order)
        layers = d["probe"]["layers"]
        if layers is not None:
            d["probe"]["layers"] = list(layers)
        return d

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("out_dir")
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_SUBCONFIGS = {
    "grammar": GrammarSpec,
    "sizes": SplitSizes,
    "encoder": EncoderConfig,
    "strategy": StrategyConfig,
    "training": TrainConfig,
    "probe": ProbeConfig,
}

_PRESET_OVERRIDES = {
    "desk": {},
    # published training hyperparameters: lr 3e-5, linear schedule, batch 32,
    # 10 epochs with patience 20 (which cannot fire inside 10 epochs, kept
    # as stated), probing capped at 1200 per class and averaged over 5 runs
    "paper-hyper": {
        "training": {"lr": 3e-5, "epochs": 10, "patience": 20, "batch_size": 32},
        "probe": {"samples_per_class": 1200},
        "probe_runs": 5,
        "seeds": [0, 1, 2],
    },
}


def _build_dataclass(cls, data: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(
            f"unknown config key {path}.{sorted(unknown)[0]!r}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Strict construction: any unknown key is an error, and the named
    preset supplies defaults that explicit keys then override."""
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be an object")
    top_names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - top_names
    if unknown:
        raise ConfigurationError(f"unknown config key {sorted(unknown)[0]!r}")
    preset = data.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; have {PRESETS}")
    merged: dict = {"preset": preset}
    overrides = _PRESET_OVERRIDES[preset]
    for key in top_names - set(_SUBCONFIGS) - {"preset"}:
        if key in data:
            merged[key] = data[key]
        elif key in overrides:
            merged[key] = overrides[key]
    kwargs: dict = dict(merged)
    if "seeds" in kwargs:
        kwargs["seeds"] = tuple(kwargs["seeds"])
    if "order" in kwargs and not isinstance(kwargs["order"], str):
        kwargs["order"] = tuple(kwargs["order"])
    for key, cls in _SUBCONFIGS.items():
        sub = dict(overrides.get(key, {}))
        user = data.get(key, {})
        if not isinstance(user, dict):
            raise ConfigurationError(f"config key {key!r} must be an object")
        sub.update(user)
        if key == "probe" and isinstance(sub.get("layers"), list):
            sub["layers"] = tuple(sub["layers"])
        kwargs[key] = _build_dataclass(cls, sub, key)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path!r} is not valid JSON: {e}")
    return config_from_dict(data)


@dataclass
class RunArtifacts:
    run_dir: str
    config_hash: str
    files: dict

    def path(self, name: str) -> str:
        return self.files[name]

    def validate(self) -> None:
        for name, path in self.files.items():
            if not os.path.exists(path):
                raise ArtifactError(f"artifact {name} missing at {path}")


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def _seed_dir(run_dir: str, cfg: ExperimentConfig, seed: int) -> str:
    if len(cfg.seeds) == 1:
        return run_dir
    return os.path.join(run_dir, f"seed_{seed}")


def build_tasks(cfg: ExperimentConfig):
    """(sequence tasks in order, probing tasks, corpus builder)."""
    builder = CorpusBuilder(cfg.grammar)
    order = cfg.order if isinstance(cfg.order, str) else list(cfg.order)
    if isinstance(order, str):
        if order not in corpus_mod.ORDER_PRESETS:
            raise ConfigurationError(
                f"unknown order preset {order!r}; have {sorted(corpus_mod.ORDER_PRESETS)}")
        wanted = corpus_mod.ORDER_PRESETS[order]
    else:
        wanted = order
    continual = corpus_mod.build_continual_tasks(builder, cfg.sizes)
    have = {t.task_id for t in continual}
    if any(name not in have for name in wanted):
        continual += corpus_mod.build_extra_pair_tasks(builder, cfg.sizes)
    seq = order_sequence(continual, order)
    probing = build_probing_tasks(builder, cfg.probe.samples_per_class)
    return seq, probing, builder


def _stage_valid(path: str) -> bool:
    return os.path.exists(path) and os.path.getsize(path) > 0


def _write_single_task_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task_id", "seed", "accuracy"])
        for task_id, seed, acc in rows:
            writer.writerow([task_id, seed, repr(float(acc))])


def read_single_task_csv(path) -> dict:
    """{seed: {task_id: accuracy}}."""
    with open(path, "r", newline="") as f:
        rows = list(csv.DictReader(f))
    out: dict = {}
    for r in rows:
        out.setdefault(int(r["seed"]), {})[r["task_id"]] = float(r["accuracy"])
    return out


def _checkpoint_paths(seed_dir: str, n_tasks: int) -> dict:
    ckpt_dir = os.path.join(seed_dir, "checkpoints")
    paths = {BASELINE_ID: os.path.join(ckpt_dir, "initial.ckpt")}
    for m in range(1, n_tasks + 1):
        paths[str(m)] = os.path.join(ckpt_dir, f"task_{m}.ckpt")
    return paths


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    """Full pipeline: corpus, per-seed baselines + continual training +
    probing, then metrics, report, and plots. Stages already on disk for
    this config hash are reused instead of recomputed."""
    run_dir = cfg.out_dir
    os.makedirs(run_dir, exist_ok=True)
    cfg_hash = cfg.config_hash()
    snapshot_path = os.path.join(run_dir, SNAPSHOT_NAME)
    snapshot = {"config": cfg.to_dict(), "hash": cfg_hash}
    if os.path.exists(snapshot_path):
        with open(snapshot_path) as f:
            existing = json.load(f)
        if existing.get("hash") != cfg_hash:
            raise ConfigurationError(
                f"run directory {run_dir!r} belongs to config {existing.get('hash')}; "
                f"this config is {cfg_hash}")
    else:
        with open(snapshot_path, "w") as f:
            json.dump(snapshot, f, indent=2, sort_keys=True)
    failed_marker = os.path.join(run_dir, "FAILED")
    if os.path.exists(failed_marker):
        os.remove(failed_marker)

    stage = "corpus"
    try:
        seq, probing_tasks, builder = build_tasks(cfg)
        n_tasks = len(seq)
        for seed in cfg.seeds:
            seed_dir = _seed_dir(run_dir, cfg, seed)
            os.makedirs(seed_dir, exist_ok=True)
            ckpt_paths = _checkpoint_paths(seed_dir, n_tasks)

            stage = "baselines"
            single_path = os.path.join(seed_dir, "single_task.csv")
            if not _stage_valid(single_path):
                rows = []
                for task in seq.tasks:
                    acc = train_single(cfg.encoder, task, cfg.training, seed=seed)
                    rows.append((task.task_id, seed, acc))
                _write_single_task_csv(single_path, rows)

            stage = "continual"
            matrix_path = os.path.join(seed_dir, "accuracy_matrix.csv")
            have_ckpts = all(_stage_valid(p) for p in ckpt_paths.values())
            if not (_stage_valid(matrix_path) and have_ckpts):
                os.makedirs(os.path.join(seed_dir, "checkpoints"), exist_ok=True)
                model = EncoderModel(cfg.encoder, seed=seed)
                save_checkpoint(model, {}, ckpt_paths[BASELINE_ID])
                result = train_sequence(model, seq, cfg.strategy, cfg.training,
                                        seed=seed)
                result.matrix.to_csv(matrix_path)
                for m, state in enumerate(result.checkpoint_states, start=1):
                    model.load_state(state["params"])
                    for task_id, hs in state["heads"].items():
                        np.copyto(result.heads[task_id].w.data, hs["w"])
                        np.copyto(result.heads[task_id].b.data, hs["b"])
                    save_checkpoint(model, result.heads, ckpt_paths[str(m)])
                write_buffer_manifest(result.buffer,
                                      os.path.join(seed_dir, "buffer_manifest.json"))

            stage = "probing"
            probes_path = os.path.join(seed_dir, "probes.csv")
            if not _stage_valid(probes_path):
                probe_stage(seed_dir, cfg, seed, probing_tasks)

        stage = "aggregate"
        _merge_seed_artifacts(run_dir, cfg)

        stage = "metrics"
        recompute_metrics(run_dir, cfg)

        stage = "report"
        emit_report(run_dir, cfg)
    except Exception as e:
        with open(failed_marker, "w") as f:
            f.write(f"stage: {stage}\nerror: {e}\n")
        raise StageFailure(f"stage {stage!r} failed: {e}") from e

    files = {
        "config.snapshot": snapshot_path,
        "accuracy_matrix.csv": os.path.join(run_dir, "accuracy_matrix.csv"),
        "single_task.csv": os.path.join(run_dir, "single_task.csv"),
        "probes.csv": os.path.join(run_dir, "probes.csv"),
        "metrics.json": os.path.join(run_dir, "metrics.json"),
        "report.md": os.path.join(run_dir, "report.md"),
    }
    artifacts = RunArtifacts(run_dir=run_dir, config_hash=cfg_hash, files=files)
    artifacts.validate()
    return artifacts


def probe_stage(seed_dir: str, cfg: ExperimentConfig, seed: int,
                probing_tasks) -> None:
    """Probe the stored checkpoints of one seed; writes probes.csv."""
    ckpt_paths = _checkpoint_paths(seed_dir, _sequence_length(cfg))
    states = {}
    for ckpt_id, path in ckpt_paths.items():
        loaded, _ = load_checkpoint(_require(path, os.path.basename(path)))
        states[ckpt_id] = loaded.state_dict()
    cache_dir = os.path.join(seed_dir, "cache")
    rows = []
    for run_idx in range(cfg.probe_runs):
        probe_seed = derive_seed(seed, f"probe-run:{run_idx}")
        grid = probe_all(states, cfg.encoder, probing_tasks, cfg.probe,
                         seed=probe_seed, cache_dir=cache_dir)
        for (ckpt, task, layer), acc in sorted(grid.values.items()):
            rows.append([ckpt, task, grid.categories[task], layer,
                         repr(acc), probe_seed])
    with open(os.path.join(seed_dir, "probes.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["checkpoint_id", "task_id", "category", "layer",
                         "accuracy", "seed"])
        writer.writerows(rows)


def _sequence_length(cfg: ExperimentConfig) -> int:
    order = cfg.order
    if isinstance(order, str):
        return len(corpus_mod.ORDER_PRESETS[order])
    return len(order)


def config_from_snapshot(run_dir: str) -> ExperimentConfig:
    snapshot_path = _require(os.path.join(run_dir, SNAPSHOT_NAME), SNAPSHOT_NAME)
    with open(snapshot_path) as f:
        snapshot = json.load(f)
    data = snapshot["config"]
    data["out_dir"] = run_dir
    return config_from_dict(data)


def _merge_seed_artifacts(run_dir: str, cfg: ExperimentConfig) -> None:
    """Top-level probes.csv (all seeds), single_task.csv, and the
    seed-averaged accuracy matrix."""
    if len(cfg.seeds) == 1:
        return  # single-seed runs already have everything at top level
    header = None
    all_rows = []
    for seed in cfg.seeds:
        with open(os.path.join(_seed_dir(run_dir, cfg, seed), "probes.csv")) as f:
            rows = list(csv.reader(f))
        header = rows[0]
        all_rows.extend(rows[1:])
    with open(os.path.join(run_dir, "probes.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(all_rows)

    single_rows = []
    for seed in cfg.seeds:
        per = read_single_task_csv(
            os.path.join(_seed_dir(run_dir, cfg, seed), "single_task.csv"))
        for task_id, acc in per[seed].items():
            single_rows.append((task_id, seed, acc))
    _write_single_task_csv(os.path.join(run_dir, "single_task.csv"), single_rows)

    matrices = []
    for seed in cfg.seeds:
        matrices.append(AccuracyMatrix.from_csv(
            os.path.join(_seed_dir(run_dir, cfg, seed), "accuracy_matrix.csv")))
    mean = AccuracyMatrix(task_ids=matrices[0].task_ids,
                          values=np.mean([m.values for m in matrices], axis=0))
    mean.to_csv(os.path.join(run_dir, "accuracy_matrix.csv"))


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise ArtifactError(f"missing input {what} at {path}")
    return path


def recompute_metrics(run_dir: str, cfg: ExperimentConfig) -> dict:
    """Build metrics.json strictly from the persisted CSV artifacts."""
    per_seed = {}
    for seed in cfg.seeds:
        seed_dir = _seed_dir(run_dir, cfg, seed)
        matrix = AccuracyMatrix.from_csv(
            _require(os.path.join(seed_dir, "accuracy_matrix.csv"),
                     "accuracy_matrix.csv"))
        singles = read_single_task_csv(
            _require(os.path.join(seed_dir, "single_task.csv"), "single_task.csv"))
        grid, _ = ProbeGrid.from_csv(
            _require(os.path.join(seed_dir, "probes.csv"), "probes.csv"))
        report = metrics_mod.assemble_report(
            matrix, singles[seed], grid, SYNTACTIC_TASKS, SEMANTIC_TASKS,
            provenance={"config_hash": cfg.config_hash(), "seed": seed,
                        "order": cfg.to_dict()["order"],
                        "strategy": cfg.strategy.variant})
        per_seed[seed] = report

    merged_grid, _ = ProbeGrid.from_csv(
        _require(os.path.join(run_dir, "probes.csv"), "probes.csv"))
    aggregate = {
        "g": float(np.mean([r.g for r in per_seed.values()])),
        "gd": float(np.mean([r.gd for r in per_seed.values()])),
        "synf": float(np.mean([r.synf for r in per_seed.values()])),
        "semf": float(np.mean([r.semf for r in per_seed.values()])),
        "pearson": None,
        "per_layer": metrics_mod.per_layer_curves(merged_grid),
        "provenance": {"config_hash": cfg.config_hash(),
                       "seeds": list(cfg.seeds),
                       "order": cfg.to_dict()["order"],
                       "strategy": cfg.strategy.variant},
    }
    points = [(r.gd, r.synf, r.semf) for r in per_seed.values()]
    if len(points) >= 3:
        gd_v, synf_v, semf_v = (list(col) for col in zip(*points))
        aggregate["pearson"] = {
            "gd_synf": metrics_mod.pearson(gd_v, synf_v),
            "gd_semf": metrics_mod.pearson(gd_v, semf_v),
            "synf_semf": metrics_mod.pearson(synf_v, semf_v),
        }
    payload = {
        "per_seed": {str(s): r.to_dict() for s, r in per_seed.items()},
        "aggregate": aggregate,
    }
    with open(os.path.join(run_dir, "metrics.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return payload


def emit_report(run_dir: str, cfg: ExperimentConfig) -> list:
    """report.md plus plots/<task>.svg from metrics.json and probes.csv."""
    metrics_path = _require(os.path.join(run_dir, "metrics.json"), "metrics.json")
    with open(metrics_path) as f:
        payload = json.load(f)
    aggregate = payload["aggregate"]
    plots = emit_probe_charts(aggregate["per_layer"],
                              os.path.join(run_dir, "plots"))
    matrices = {}
    baselines = {}
    for seed in cfg.seeds:
        seed_dir = _seed_dir(run_dir, cfg, seed)
        matrices[seed] = AccuracyMatrix.from_csv(
            _require(os.path.join(seed_dir, "accuracy_matrix.csv"),
                     "accuracy_matrix.csv"))
        baselines[seed] = read_single_task_csv(
            os.path.join(seed_dir, "single_task.csv"))[seed]
    per_seed = {int(s): r for s, r in payload["per_seed"].items()}
    order_name = cfg.order if isinstance(cfg.order, str) else "->".join(cfg.order)
    text = render_report(order_name, cfg.strategy.variant, per_seed, aggregate,
                         matrices, baselines, plots,
                         caveats=[metrics_mod.CORRELATION_CAVEAT]
                         if aggregate.get("pearson") else [])
    with open(os.path.join(run_dir, "report.md"), "w") as f:
        f.write(text)
    return plots
