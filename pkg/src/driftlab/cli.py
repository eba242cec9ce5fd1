"""Command-line entry point.

Subcommands: gen, run, probe, metrics, report, project, fixtures.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import json
import os
import sys

from . import metrics as metrics_mod
from .corpus import export_task
from .encoder import load_checkpoint
from .errors import ArtifactError, DriftlabError
from .harness import (
    PRESETS,
    build_tasks,
    config_from_dict,
    config_from_snapshot,
    emit_report,
    probe_stage,
    recompute_metrics,
    run_experiment,
    _merge_seed_artifacts,
    _require,
    _seed_dir,
)
from .projection import export_projection


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="driftlab",
                     description="continual-learning drift laboratory")
    parser.add_argument("--config", metavar="PATH",
                        help="JSON experiment config file")
    parser.add_argument("--seed", type=int, metavar="INT",
                        help="override the config's seed list with one seed")
    parser.add_argument("--out", metavar="DIR", help="run directory")
    parser.add_argument("--preset", choices=PRESETS,
                        help="configuration preset")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.add_parser("gen", help="generate and export the corpus only")
    sub.add_parser("run", help="run the full pipeline")
    sub.add_parser("probe", help="probe existing checkpoints")
    sub.add_parser("metrics", help="recompute metrics from artifacts")
    sub.add_parser("report", help="emit report.md and plots from artifacts")
    proj = sub.add_parser("project", help="export a 2-D PCA of pooled "
                                          "representations for two checkpoints")
    proj.add_argument("--a", metavar="CKPT", default=None,
                      help="first checkpoint id or path (default: task_1)")
    proj.add_argument("--b", metavar="CKPT", default=None,
                      help="second checkpoint id or path (default: last task)")
    proj.add_argument("--task", metavar="NAME", default=None,
                      help="dataset task id (default: first task in the sequence)")
    proj.add_argument("--k", type=int, default=2, help="number of components")
    sub.add_parser("fixtures", help="check metric code against the shipped "
                                    "published-results tables")
    return parser


def _resolve_config(args):
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            data = json.load(f)
    else:
        data = {}
    if args.preset:
        data["preset"] = args.preset
    if args.seed is not None:
        data["seeds"] = [args.seed]
    if args.out:
        data["out_dir"] = args.out
    return config_from_dict(data)


def _run_dir(args) -> str:
    if args.out:
        return args.out
    raise ArtifactError("this command needs --out pointing at a run directory")


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    seq, probing_tasks, builder = build_tasks(cfg)
    out = os.path.join(cfg.out_dir, "corpus")
    for task in list(seq.tasks) + probing_tasks:
        export_task(task, builder.vocab, os.path.join(out, task.task_id))
    print(f"exported {len(seq.tasks)} continual and {len(probing_tasks)} "
          f"probing tasks under {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    artifacts = run_experiment(cfg)
    with open(artifacts.path("metrics.json")) as f:
        aggregate = json.load(f)["aggregate"]
    print(f"run complete: {artifacts.run_dir}")
    print(f"  G    {aggregate['g']:.2f}")
    print(f"  GD   {aggregate['gd']:.2f}")
    print(f"  SynF {aggregate['synf']:.2f}")
    print(f"  SemF {aggregate['semf']:.2f}")
    return 0


def cmd_probe(args) -> int:
    run_dir = _run_dir(args)
    cfg = config_from_snapshot(run_dir)
    _, probing_tasks, _ = build_tasks(cfg)
    for seed in cfg.seeds:
        probe_stage(_seed_dir(run_dir, cfg, seed), cfg, seed, probing_tasks)
    _merge_seed_artifacts(run_dir, cfg)
    print(f"probes written under {run_dir}")
    return 0


def cmd_metrics(args) -> int:
    run_dir = _run_dir(args)
    cfg = config_from_snapshot(run_dir)
    payload = recompute_metrics(run_dir, cfg)
    aggregate = payload["aggregate"]
    print(f"metrics recomputed: {os.path.join(run_dir, 'metrics.json')}")
    for key in ("g", "gd", "synf", "semf"):
        print(f"  {key.upper():4s} {aggregate[key]:.2f}")
    return 0


def cmd_report(args) -> int:
    run_dir = _run_dir(args)
    cfg = config_from_snapshot(run_dir)
    plots = emit_report(run_dir, cfg)
    print(f"report written: {os.path.join(run_dir, 'report.md')} "
          f"(+{len(plots)} charts)")
    return 0


def cmd_project(args) -> int:
    run_dir = _run_dir(args)
    cfg = config_from_snapshot(run_dir)
    seq, _, _ = build_tasks(cfg)
    seed_dir = _seed_dir(run_dir, cfg, cfg.seeds[0])
    n = len(seq)

    def ckpt_path(spec_str, default_tag):
        tag = spec_str or default_tag
        if os.path.sep in str(tag) or str(tag).endswith(".ckpt"):
            return tag
        name = "initial.ckpt" if tag == "*" else f"task_{tag}.ckpt"
        return os.path.join(seed_dir, "checkpoints", name)

    path_a = _require(ckpt_path(args.a, "1"), "checkpoint a")
    path_b = _require(ckpt_path(args.b, str(n)), "checkpoint b")
    model_a, _ = load_checkpoint(path_a)
    model_b, _ = load_checkpoint(path_b)
    task_id = args.task or seq.task_ids[0]
    by_id = {t.task_id: t for t in seq.tasks}
    if task_id not in by_id:
        raise ArtifactError(f"task {task_id!r} is not part of this run's sequence")
    out_path = os.path.join(run_dir, "projection.csv")
    info = export_projection(model_a.state_dict(), model_b.state_dict(),
                             cfg.encoder, by_id[task_id].test, out_path,
                             k=args.k, hyper=cfg.training)
    print(f"projection written: {out_path}")
    print(f"  component variances: "
          + ", ".join(f"{v:.4f}" for v in info["projected_variance"]))
    return 0


def cmd_fixtures(args) -> int:
    table = metrics_mod.load_results_table()
    reported_gd = {(r["model"], r["order"]): r["GD"] for r in table}
    ok = True
    for model in ("bert", "distilbert", "albert", "roberta"):
        for order in (1, 2):
            computed = metrics_mod.fixture_gd(model, order)
            reported = reported_gd[(model, order)]
            match = abs(computed - reported) <= 0.005
            ok &= match
            print(f"GD {model} order{order}: computed {computed:.4f} "
                  f"reported {reported:.2f} "
                  f"[{'ok' if match else 'MISMATCH'} at +/-0.005]")
    correlations = metrics_mod.fixture_correlations()
    for key, computed in correlations.items():
        reported = metrics_mod.REPORTED_CORRELATIONS[key]
        match = abs(computed - reported) <= 0.10
        ok &= match
        print(f"pearson {key}: computed {computed:.4f} reported {reported:.2f} "
              f"[{'ok' if match else 'MISMATCH'} at +/-0.10]")
    print(f"note: {metrics_mod.CORRELATION_CAVEAT}")
    if not ok:
        raise ArtifactError("fixture values diverge from the shipped tables")
    return 0


_COMMANDS = {
    "gen": cmd_gen, "run": cmd_run, "probe": cmd_probe, "metrics": cmd_metrics,
    "report": cmd_report, "project": cmd_project, "fixtures": cmd_fixtures,
}


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("driftlab: error: a command is required", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except DriftlabError as e:
        print(f"driftlab: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"driftlab: {e}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(cli())
