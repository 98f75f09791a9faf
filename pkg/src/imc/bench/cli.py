"""Command-line entry point: ``imc {generate,solve,bench,rank,rip,landscape}``.

Exit codes: 0 success, 1 configuration error, 2 a run failed,
3 an acceptance threshold was missed (only with ``--check``).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..problem import RecoveryMetric, load_problem, save_problem
from .config import SOLVERS, ConfigError, from_dict, load_config
from .experiments import (
    build_problem,
    cells,
    evaluate_acceptance,
    run_experiment,
    run_seed,
    run_solver,
    write_result,
)
from .presets import get_preset, preset_names

EXIT_OK, EXIT_CONFIG, EXIT_RUN_FAILED, EXIT_ACCEPTANCE = 0, 1, 2, 3
DEFAULT_PRESET = {"rank": "fig4-rank", "rip": "rip-probe", "landscape": "landscape-gd"}


def _load(args, kind=None):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    else:
        name = args.preset or DEFAULT_PRESET.get(kind)
        if name is None:
            raise ConfigError("give --config <path> or --preset <name>")
        cfg = get_preset(name, full_scale=getattr(args, "full_scale", False))
    if kind is not None and cfg.kind != kind:
        raise ConfigError(f"subcommand expects a config of kind {kind!r}, got {cfg.kind!r}")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        changes["num_seeds"] = args.seeds
    if getattr(args, "time_limit", None) is not None:
        changes["time_limit"] = args.time_limit
    if changes:
        doc = cfg.to_dict()
        doc.update(changes)
        cfg = from_dict(doc)
    return cfg


def _common(p, workers=True):
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--preset", help=f"shipped preset: {', '.join(preset_names())}")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--out", help="output directory")
    if workers:
        p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
        p.add_argument("--seeds", type=int, help="number of seeds (overrides the config)")
        p.add_argument("--check", action="store_true", help="exit 3 if an acceptance rule fails")
        p.add_argument("--full-scale", action="store_true", help="use the full-size variant of the preset")
        p.add_argument("--time-limit", type=float, help="per-run time limit in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imc", description="Inductive matrix completion experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write one problem instance (first cell of a config) as JSON")
    _common(g, workers=False)

    s = sub.add_parser("solve", help="solve one instance and write its trace")
    _common(s, workers=False)
    s.add_argument("--problem", help="problem JSON written by 'generate'")
    s.add_argument("--solver", choices=SOLVERS, default="gnimc")
    s.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="solver parameter (eta and lam are normalized); repeatable")

    for name, text in [
        ("bench", "run a recovery, noise, rank, RIP or landscape experiment"),
        ("rank", "rank-estimation experiment (default preset fig4-rank)"),
        ("rip", "empirical RIP probe (default preset rip-probe)"),
        ("landscape", "GD from random initializations (default preset landscape-gd)"),
    ]:
        _common(sub.add_parser(name, help=text))
    return parser


def _cmd_generate(args):
    cfg = _load(args)
    cell = cells(cfg)[0]
    problem = build_problem(cfg, cell, run_seed(cfg, 0))
    path = Path(args.out or "problem.json")
    if path.suffix != ".json":
        path = path / f"{cfg.name}-{run_seed(cfg, 0)}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_problem(problem, path)
    print(f"wrote {path} (|Omega| = {problem.samples.size}, mu = {problem.side.mu:.3f})")
    return EXIT_OK


def _parse_params(items):
    params = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        params[key] = json.loads(value)
    return params


def _cmd_solve(args):
    params = _parse_params(args.param)
    if args.problem:
        if args.config or args.preset:
            raise ConfigError("give --problem or a config/preset, not both")
        problem = load_problem(args.problem)
        cfg = from_dict({
            "name": Path(args.problem).stem, "kind": "recovery", "n1": problem.side.n1, "n2": problem.side.n2,
            "d1": problem.side.d1, "d2": problem.side.d2, "r": problem.r,
            "num_samples": [problem.samples.size], "solvers": [args.solver],
        })
    else:
        cfg = _load(args)
        problem = build_problem(cfg, cells(cfg)[0], run_seed(cfg, 0))
    if args.solver in ("gd", "rgd"):
        params.setdefault("eta", 0.1 / problem.kappa)
    from ..initialization import spectral_init

    _, report = run_solver(args.solver, params, problem, spectral_init(problem), replace(cfg, stop_at_target=False),
                           RecoveryMetric(problem))
    print(f"{args.solver}: {report.termination.value} after {report.iterations} iterations, "
          f"rel-RMSE {report.final_rel_rmse:.3e}, {report.elapsed:.3f} s")
    if args.out:
        path = Path(args.out) / f"{args.solver}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "rel_rmse", "rel_residual", "rel_change", "inner_iters", "elapsed_s"])
            for rec in report.records:
                writer.writerow([rec.index, rec.rel_rmse, rec.rel_residual, rec.rel_change, rec.inner_iters, rec.elapsed])
        print(f"wrote {path}")
    return EXIT_RUN_FAILED if report.termination.value == "InnerFailure" else EXIT_OK


def _print_summary(result):
    for row in result.summary:
        print("  " + ", ".join(f"{k}={_fmt(v)}" for k, v in row.items()))


def _fmt(v):
    return f"{v:.3g}" if isinstance(v, float) else str(v)


def _cmd_experiment(args, kind=None):
    cfg = _load(args, kind)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    out = args.out or cfg.output
    result = run_experiment(cfg, None, args.workers)
    if out:
        root = write_result(result, out)
        print(f"wrote {root}")
    print(f"{cfg.name} ({cfg.kind}), config {cfg.config_hash()}")
    _print_summary(result)
    code = EXIT_OK
    if result.failed_runs:
        print(f"{len(result.failed_runs)} run(s) failed", file=sys.stderr)
        code = EXIT_RUN_FAILED
    if args.check:
        for rule, passed, observed in evaluate_acceptance(result):
            print(f"[{'PASS' if passed else 'FAIL'}] {json.dumps(rule, sort_keys=True)} observed={observed}")
            if not passed:
                code = EXIT_ACCEPTANCE
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return _cmd_generate(args)
        if args.command == "solve":
            return _cmd_solve(args)
        kind = None if args.command == "bench" else args.command
        return _cmd_experiment(args, kind)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
