"""Experiment runners: recovery sweeps, noise sweeps, rank estimation, RIP probes and the GD landscape test.

Every run is rebuilt from ``(config, cell, seed)`` alone, so tasks can be
farmed out to worker processes and the emitted CSVs do not depend on the
worker count. Columns ending in ``_s`` hold wall-clock times and are the
only nondeterministic output.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import baselines, gnimc
from ..initialization import random_init, spectral_init
from ..problem import Problem, RecoveryMetric, generate, observe, sample_omega, samples_for_ratio, with_samples
from ..rankest import estimate_rank, true_gaps
from ..sensing import SensingOp, rip_probe
from .config import ExperimentConfig, SolverSpec

MISSING_SOLVERS = "Maxide, MPPF and ScaledGD are not implemented; only GNIMC, AltMin, GD and RGD are compared."
DEFAULT_MAX_ITERS = {"gnimc": 100, "altmin": 1000, "gd": 100000, "rgd": 100000}
TIME_SUFFIX = "_s"

RUN_COLUMNS = [
    "preset", "config_hash", "kind", "seed", "solver", "params", "selected", "kappa", "sample_rule",
    "sample_value", "num_samples", "noise_sigma", "noise_target", "final_rel_rmse", "reached_target",
    "iters_to_target", "outer_iterations", "inner_iterations", "termination", "message",
    "wall_time_s", "time_to_target_s",
]
TRACE_COLUMNS = [
    "kappa", "sample_value", "noise_sigma", "params", "iteration", "rel_rmse", "rel_residual",
    "rel_change", "inner_iters", "elapsed_s",
]


@dataclass(frozen=True)
class Cell:
    kappa: float
    sample_rule: str
    sample_value: float
    noise_sigma: float


def cells(cfg: ExperimentConfig) -> list[Cell]:
    rule, values = cfg.sample_axis()
    return [
        Cell(float(k), rule, float(v), float(s))
        for k in cfg.kappa for v in values for s in cfg.noise_sigma
    ]


def run_seed(cfg: ExperimentConfig, index: int) -> int:
    return cfg.seed + index


def stream_seeds(seed: int) -> dict[str, int]:
    """Independent integer seeds for the generator, sampler, noise and random init."""
    state = np.random.SeedSequence(seed).generate_state(4, dtype=np.uint32)
    return dict(zip(("problem", "omega", "noise", "init"), (int(s) for s in state)))


def num_samples_for(cfg: ExperimentConfig, cell: Cell, problem: Problem) -> int:
    n1, n2, d1, d2 = problem.dims
    if cell.sample_rule == "rho":
        m = samples_for_ratio(d1, d2, problem.r, cell.sample_value)
    elif cell.sample_rule == "num_samples":
        m = int(cell.sample_value)
    elif cell.sample_rule == "sample_rate":
        m = int(round(cell.sample_value * n1 * n2))
    else:
        # constant * mu^2 d1 d2 log n, capped at the full grid
        m = math.ceil(cell.sample_value * problem.side.mu**2 * d1 * d2 * math.log(max(n1, n2)))
    return max(1, min(m, n1 * n2))


def build_problem(cfg: ExperimentConfig, cell: Cell, seed: int) -> Problem:
    seeds = stream_seeds(seed)
    if cfg.spectrum is not None:
        problem = generate(cfg.n1, cfg.n2, cfg.d1, cfg.d2, cfg.r, seed=seeds["problem"], spectrum=np.asarray(cfg.spectrum))
    else:
        problem = generate(cfg.n1, cfg.n2, cfg.d1, cfg.d2, cfg.r, cell.kappa, seeds["problem"])
    m = num_samples_for(cfg, cell, problem)
    problem = with_samples(problem, sample_omega(cfg.n1, cfg.n2, m, seeds["omega"]))
    return observe(problem, cell.noise_sigma, seeds["noise"], cfg.noise_target)


_CACHE: dict = {}


def _instance(cfg: ExperimentConfig, cell: Cell, seed: int):
    key = (cfg.config_hash(), cell, seed)
    if key not in _CACHE:
        if len(_CACHE) > 8:
            _CACHE.clear()
        problem = build_problem(cfg, cell, seed)
        if cfg.init == "random":
            init = random_init(problem, stream_seeds(seed)["init"])
        else:
            init = spectral_init(problem)
        _CACHE[key] = (problem, init)
    return _CACHE[key]


def grid_points(spec: SolverSpec, cell: Cell) -> list[dict]:
    keys = sorted(spec.grid)
    axes = []
    for key in keys:
        values = spec.grid[key]
        if key == "eta" and values == "auto":
            values = baselines.step_grid(cell.kappa).tolist()
        axes.append(values)
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]


def run_solver(name: str, params: dict, problem: Problem, init, cfg: ExperimentConfig, truth=None):
    """Dispatch one solver; ``params`` are the merged fixed and grid parameters."""
    params = dict(params)
    common = {
        "max_outer_iters": params.pop("max_outer_iters", DEFAULT_MAX_ITERS[name]),
        "time_limit": cfg.time_limit,
        "target_rel_rmse": cfg.target_rel_rmse if cfg.stop_at_target else None,
    }
    if name == "gnimc":
        return gnimc.solve(problem, init, gnimc.GnimcConfig(**common, **params), truth)
    if name == "altmin":
        return baselines.altmin_solve(problem, init, gnimc.GnimcConfig(**common, **params), truth)
    step, lam = baselines.normalized_step(problem, params.pop("eta"), params.pop("lam", 0.0))
    config = gnimc.GnimcConfig(**common)
    if name == "gd":
        return baselines.gd_solve(problem, init, config, step, truth)
    return baselines.rgd_solve(problem, init, config, step, lam, truth)


def _params_text(params: dict) -> str:
    return json.dumps(params, sort_keys=True, separators=(",", ":"))


def _run_task(task):
    cfg, cell, index, solver_index, point = task
    spec = cfg.solvers[solver_index]
    seed = run_seed(cfg, index)
    problem, init = _instance(cfg, cell, seed)
    params = {**spec.params, **point}
    _, report = run_solver(spec.name, params, problem, init, cfg, RecoveryMetric(problem))
    hit = report.first_reaching(cfg.target_rel_rmse)
    record = {
        "preset": cfg.name,
        "config_hash": cfg.config_hash(),
        "kind": cfg.kind,
        "seed": seed,
        "solver": spec.name,
        "params": _params_text(point),
        "selected": True,
        "kappa": cell.kappa,
        "sample_rule": cell.sample_rule,
        "sample_value": cell.sample_value,
        "num_samples": problem.samples.size,
        "noise_sigma": cell.noise_sigma,
        "noise_target": cfg.noise_target,
        "final_rel_rmse": report.final_rel_rmse,
        "reached_target": hit is not None,
        "iters_to_target": hit.index if hit else "",
        "outer_iterations": report.iterations,
        "inner_iterations": sum(rec.inner_iters for rec in report.records),
        "termination": report.termination.value,
        "message": report.message,
        "wall_time_s": report.elapsed,
        "time_to_target_s": hit.elapsed if hit else "",
    }
    trace = [
        [cell.kappa, cell.sample_value, cell.noise_sigma, record["params"], rec.index, rec.rel_rmse,
         rec.rel_residual, rec.rel_change, rec.inner_iters, rec.elapsed]
        for rec in report.records
    ]
    return record, trace


def _map(tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _selection_key(records, target):
    finals = [r["final_rel_rmse"] if r["final_rel_rmse"] is not None else np.inf for r in records]
    finals = [f if np.isfinite(f) else np.inf for f in finals]
    iters = [r["iters_to_target"] if r["iters_to_target"] != "" else np.inf for r in records]
    return (max(float(np.median(finals)), target), float(np.median(iters)))


def _run_solvers(cfg: ExperimentConfig, workers: int):
    """Two passes: grid sweeps on the tuning seeds, then the selected point on the rest."""
    grid = {}
    tasks = []
    for cell in cells(cfg):
        for si, spec in enumerate(cfg.solvers):
            points = grid_points(spec, cell) if spec.grid else [{}]
            grid[(cell, si)] = points
            n_tune = min(spec.tune_seeds or cfg.num_seeds, cfg.num_seeds) if len(points) > 1 else cfg.num_seeds
            tasks += [(cfg, cell, i, si, pt) for i in range(n_tune) for pt in points]
    results = _map(tasks, workers)

    chosen = {}
    by_point = {}
    for task, res in zip(tasks, results):
        by_point.setdefault((task[1], task[3], _params_text(task[4])), []).append(res[0])
    for (cell, si), points in grid.items():
        keys = [_selection_key(by_point[(cell, si, _params_text(pt))], cfg.target_rel_rmse) for pt in points]
        chosen[(cell, si)] = points[min(range(len(points)), key=lambda j: (keys[j], j))]

    rest = []
    for (cell, si), pt in chosen.items():
        spec = cfg.solvers[si]
        n_tune = min(spec.tune_seeds or cfg.num_seeds, cfg.num_seeds) if len(grid[(cell, si)]) > 1 else cfg.num_seeds
        rest += [(cfg, cell, i, si, pt) for i in range(n_tune, cfg.num_seeds)]
    tasks += rest
    results += _map(rest, workers)

    for task, (record, _) in zip(tasks, results):
        record["selected"] = _params_text(chosen[(task[1], task[3])]) == record["params"]
    order = {cell: j for j, cell in enumerate(cells(cfg))}
    paired = sorted(zip(tasks, results), key=lambda tr: (order[tr[0][1]], tr[0][3], tr[0][2], tr[1][0]["params"]))
    return [tr[1] for tr in paired]


def _median(values):
    values = [v for v in values if v != "" and v is not None]
    return float(np.median(values)) if values else math.inf


def summarize_runs(records: list[dict], target: float) -> list[dict]:
    """Per (cell, solver) statistics over the selected hyperparameter point."""
    groups = {}
    for rec in records:
        if rec["selected"]:
            key = (rec["kappa"], rec["sample_rule"], rec["sample_value"], rec["noise_sigma"], rec["solver"])
            groups.setdefault(key, []).append(rec)
    rows = []
    for (kappa, rule, value, sigma, solver), recs in groups.items():
        finals = [r["final_rel_rmse"] if r["final_rel_rmse"] is not None else math.inf for r in recs]
        iters = [r["iters_to_target"] if r["iters_to_target"] != "" else math.inf for r in recs]
        rows.append({
            "solver": solver,
            "params": recs[0]["params"],
            "kappa": kappa,
            rule: value,
            "noise_sigma": sigma,
            "runs": len(recs),
            "success_fraction": sum(f <= target for f in finals) / len(recs),
            "median_final_rel_rmse": float(np.median(finals)),
            "median_iters_to_target": float(np.median(iters)),
            "median_outer_iterations": float(np.median([r["outer_iterations"] for r in recs])),
            "failures": sum(r["termination"] == gnimc.Termination.INNER_FAILURE.value for r in recs),
            "median_wall_time_s": _median([r["wall_time_s"] for r in recs]),
            "median_time_to_target_s": _median([r["time_to_target_s"] if r["reached_target"] else math.inf for r in recs]),
        })
    return rows


def noise_slope(summary: list[dict]) -> list[dict]:
    """Log-log least-squares slope of median final rel-RMSE against sigma > 0, per solver and kappa."""
    out = []
    keys = sorted({(row["solver"], row["kappa"]) for row in summary})
    for solver, kappa in keys:
        pts = sorted(
            (row["noise_sigma"], row["median_final_rel_rmse"])
            for row in summary
            if row["solver"] == solver and row["kappa"] == kappa and row["noise_sigma"] > 0
        )
        pts = [(s, e) for s, e in pts if 0 < e < math.inf]
        slope = float(np.polyfit(np.log([p[0] for p in pts]), np.log([p[1] for p in pts]), 1)[0]) if len(pts) >= 2 else math.nan
        out.append({"solver": solver, "kappa": kappa, "noise_sigma": "fit", "slope": slope, "points": len(pts)})
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[dict]
    summary: list[dict]
    traces: dict

    @property
    def failed_runs(self) -> list[dict]:
        return [
            r for r in self.records
            if r.get("selected", True) and r.get("termination") == gnimc.Termination.INNER_FAILURE.value
        ]


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, workers: int = 1) -> ExperimentResult:
    """Run any experiment kind and optionally write its CSVs under ``out/<preset>/``."""
    if cfg.kind == "rank":
        result = rank_experiment(cfg)
    elif cfg.kind == "rip":
        result = rip_experiment(cfg)
    else:
        pairs = _run_solvers(cfg, workers)
        records = [p[0] for p in pairs]
        traces = {}
        for record, trace in pairs:
            traces.setdefault((record["solver"], record["seed"]), []).extend(trace)
        summary = summarize_runs(records, cfg.target_rel_rmse)
        if cfg.kind == "noise":
            summary += noise_slope(summary)
        result = ExperimentResult(cfg, records, summary, traces)
    if out is not None:
        write_result(result, out)
    return result


def noise_sweep(cfg: ExperimentConfig, out=None, workers: int = 1) -> ExperimentResult:
    if cfg.kind != "noise":
        raise ValueError("noise_sweep needs a config of kind 'noise'")
    if 0.0 not in cfg.noise_sigma:
        raise ValueError("noise_sweep needs the noiseless baseline sigma = 0")
    return run_experiment(cfg, out, workers)


def landscape(cfg: ExperimentConfig, out=None, workers: int = 1) -> ExperimentResult:
    if cfg.kind != "landscape":
        raise ValueError("landscape needs a config of kind 'landscape'")
    return run_experiment(cfg, out, workers)


def _d_label(d):
    return "default" if d is None else float(d)


def rank_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Estimated vs true spectral gaps per seed and D, plus the rank-accuracy summary."""
    rows = []
    per_seed = []
    for cell in cells(cfg):
        for index in range(cfg.num_seeds):
            seed = run_seed(cfg, index)
            problem = build_problem(cfg, cell, seed)
            k = min(cfg.d1, cfg.d2)
            exact = np.zeros(k)
            exact[: problem.r] = problem.spectrum
            # diagnostic: back-projection error in spectral norm
            x_hat = (problem.a_rows * (problem.y / problem.samples.p)[:, None]).T @ problem.b_rows
            eps = float(np.linalg.norm(x_hat - problem.m_star, 2))
            for d in cfg.d_const:
                est = estimate_rank(problem.side, problem.samples, problem.y, d)
                g = true_gaps(exact, est.d_const)
                r_true = int(np.argmax(g)) + 1
                floor = float(np.min(exact[1:] + est.d_const * exact[0] * np.sqrt(np.arange(1, k))))
                per_seed.append({
                    "seed": seed, "sample_value": cell.sample_value, "d_const": _d_label(d),
                    "d_value": est.d_const, "r_hat": est.r_hat, "r_true": r_true, "eps": eps, "delta": floor,
                })
                for i, (gh, gt) in enumerate(zip(est.gaps, g), start=1):
                    rows.append({
                        "preset": cfg.name, "seed": seed, "sample_value": cell.sample_value,
                        "num_samples": problem.samples.size, "d_const": _d_label(d), "d_value": est.d_const,
                        "i": i, "sigma_hat": est.sigma_hat[i - 1], "sigma_true": exact[i - 1],
                        "gap_hat": gh, "gap_true": gt, "ratio": gh / gt if gt > 0 else math.nan,
                        "r_hat": est.r_hat,
                    })
    summary = []
    for d in cfg.d_const:
        recs = [r for r in per_seed if r["d_const"] == _d_label(d)]
        summary.append({
            "d_const": _d_label(d),
            "runs": len(recs),
            "fraction_correct": sum(r["r_hat"] == r["r_true"] for r in recs) / len(recs),
            "r_hat_counts": json.dumps(dict(sorted(_count(r["r_hat"] for r in recs).items()))),
            "median_eps": float(np.median([r["eps"] for r in recs])),
            "median_delta": float(np.median([r["delta"] for r in recs])),
        })
    return ExperimentResult(cfg, rows, summary, {})


def _count(values):
    out = {}
    for v in values:
        out[v] = out.get(v, 0) + 1
    return out


def theory_rip_samples(delta: float, mu: float, d1: int, d2: int, n: int) -> int:
    """``ceil((8 / delta^2) mu^2 d1 d2 log n)``."""
    return math.ceil(8.0 / delta**2 * mu**2 * d1 * d2 * math.log(n))


def rip_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Empirical RIP constants over a sample-size grid and test-matrix condition numbers."""
    rows = []
    rules = []
    if cfg.num_samples:
        rules += [("num_samples", int(m)) for m in cfg.num_samples]
    if cfg.rip_delta is not None:
        rules.append(("theory", cfg.rip_delta))
    for index in range(cfg.num_seeds):
        seed = run_seed(cfg, index)
        seeds = stream_seeds(seed)
        side = generate(cfg.n1, cfg.n2, cfg.d1, cfg.d2, min(cfg.d1, cfg.d2), 1.0, seeds["problem"]).side
        n = max(cfg.n1, cfg.n2)
        for rule, value in rules:
            if rule == "theory":
                wanted = theory_rip_samples(value, side.mu, cfg.d1, cfg.d2, n)
            else:
                wanted = value
            m = min(wanted, cfg.n1 * cfg.n2)
            op = SensingOp(side, sample_omega(cfg.n1, cfg.n2, m, seeds["omega"]))
            for tk in cfg.test_kappa:
                rep = rip_probe(op, cfg.rank_tested, cfg.trials, seeds["init"], None if tk is None else float(tk))
                rows.append({
                    "preset": cfg.name, "seed": seed, "sample_rule": rule, "samples_wanted": wanted,
                    "num_samples": m, "capped": wanted > m, "mu": side.mu,
                    "test_kappa": "gaussian" if tk is None else float(tk), "rank_tested": cfg.rank_tested,
                    "trials": cfg.trials, "delta_hat": rep.delta_hat,
                })
    summary = []
    groups = {}
    for row in rows:
        key = (row["sample_rule"], row["num_samples"] if row["sample_rule"] != "theory" else "theory", row["test_kappa"])
        groups.setdefault(key, []).append(row["delta_hat"])
    for (rule, m, tk), vals in groups.items():
        q = np.quantile(vals, [0.05, 0.25, 0.5, 0.75, 0.95])
        entry = {"sample_rule": rule, "num_samples": m, "test_kappa": tk, "runs": len(vals),
                 "q05": q[0], "q25": q[1], "q50": q[2], "q75": q[3], "q95": q[4]}
        if cfg.rip_delta is not None:
            entry["fraction_within_delta"] = float(np.mean(np.asarray(vals) <= cfg.rip_delta))
        summary.append(entry)
    return ExperimentResult(cfg, rows, summary, {})


def _write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    if columns is None:
        columns = []
        for row in rows:
            columns += [k for k in row if k not in columns]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="", extrasaction="raise")
        writer.writeheader()
        writer.writerows(rows)


def write_result(result: ExperimentResult, out: str | Path) -> Path:
    """Write ``runs.csv``, ``summary.csv``, ``config.json`` and per-run traces under ``out/<preset>``."""
    root = Path(out) / result.config.name
    root.mkdir(parents=True, exist_ok=True)
    columns = RUN_COLUMNS if result.config.kind not in ("rank", "rip") else None
    _write_csv(root / "runs.csv", result.records, columns)
    _write_csv(root / "summary.csv", result.summary)
    meta = {"config": result.config.to_dict(), "config_hash": result.config.config_hash()}
    if result.config.kind in ("recovery", "noise", "landscape"):
        meta["note"] = MISSING_SOLVERS
    (root / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for (solver, seed), rows in sorted(result.traces.items()):
        path = root / solver / f"{seed}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            writer.writerows(rows)
    return root


def evaluate_acceptance(result: ExperimentResult) -> list[tuple[dict, bool, list]]:
    """Check the config's acceptance rules against the summary rows.

    A rule holds when at least one summary row matches its ``solver`` and
    ``where`` filters and every matching row satisfies ``metric op value``.
    """
    ops = {"<=": lambda a, b: a <= b, ">=": lambda a, b: a >= b, "<": lambda a, b: a < b, ">": lambda a, b: a > b}
    out = []
    for rule in result.config.acceptance:
        observed = []
        for row in result.summary:
            if rule["metric"] not in row:
                continue
            if "solver" in rule and row.get("solver") != rule["solver"]:
                continue
            if any(not _matches(row.get(k), v) for k, v in rule.get("where", {}).items()):
                continue
            observed.append(row[rule["metric"]])
        passed = bool(observed) and all(ops[rule["op"]](v, rule["value"]) for v in observed)
        out.append((rule, passed, observed))
    return out


def _matches(a, b):
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return math.isclose(a, b, rel_tol=1e-12, abs_tol=0.0) or a == b
    return a == b


def strip_timing(path: str | Path) -> list[list[str]]:
    """CSV rows with every ``*_s`` column removed, for determinism checks."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return rows
    keep = [j for j, name in enumerate(rows[0]) if not name.endswith(TIME_SUFFIX)]
    return [[row[j] for j in keep] for row in rows]
