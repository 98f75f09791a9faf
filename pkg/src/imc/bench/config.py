"""Experiment configuration: JSON schema, validation and hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

KINDS = ("recovery", "noise", "rank", "rip", "landscape")
SOLVERS = ("gnimc", "altmin", "gd", "rgd")
NOISE_TARGETS = ("entries", "features", "both")
SAMPLE_KEYS = ("rho", "num_samples", "sample_rate", "sample_scale")

# solver parameter name -> allowed type
SOLVER_PARAMS = {
    "gnimc": {
        "max_outer_iters": int, "inner_iters_low_error": int, "inner_iters_high_error": int,
        "low_error_threshold": float, "balancing_enabled": bool, "min_norm_projection_enabled": bool,
        "lsqr_tol": float,
    },
    "altmin": {"max_outer_iters": int, "inner_iters_high_error": int, "lsqr_tol": float},
    "gd": {"max_outer_iters": int, "eta": float},
    "rgd": {"max_outer_iters": int, "eta": float, "lam": float},
}


class ConfigError(ValueError):
    """An experiment configuration failed validation."""


@dataclass(frozen=True)
class SolverSpec:
    """One solver with fixed parameters and an optional grid swept at bench level.

    ``eta`` and ``lam`` are scale-free (see ``imc.baselines.normalized_step``).
    ``eta`` may be the string ``"auto"``: the 10-point grid from ``1e-2/kappa``
    to ``10^0.5/kappa``. ``tune_seeds`` limits the grid sweep to the first
    seeds; the remaining seeds run only the selected point.
    """

    name: str
    params: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    tune_seeds: int | None = None

    @property
    def label(self) -> str:
        return self.name


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    kind: str
    n1: int
    n2: int
    d1: int
    d2: int
    r: int
    kappa: tuple = (1.0,)
    rho: tuple = ()
    num_samples: tuple = ()
    sample_rate: tuple = ()
    sample_scale: tuple = ()
    noise_sigma: tuple = (0.0,)
    noise_target: str = "entries"
    solvers: tuple = ()
    num_seeds: int = 1
    seed: int = 0
    time_limit: float | None = None
    target_rel_rmse: float = 1e-4
    stop_at_target: bool = False
    init: str = "spectral"
    spectrum: tuple | None = None
    d_const: tuple = (None,)
    rank_tested: int | None = None
    trials: int = 100
    rip_delta: float | None = None
    test_kappa: tuple = (None,)
    acceptance: tuple = ()
    output: str | None = None

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["solvers"] = [asdict(s) for s in self.solvers]
        return _jsonable(doc)

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("output", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]

    def sample_axis(self) -> tuple[str, tuple]:
        for key in SAMPLE_KEYS:
            values = getattr(self, key)
            if values:
                return key, values
        raise ConfigError("no sample size given")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _as_tuple(value, key):
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(value, (int, float, str)):
        return (value,)
    raise ConfigError(f"{key}: expected a number or a list, got {type(value).__name__}")


def _need(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _parse_solver(doc, index) -> SolverSpec:
    where = f"solvers[{index}]"
    if isinstance(doc, str):
        doc = {"name": doc}
    _need(isinstance(doc, dict), f"{where}: expected an object or a solver name")
    unknown = set(doc) - {"name", "params", "grid", "tune_seeds"}
    _need(not unknown, f"{where}: unknown keys {sorted(unknown)}")
    name = doc.get("name")
    _need(name in SOLVERS, f"{where}.name: must be one of {list(SOLVERS)}, got {name!r}")
    allowed = SOLVER_PARAMS[name]
    params = dict(doc.get("params") or {})
    grid = dict(doc.get("grid") or {})
    for key, value in params.items():
        _need(key in allowed, f"{where}.params.{key}: not a parameter of {name} (allowed: {sorted(allowed)})")
        _check_param(f"{where}.params.{key}", allowed[key], value)
    for key, values in grid.items():
        _need(key in allowed, f"{where}.grid.{key}: not a parameter of {name} (allowed: {sorted(allowed)})")
        if key == "eta" and values == "auto":
            continue
        _need(isinstance(values, list) and values, f"{where}.grid.{key}: expected a nonempty list or \"auto\"")
        for v in values:
            _check_param(f"{where}.grid.{key}", allowed[key], v)
        _need(key not in params, f"{where}: {key} appears in both params and grid")
    if name in ("gd", "rgd"):
        _need("eta" in params or "eta" in grid, f"{where}: {name} needs a step size (params.eta or grid.eta)")
    tune = doc.get("tune_seeds")
    _need(tune is None or (isinstance(tune, int) and tune >= 1), f"{where}.tune_seeds: expected a positive integer")
    return SolverSpec(name, params, grid, tune)


def _check_param(where, typ, value):
    if typ is bool:
        _need(isinstance(value, bool), f"{where}: expected true/false")
    elif typ is int:
        _need(isinstance(value, int) and not isinstance(value, bool) and value >= 1, f"{where}: expected an integer >= 1")
    else:
        _need(_is_num(value) and value >= 0, f"{where}: expected a nonnegative number")


def from_dict(doc: dict) -> ExperimentConfig:
    """Validate a JSON document and build an :class:`ExperimentConfig`.

    Raises :class:`ConfigError` naming the offending key.
    """
    _need(isinstance(doc, dict), "config must be a JSON object")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(doc) - known
    _need(not unknown, f"unknown config keys {sorted(unknown)}; allowed: {sorted(known)}")
    for key in ("name", "kind", "n1", "n2", "d1", "d2", "r"):
        _need(key in doc, f"missing required key {key!r}")
    _need(doc["kind"] in KINDS, f"kind: must be one of {list(KINDS)}, got {doc['kind']!r}")
    for key in ("n1", "n2", "d1", "d2", "r"):
        v = doc[key]
        _need(isinstance(v, int) and not isinstance(v, bool) and v >= 1, f"{key}: expected a positive integer, got {v!r}")
    _need(doc["r"] <= doc["d1"] <= doc["n1"] and doc["r"] <= doc["d2"] <= doc["n2"],
          "dimensions: need r <= d1 <= n1 and r <= d2 <= n2")

    kw = dict(doc)
    for key in ("kappa", "rho", "num_samples", "sample_rate", "sample_scale", "noise_sigma",
                "d_const", "test_kappa", "acceptance"):
        if key in kw:
            kw[key] = _as_tuple(kw[key], key)
    if kw.get("spectrum") is not None:
        kw["spectrum"] = _as_tuple(kw["spectrum"], "spectrum")
        _need(all(_is_num(s) and s > 0 for s in kw["spectrum"]), "spectrum: expected positive numbers")
        _need(len(kw["spectrum"]) == doc["r"], f"spectrum: needs r = {doc['r']} values")
    kw["solvers"] = tuple(_parse_solver(s, i) for i, s in enumerate(doc.get("solvers", [])))

    for k in kw.get("kappa", (1.0,)):
        _need(_is_num(k) and k >= 1, f"kappa: values must be >= 1, got {k!r}")
    given = [key for key in SAMPLE_KEYS if kw.get(key)]
    if doc["kind"] != "rip":
        _need(len(given) == 1, f"give exactly one of {list(SAMPLE_KEYS)} (got {given or 'none'})")
    else:
        _need(len(given) <= 1, f"give at most one of {list(SAMPLE_KEYS)} (got {given})")
    for v in kw.get("rho", ()):
        _need(_is_num(v) and v >= 1, f"rho: oversampling ratios must be >= 1, got {v!r}")
    for v in kw.get("num_samples", ()):
        _need(isinstance(v, int) and 1 <= v <= doc["n1"] * doc["n2"], f"num_samples: {v!r} outside [1, n1*n2]")
    for v in kw.get("sample_rate", ()):
        _need(_is_num(v) and 0 < v <= 1, f"sample_rate: {v!r} outside (0, 1]")
    for v in kw.get("sample_scale", ()):
        _need(_is_num(v) and v > 0, f"sample_scale: expected positive constants, got {v!r}")
    for v in kw.get("noise_sigma", (0.0,)):
        _need(_is_num(v) and v >= 0, f"noise_sigma: values must be >= 0, got {v!r}")
    _need(kw.get("noise_target", "entries") in NOISE_TARGETS,
          f"noise_target: must be one of {list(NOISE_TARGETS)}")
    n = kw.get("num_seeds", 1)
    _need(isinstance(n, int) and n >= 1, f"num_seeds: expected an integer >= 1, got {n!r}")
    _need(isinstance(kw.get("seed", 0), int), "seed: expected an integer")
    tl = kw.get("time_limit")
    _need(tl is None or (_is_num(tl) and tl > 0), "time_limit: expected a positive number of seconds or null")
    _need(kw.get("init", "spectral") in ("spectral", "random"), "init: must be 'spectral' or 'random'")
    for v in kw.get("d_const", (None,)):
        _need(v is None or (_is_num(v) and 0 <= v < 1), f"d_const: values must be null or in [0, 1), got {v!r}")
    if doc["kind"] in ("recovery", "noise", "landscape"):
        _need(kw["solvers"], f"kind {doc['kind']!r} needs at least one solver")
    if doc["kind"] == "rip":
        rt = kw.get("rank_tested")
        _need(isinstance(rt, int) and 1 <= rt <= min(doc["d1"], doc["d2"]),
              "rank_tested: expected an integer in [1, min(d1, d2)]")
        rd = kw.get("rip_delta")
        _need(given or rd is not None, "rip: give a sample grid, rip_delta, or both")
        _need(rd is None or (_is_num(rd) and 0 < rd < 1), "rip_delta: expected a number in (0, 1)")
    for rule in kw.get("acceptance", ()):
        _need(isinstance(rule, dict) and {"metric", "op", "value"} <= set(rule),
              "acceptance: each rule needs metric, op and value")
        _need(rule["op"] in ("<=", ">=", "<", ">"), f"acceptance: unsupported op {rule['op']!r}")
    return ExperimentConfig(**kw)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    return from_dict(doc)
