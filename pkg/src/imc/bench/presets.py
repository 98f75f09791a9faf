"""Shipped experiment presets, one per reproduced figure or table."""

from __future__ import annotations

import copy

from .config import ConfigError, ExperimentConfig, from_dict

FIG4_SPECTRUM = [5, 4, 3, 2, 1, 0.2, 0.1, 0.08, 0.06, 0.03]

_STANDARD = {"n1": 1000, "n2": 1000, "d1": 20, "d2": 20, "r": 10}
# exact Gauss-Newton steps: the inner solve is never truncated
_GNIMC_EXACT = {"name": "gnimc", "params": {"inner_iters_low_error": 1000}}
_GD_LONG = {"max_outer_iters": 200000}

_PRESETS = {
    "fig1-left": {
        **_STANDARD, "kind": "recovery", "kappa": [10], "rho": [1.5], "num_seeds": 50,
        "solvers": [
            _GNIMC_EXACT,
            "altmin",
            {"name": "gd", "params": _GD_LONG, "grid": {"eta": "auto"}, "tune_seeds": 3},
        ],
        "time_limit": 120,
        "acceptance": [
            {"solver": "gnimc", "metric": "success_fraction", "op": ">=", "value": 0.9},
            {"solver": "gnimc", "metric": "median_wall_time_s", "op": "<", "value": 5.0},
        ],
    },
    "fig1-right": {
        **_STANDARD, "kind": "recovery", "kappa": [1, 10, 100, 1000], "rho": [1.5], "num_seeds": 20,
        "stop_at_target": True,
        "solvers": [
            "gnimc",
            "altmin",
            {"name": "gd", "params": _GD_LONG, "grid": {"eta": "auto"}, "tune_seeds": 3},
            {"name": "rgd", "params": {**_GD_LONG, "lam": 1.0}, "grid": {"eta": "auto"}, "tune_seeds": 3},
        ],
        "time_limit": 300,
    },
    "fig2-left": {
        **_STANDARD, "kind": "recovery", "kappa": [10],
        "rho": [1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0], "num_seeds": 50, "stop_at_target": True,
        "solvers": ["gnimc", "altmin", {"name": "gd", "params": _GD_LONG, "grid": {"eta": "auto"}, "tune_seeds": 3}],
        "time_limit": 300,
    },
    "fig2-right": {
        "n1": 10000, "n2": 1000, "d1": 100, "d2": 50, "r": 5, "kind": "recovery", "kappa": [10],
        "rho": [1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0], "num_seeds": 50, "stop_at_target": True,
        "solvers": ["gnimc", "altmin", {"name": "gd", "params": _GD_LONG, "grid": {"eta": "auto"}, "tune_seeds": 3}],
        "time_limit": 300,
    },
    "fig3-noise": {
        **_STANDARD, "kind": "noise", "kappa": [10], "rho": [1.5], "num_seeds": 10,
        "noise_sigma": [0, 1e-4, 1e-3, 1e-2, 1e-1], "noise_target": "entries",
        "solvers": ["gnimc"],
        "acceptance": [
            {"metric": "slope", "op": ">=", "value": 0.85},
            {"metric": "slope", "op": "<=", "value": 1.15},
            {"metric": "median_final_rel_rmse", "where": {"noise_sigma": 0.0}, "op": "<=", "value": 1e-10},
        ],
    },
    "fig4-rank": {
        "n1": 3000, "n2": 1000, "d1": 30, "d2": 20, "r": 10, "kind": "rank", "spectrum": FIG4_SPECTRUM,
        "sample_rate": [0.01], "num_seeds": 50, "d_const": [0.0, None],
        "acceptance": [{"metric": "fraction_correct", "op": ">=", "value": 0.9, "expected_rank": 5}],
    },
    "fig4-rank-full": {
        "n1": 30000, "n2": 10000, "d1": 30, "d2": 20, "r": 10, "kind": "rank", "spectrum": FIG4_SPECTRUM,
        "sample_rate": [0.001], "num_seeds": 50, "d_const": [0.0, None],
        "acceptance": [{"metric": "fraction_correct", "op": ">=", "value": 0.9, "expected_rank": 5}],
    },
    "table2-rho-sweep": {
        **_STANDARD, "kind": "recovery", "kappa": [1, 10, 100],
        "rho": [1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0], "num_seeds": 20,
        "solvers": ["gnimc"],
        "acceptance": [
            {"solver": "gnimc", "metric": "median_final_rel_rmse", "where": {"rho": 1.2}, "op": "<=", "value": 1e-4},
        ],
    },
    "rip-probe": {
        "n1": 400, "n2": 400, "d1": 10, "d2": 10, "r": 10, "kind": "rip", "rank_tested": 10, "trials": 100,
        "num_seeds": 20, "rip_delta": 0.5, "num_samples": [500, 1000, 2000, 5000, 10000, 40000, 160000],
        "test_kappa": [None, 1, 100],
        "acceptance": [
            {"metric": "fraction_within_delta", "where": {"sample_rule": "theory"}, "op": ">=", "value": 0.95},
        ],
    },
    "landscape-gd": {
        "n1": 400, "n2": 400, "d1": 10, "d2": 10, "r": 3, "kind": "landscape", "sample_scale": [1.0],
        "num_seeds": 20, "init": "random", "target_rel_rmse": 1e-3,
        "solvers": [{"name": "gd", "params": {"eta": 0.25, "max_outer_iters": 20000}}],
        "acceptance": [{"solver": "gd", "metric": "success_fraction", "op": ">=", "value": 1.0}],
    },
}

FULL_SCALE = {"fig2-right": {"n1": 20000}}


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def preset_doc(name: str, full_scale: bool = False) -> dict:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    doc = copy.deepcopy(_PRESETS[name])
    doc["name"] = name
    if full_scale:
        doc.update(FULL_SCALE.get(name, {}))
    return doc


def get_preset(name: str, full_scale: bool = False, **overrides) -> ExperimentConfig:
    """Validated preset config; ``overrides`` replace top-level keys."""
    doc = preset_doc(name, full_scale)
    doc.update(overrides)
    return from_dict(doc)
