"""Inductive matrix completion: GNIMC, baselines, rank estimation and a benchmark harness."""

from .baselines import altmin_solve, gd_solve, gd_step, rgd_solve, rgd_step
from .gnimc import GnimcConfig, SolveReport, Termination, balance, gnimc_step, solve
from .initialization import balanced_split, projected_gradient_init, random_init, spectral_init
from .linops import LinearMap, NonFinite, RankDeficient, lsqr_min_norm, qr_thin, svd_truncated
from .problem import (
    FactorPair,
    Problem,
    RecoveryMetric,
    SampleSet,
    SideInfo,
    generate,
    incoherence,
    observe,
    rel_rmse,
    sample_omega,
    samples_for_ratio,
    with_samples,
)
from .rankest import RankEstimate, estimate_rank, true_gaps
from .sensing import RipProbeReport, SensingOp, adjoint_sensing, apply_sensing, project_ab, rip_probe

__all__ = [
    "FactorPair", "GnimcConfig", "LinearMap", "NonFinite", "Problem", "RankDeficient", "RankEstimate",
    "RecoveryMetric", "RipProbeReport", "SampleSet", "SensingOp", "SideInfo", "SolveReport", "Termination",
    "adjoint_sensing", "altmin_solve", "apply_sensing", "balance", "balanced_split", "estimate_rank",
    "gd_solve", "gd_step", "generate", "gnimc_step", "incoherence", "lsqr_min_norm", "observe",
    "project_ab", "projected_gradient_init", "qr_thin", "random_init", "rel_rmse",
    "rgd_solve", "rgd_step", "rip_probe", "sample_omega", "samples_for_ratio", "solve", "spectral_init",
    "svd_truncated", "true_gaps", "with_samples",
]
