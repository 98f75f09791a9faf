"""Initial iterates: balanced factor split, spectral and projected-gradient initialization."""

from __future__ import annotations

import numpy as np

from .linops import svd_truncated, truncate_rank
from .problem import FactorPair, Problem
from .sensing import SensingOp, adjoint_sensing, apply_sensing

DEFAULT_INIT_ITERS = 25


def balanced_split(m: np.ndarray, r: int) -> FactorPair:
    """``(U S^1/2, V S^1/2)`` from the rank-``r`` truncated SVD ``m ~ U S V^T``."""
    u, s, v = svd_truncated(m, r)
    root = np.sqrt(s)
    return FactorPair(u * root, v * root)


def projected_gradient_init(problem: Problem, num_iters: int = DEFAULT_INIT_ITERS) -> np.ndarray:
    """Rank-``r`` projected gradient iterations from zero with unit step.

    Each step is ``M <- P_r[M - A^T (P_Omega(A M B^T) - Y) B / p]``; the
    ``1/p`` scales the whole residual so that ``M*`` is a fixed point of the
    noiseless iteration.
    """
    if num_iters < 1:
        raise ValueError("num_iters must be >= 1")
    problem.require_observed()
    op = SensingOp.from_problem(problem)
    b = problem.y * op.scale
    m = np.zeros(op.in_shape)
    for _ in range(num_iters):
        m = truncate_rank(m - adjoint_sensing(op, apply_sensing(op, m) - b), problem.r)
    return m


def spectral_init(problem: Problem, r: int | None = None) -> FactorPair:
    """One projected-gradient step from zero, ``P_r[A^T Y B / p]``, split into balanced factors."""
    problem.require_observed()
    r = problem.r if r is None else r
    op = SensingOp.from_problem(problem)
    return balanced_split(adjoint_sensing(op, problem.y * op.scale), r)


def random_init(problem: Problem, seed: int, r: int | None = None) -> FactorPair:
    """Factors with i.i.d. ``N(0, 1/d)`` entries (standard deviation ``1/sqrt(d)``)."""
    r = problem.r if r is None else r
    rng = np.random.default_rng(seed)
    d1, d2 = problem.solver_side.d1, problem.solver_side.d2
    return FactorPair(
        rng.standard_normal((d1, r)) / np.sqrt(d1),
        rng.standard_normal((d2, r)) / np.sqrt(d2),
    )
