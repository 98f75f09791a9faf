"""The IMC sensing operator ``M -> vec_Omega(A M B^T) / sqrt(p)`` and an empirical RIP probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linops import LinearMap, orthonormalize
from .problem import Problem, SampleSet, SideInfo


@dataclass(frozen=True)
class SensingOp:
    side: SideInfo
    samples: SampleSet
    a_rows: np.ndarray = field(init=False, repr=False)
    b_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if (self.side.n1, self.side.n2) != (self.samples.n1, self.samples.n2):
            raise ValueError("side information and sample grid disagree on n1, n2")
        object.__setattr__(self, "a_rows", np.ascontiguousarray(self.side.A[self.samples.rows]))
        object.__setattr__(self, "b_rows", np.ascontiguousarray(self.side.B[self.samples.cols]))

    @classmethod
    def from_problem(cls, problem: Problem) -> "SensingOp":
        if problem.samples is None:
            raise ValueError("problem has no sample set")
        return cls(problem.solver_side, problem.samples)

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.samples.p)

    @property
    def in_shape(self) -> tuple[int, int]:
        return (self.side.d1, self.side.d2)

    def as_linear_map(self) -> LinearMap:
        d1, d2 = self.in_shape
        return LinearMap(
            d1 * d2,
            self.samples.size,
            lambda x: apply_sensing(self, x.reshape(d1, d2)),
            lambda y: adjoint_sensing(self, y).ravel(),
        )


def apply_sensing(op: SensingOp, m: np.ndarray) -> np.ndarray:
    """Entries ``a_i^T m b_j / sqrt(p)`` for every sampled ``(i, j)``."""
    if m.shape != op.in_shape:
        raise ValueError(f"expected a {op.in_shape} matrix, got {m.shape}")
    return np.einsum("kj,kj->k", op.a_rows @ m, op.b_rows) * op.scale


def apply_sensing_factored(op: SensingOp, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``apply_sensing(op, u @ v.T)`` in O(|Omega| (d1 + d2) r)."""
    return np.einsum("kj,kj->k", op.a_rows @ u, op.b_rows @ v) * op.scale


def adjoint_sensing(op: SensingOp, y: np.ndarray) -> np.ndarray:
    """``A^T P_Omega^*(y) B / sqrt(p)`` as a d1 x d2 matrix."""
    y = np.asarray(y, dtype=float)
    if y.shape != (op.samples.size,):
        raise ValueError(f"expected {op.samples.size} values, got shape {y.shape}")
    return (op.a_rows * (y * op.scale)[:, None]).T @ op.b_rows


def project_ab(side: SideInfo, x: np.ndarray) -> np.ndarray:
    """``A A^T X B B^T``."""
    if x.shape != (side.n1, side.n2):
        raise ValueError(f"expected a {(side.n1, side.n2)} matrix, got {x.shape}")
    return side.A @ (side.A.T @ x @ side.B) @ side.B.T


@dataclass(frozen=True)
class RipProbeReport:
    """Empirical witness of the RIP constant over random test matrices.

    ``delta_hat`` is a lower bound on the true constant: it only sees the
    matrices that were drawn.
    """

    delta_hat: float
    trials: int
    rank_tested: int
    ratios: np.ndarray


def _test_factors(rng, d1, d2, k, kappa):
    if kappa is None:
        return rng.standard_normal((d1, k)), rng.standard_normal((d2, k))
    left = orthonormalize(rng.standard_normal((d1, k)))
    right = orthonormalize(rng.standard_normal((d2, k)))
    spectrum = np.linspace(1.0, kappa, k) if k > 1 else np.ones(1)
    return left * spectrum, right


def rip_probe(
    op: SensingOp,
    rank_tested: int,
    trials: int,
    seed: int,
    kappa: float | None = None,
) -> RipProbeReport:
    """Max of ``| ||A(M)||^2 / ||M||_F^2 - 1 |`` over ``trials`` random rank-``rank_tested`` matrices.

    Test matrices are products of Gaussian factors, or, when ``kappa`` is
    given, orthonormal factors with a spectrum linearly spaced in [1, kappa].
    """
    d1, d2 = op.in_shape
    if not 1 <= rank_tested <= min(d1, d2):
        raise ValueError(f"rank_tested must lie in [1, {min(d1, d2)}]")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    ratios = np.empty(trials)
    for t in range(trials):
        left, right = _test_factors(rng, d1, d2, rank_tested, kappa)
        norm = np.linalg.norm(left @ right.T)
        sensed = apply_sensing_factored(op, left / norm, right)
        ratios[t] = sensed @ sensed
    return RipProbeReport(float(np.max(np.abs(ratios - 1.0))), trials, rank_tested, ratios)
