"""Gauss-Newton solver for inductive matrix completion (GNIMC).

Each outer iteration linearizes ``(U + dU)(V + dV)^T`` around the current
factors, drops the second-order term and takes the minimal-norm solution of
the resulting least-squares problem. The least-squares problem is solved in
QR-preconditioned coordinates (whose conditioning does not depend on the
spectrum of the iterate), mapped back, and stripped of its component along
the kernel ``{(U R, -V R^T)}``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.linalg import solve_sylvester, solve_triangular

from .linops import DEFAULT_LSQR_TOL, LinearMap, NonFinite, RankDeficient, lsqr_min_norm, qr_thin, svd_truncated
from .problem import FactorPair, Problem, RecoveryMetric


class Termination(str, Enum):
    OBSERVED_RESIDUAL_SMALL = "ObservedResidualSmall"
    ESTIMATE_CHANGE_SMALL = "EstimateChangeSmall"
    MAX_ITERS = "MaxIters"
    INNER_FAILURE = "InnerFailure"
    TIME_LIMIT = "TimeLimit"
    TARGET_REACHED = "TargetReached"


@dataclass(frozen=True)
class GnimcConfig:
    """Outer/inner iteration limits and stopping thresholds.

    ``balancing_enabled=None`` turns balancing on exactly when the problem
    carries noise. ``time_limit`` (seconds) and ``target_rel_rmse`` are
    benchmark conveniences; the latter only acts when a truth is supplied.
    """

    max_outer_iters: int = 100
    stop_eps: float = 1e-14
    inner_iters_low_error: int = 10
    inner_iters_high_error: int = 1000
    low_error_threshold: float = 1e-4
    balancing_enabled: bool | None = None
    min_norm_projection_enabled: bool = True
    lsqr_tol: float = DEFAULT_LSQR_TOL
    time_limit: float | None = None
    target_rel_rmse: float | None = None

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if min(self.inner_iters_low_error, self.inner_iters_high_error) < 1:
            raise ValueError("inner iteration caps must be >= 1")
        if min(self.stop_eps, self.low_error_threshold, self.lsqr_tol) <= 0:
            raise ValueError("thresholds must be positive")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ValueError("time_limit must be positive")

    def balancing_for(self, problem: Problem) -> bool:
        if self.balancing_enabled is None:
            return problem.noise_sigma > 0
        return self.balancing_enabled

    def inner_cap(self, rel_residual: float) -> int:
        if rel_residual <= self.low_error_threshold:
            return self.inner_iters_low_error
        return self.inner_iters_high_error


@dataclass(frozen=True)
class IterationRecord:
    index: int
    rel_rmse: float | None
    error: float | None
    rel_residual: float
    rel_change: float
    inner_iters: int
    elapsed: float


@dataclass
class SolveReport:
    solver: str
    records: list[IterationRecord] = field(default_factory=list)
    termination: Termination | None = None
    message: str = ""

    @property
    def iterations(self) -> int:
        return self.records[-1].index if self.records else 0

    @property
    def elapsed(self) -> float:
        return self.records[-1].elapsed if self.records else 0.0

    @property
    def final_rel_rmse(self) -> float | None:
        return self.records[-1].rel_rmse if self.records else None

    @property
    def empirical_gamma(self) -> list[float]:
        """``||X_{t+1} - X*||_F / ||X_t - X*||_F^2`` along the trajectory (needs a truth)."""
        errs = [rec.error for rec in self.records]
        if not errs or errs[0] is None:
            return []
        return [b / a**2 for a, b in zip(errs, errs[1:]) if a > 0]

    def first_reaching(self, threshold: float) -> IterationRecord | None:
        for rec in self.records:
            if rec.rel_rmse is not None and rec.rel_rmse <= threshold:
                return rec
        return None


def observed_entries(a_rows: np.ndarray, b_rows: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Entries of ``A U V^T B^T`` on the sample set."""
    return np.einsum("kj,kj->k", a_rows @ u, b_rows @ v)


class Monitor:
    """Shared bookkeeping for every solver: trace, stopping rules, wall clock.

    Time spent evaluating the truth metric is excluded from ``elapsed``.
    """

    def __init__(self, solver: str, problem: Problem, config: GnimcConfig, truth: RecoveryMetric | None):
        self.config = config
        self.truth = truth
        self.y = problem.y
        self.y_norm = float(np.linalg.norm(problem.y)) or 1.0
        self.report = SolveReport(solver)
        self.rel_residual = np.inf
        self._prev = None
        self._excluded = 0.0
        self._t0 = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self._t0 - self._excluded

    def _measure(self, iterate: FactorPair):
        if self.truth is None:
            return None, None
        t = time.perf_counter()
        err = self.truth.error(iterate.u, iterate.v)
        self._excluded += time.perf_counter() - t
        return err / self.truth.truth_norm, err

    def start(self, iterate: FactorPair, x_hat: np.ndarray) -> None:
        self._record(0, iterate, x_hat, 0)

    def _record(self, index: int, iterate: FactorPair, x_hat: np.ndarray, inner: int) -> IterationRecord:
        elapsed = self.elapsed()
        self.rel_residual = float(np.linalg.norm(x_hat - self.y) / self.y_norm)
        if self._prev is None:
            rel_change = np.inf
        else:
            denom = np.linalg.norm(x_hat)
            rel_change = float(np.linalg.norm(x_hat - self._prev) / denom) if denom > 0 else np.inf
        self._prev = x_hat
        rel, err = self._measure(iterate)
        rec = IterationRecord(index, rel, err, self.rel_residual, rel_change, inner, elapsed)
        self.report.records.append(rec)
        return rec

    def update(self, index: int, iterate: FactorPair, x_hat: np.ndarray, inner: int = 0) -> bool:
        """Record iteration ``index``; return True when the solver should stop."""
        if not np.isfinite(x_hat).all():
            self.fail("non-finite estimate")
            return True
        rec = self._record(index, iterate, x_hat, inner)
        cfg = self.config
        if rec.rel_residual <= cfg.stop_eps:
            return self._stop(Termination.OBSERVED_RESIDUAL_SMALL)
        if rec.rel_change <= cfg.stop_eps:
            return self._stop(Termination.ESTIMATE_CHANGE_SMALL)
        if cfg.target_rel_rmse is not None and rec.rel_rmse is not None and rec.rel_rmse <= cfg.target_rel_rmse:
            return self._stop(Termination.TARGET_REACHED)
        if cfg.time_limit is not None and rec.elapsed >= cfg.time_limit:
            return self._stop(Termination.TIME_LIMIT)
        if index >= cfg.max_outer_iters:
            return self._stop(Termination.MAX_ITERS)
        return False

    def fail(self, message: str) -> None:
        self.report.message = message
        self._stop(Termination.INNER_FAILURE)

    def _stop(self, reason: Termination) -> bool:
        if self.report.termination is None:
            self.report.termination = reason
        return True


def least_squares_matrix(a_rows: np.ndarray, b_rows: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dense matrix of ``(dU, dV) -> vec_Omega(A (u dV^T + dU v^T) B^T)``.

    Columns are ordered as ``[dU.ravel(), dV.ravel()]`` (row-major). Building
    it costs the same as one application of the operator.
    """
    m, d1 = a_rows.shape
    d2 = b_rows.shape[1]
    r = u.shape[1]
    au = a_rows @ u
    bv = b_rows @ v
    out = np.empty((m, (d1 + d2) * r))
    out[:, : d1 * r] = (a_rows[:, :, None] * bv[:, None, :]).reshape(m, d1 * r)
    out[:, d1 * r :] = (b_rows[:, :, None] * au[:, None, :]).reshape(m, d2 * r)
    return out


def factored_map(a_rows: np.ndarray, b_rows: np.ndarray, u: np.ndarray, v: np.ndarray) -> LinearMap:
    """Matrix-free form of :func:`least_squares_matrix` (same column ordering, no scaling).

    Each application costs two ``|Omega| x d x r`` products, about the same
    as one gradient evaluation.
    """
    d1, r = u.shape
    d2 = v.shape[0]
    split = d1 * r
    au = a_rows @ u
    bv = b_rows @ v

    def forward(z):
        du = z[:split].reshape(d1, r)
        dv = z[split:].reshape(d2, r)
        return np.einsum("kj,kj->k", a_rows @ du, bv) + np.einsum("kj,kj->k", au, b_rows @ dv)

    def adjoint(e):
        e = e[:, None]
        return np.concatenate([(a_rows.T @ (e * bv)).ravel(), (b_rows.T @ (e * au)).ravel()])

    return LinearMap(split + d2 * r, a_rows.shape[0], forward, adjoint)


def least_squares_map(problem: Problem, u: np.ndarray, v: np.ndarray) -> LinearMap:
    """The least-squares operator ``(dU, dV) -> A(u dV^T + dU v^T)`` including the ``1/sqrt(p)`` scale."""
    problem.require_observed()
    mat = least_squares_matrix(problem.a_rows, problem.b_rows, u, v) / np.sqrt(problem.samples.p)
    return LinearMap.from_matrix(mat)


def preconditioned_condition_number(problem: Problem, iterate: FactorPair) -> float:
    """Condition number of the QR-preconditioned operator restricted to the complement of its kernel.

    Uses a dense SVD; the ``r^2`` smallest singular values belong to the
    kernel and are skipped.
    """
    q_u, _ = qr_thin(iterate.u)
    q_v, _ = qr_thin(iterate.v)
    mat = least_squares_matrix(problem.a_rows, problem.b_rows, q_u, q_v)
    s = np.linalg.svd(mat, compute_uv=False)
    rank = mat.shape[1] - iterate.rank**2
    if rank > s.size or s[rank - 1] == 0:
        return np.inf
    return float(s[0] / s[rank - 1])


def kernel_basis(q_u: np.ndarray, q_v: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Orthonormal basis ``(u_i e_j^T, -v_j e_i^T) / sqrt(2)`` of the kernel of the preconditioned operator.

    ``q_u, q_v`` must have orthonormal columns.
    """
    d1, r = q_u.shape
    d2 = q_v.shape[0]
    basis = []
    for i in range(r):
        for j in range(r):
            ku = np.zeros((d1, r))
            kv = np.zeros((d2, r))
            ku[:, j] = q_u[:, i]
            kv[:, i] = -q_v[:, j]
            basis.append((ku / np.sqrt(2), kv / np.sqrt(2)))
    return basis


def remove_kernel_component(
    u: np.ndarray, v: np.ndarray, du: np.ndarray, dv: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal projection of ``(du, dv)`` off ``{(u R, -v R^T) : R in R^{r x r}}``.

    The coefficient ``R`` solves the normal equations
    ``(u^T u) R + R (v^T v) = u^T du - dv^T v``.
    """
    coef = solve_sylvester(u.T @ u, v.T @ v, u.T @ du - dv.T @ v)
    return du - u @ coef, dv + v @ coef.T


def _gauss_newton_update(a_rows, b_rows, residual, u, v, max_inner, tol, min_norm):
    q_u, r_u = qr_thin(u)
    q_v, r_v = qr_thin(v)
    d1, r = u.shape
    z, iters = lsqr_min_norm(factored_map(a_rows, b_rows, q_u, q_v), residual, max_inner, tol)
    du = z[: d1 * r].reshape(d1, r)
    dv = z[d1 * r :].reshape(-1, r)
    # back to the unpreconditioned variables: du R_V^{-T}, dv R_U^{-T}
    du = solve_triangular(r_v, du.T, lower=False).T
    dv = solve_triangular(r_u, dv.T, lower=False).T
    if min_norm:
        du, dv = remove_kernel_component(u, v, du, dv)
    return du, dv, iters


def gnimc_step(
    problem: Problem,
    iterate: FactorPair,
    config: GnimcConfig | None = None,
    max_inner: int | None = None,
) -> tuple[FactorPair, int]:
    """One Gauss-Newton update; returns the new iterate and the LSQR iteration count.

    ``max_inner`` defaults to the config's cap for the current observed residual.
    Raises :class:`~imc.linops.RankDeficient` if a factor has lost rank.
    """
    config = config or GnimcConfig()
    problem.require_observed()
    a, b = problem.a_rows, problem.b_rows
    residual = problem.y - observed_entries(a, b, iterate.u, iterate.v)
    if max_inner is None:
        rel = np.linalg.norm(residual) / (np.linalg.norm(problem.y) or 1.0)
        max_inner = config.inner_cap(rel)
    du, dv, iters = _gauss_newton_update(
        a, b, residual, iterate.u, iterate.v, max_inner, config.lsqr_tol, config.min_norm_projection_enabled
    )
    return FactorPair(iterate.u + du, iterate.v + dv), iters


def balance(iterate: FactorPair) -> FactorPair:
    """Rebalanced factors ``(W1 S^1/2, W2 S^1/2)`` from the SVD ``U V^T = W1 S W2^T``."""
    w1, s, w2 = svd_truncated(iterate.product(), iterate.rank)
    root = np.sqrt(s)
    return FactorPair(w1 * root, w2 * root)


def solve(
    problem: Problem,
    init: FactorPair,
    config: GnimcConfig | None = None,
    truth: RecoveryMetric | None = None,
) -> tuple[FactorPair, SolveReport]:
    """Run GNIMC from ``init`` until a stopping rule fires.

    ``truth`` is only used to fill the trace (and for ``target_rel_rmse``).
    """
    config = config or GnimcConfig()
    problem.require_observed()
    a, b, y = problem.a_rows, problem.b_rows, problem.y
    balancing = config.balancing_for(problem)
    monitor = Monitor("gnimc", problem, config, truth)
    iterate = init
    x_hat = observed_entries(a, b, iterate.u, iterate.v)
    monitor.start(iterate, x_hat)

    index = 0
    while True:
        index += 1
        try:
            if balancing:
                iterate = balance(iterate)
                x_hat = observed_entries(a, b, iterate.u, iterate.v)
            cap = config.inner_cap(monitor.rel_residual)
            du, dv, inner = _gauss_newton_update(
                a, b, y - x_hat, iterate.u, iterate.v, cap, config.lsqr_tol, config.min_norm_projection_enabled
            )
        except (RankDeficient, NonFinite) as exc:
            monitor.fail(f"{type(exc).__name__}: {exc}")
            break
        iterate = FactorPair(iterate.u + du, iterate.v + dv)
        x_hat = observed_entries(a, b, iterate.u, iterate.v)
        if monitor.update(index, iterate, x_hat, inner):
            break
    return iterate, monitor.report


def with_config(config: GnimcConfig, **changes) -> GnimcConfig:
    return replace(config, **changes)
