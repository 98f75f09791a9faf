"""Reference solvers: alternating minimization with QR, gradient descent, and imbalance-regularized GD.

All of them share the GNIMC stopping rules and report format. Gradients are
taken on the raw objective ``f(U, V) = ||P_Omega(A U V^T B^T) - Y||_F^2``;
:func:`normalized_step` converts the scale-free hyperparameters used by the
benchmark into raw ones.
"""

from __future__ import annotations

import numpy as np

from .gnimc import GnimcConfig, Monitor, SolveReport, observed_entries
from .linops import LinearMap, NonFinite, RankDeficient, lsqr_min_norm, qr_thin
from .problem import FactorPair, Problem, RecoveryMetric


def objective(problem: Problem, iterate: FactorPair) -> float:
    """``||P_Omega(A U V^T B^T) - Y||_F^2``."""
    problem.require_observed()
    e = observed_entries(problem.a_rows, problem.b_rows, iterate.u, iterate.v) - problem.y
    return float(e @ e)


def imbalance_penalty(iterate: FactorPair, lam: float) -> float:
    """``(lam / 4) ||U^T U - V^T V||_F^2``."""
    return 0.25 * lam * iterate.imbalance() ** 2


def _gradient(a, b, e, u, v, lam):
    bv = b @ v
    au = a @ u
    gu = 2.0 * (a.T @ (e[:, None] * bv))
    gv = 2.0 * (b.T @ (e[:, None] * au))
    if lam:
        diff = u.T @ u - v.T @ v
        gu += lam * (u @ diff)
        gv -= lam * (v @ diff)
    return gu, gv


def gradient(problem: Problem, iterate: FactorPair, lam: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``objective + imbalance_penalty`` with respect to ``(U, V)``."""
    problem.require_observed()
    a, b = problem.a_rows, problem.b_rows
    e = observed_entries(a, b, iterate.u, iterate.v) - problem.y
    return _gradient(a, b, e, iterate.u, iterate.v, lam)


def _check_step(step_size, lam):
    if not step_size > 0:
        raise ValueError("step_size must be positive")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")


def rgd_step(problem: Problem, iterate: FactorPair, step_size: float, lam: float) -> FactorPair:
    """One gradient step on ``f + (lam/4) ||U^T U - V^T V||_F^2``, both gradients at the incoming iterate."""
    _check_step(step_size, lam)
    # overflow is detected explicitly below
    with np.errstate(over="ignore", invalid="ignore"):
        gu, gv = gradient(problem, iterate, lam)
        u = iterate.u - step_size * gu
        v = iterate.v - step_size * gv
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise NonFinite("gradient step overflowed; step size too large")
    return FactorPair(u, v)


def gd_step(problem: Problem, iterate: FactorPair, step_size: float) -> FactorPair:
    """``U <- U - eta 2 A^T E B V``, ``V <- V - eta 2 B^T E^T A U`` with ``E = P_Omega(A U V^T B^T) - Y``."""
    return rgd_step(problem, iterate, step_size, 0.0)


def normalized_step(problem: Problem, eta: float, lam: float = 0.0) -> tuple[float, float]:
    """Raw ``(step_size, lambda)`` for the objective rescaled to ``f / (2p)``.

    ``f / (2p)`` approximates ``||U V^T - M*||_F^2 / 2``, so ``eta`` and
    ``lam`` keep their meaning across sampling rates.
    """
    p = problem.samples.p
    return eta / (2.0 * p), 2.0 * p * lam


def step_grid(kappa: float, num: int = 10) -> np.ndarray:
    """Geometric grid of normalized step sizes from ``1e-2 / kappa`` to ``10^0.5 / kappa``."""
    return np.geomspace(1e-2, 10**0.5, num) / kappa


def _gradient_solve(name, problem, init, config, step_size, lam, truth):
    _check_step(step_size, lam)
    config = config or GnimcConfig()
    problem.require_observed()
    a, b, y = problem.a_rows, problem.b_rows, problem.y
    monitor = Monitor(name, problem, config, truth)
    iterate = init
    x_hat = observed_entries(a, b, iterate.u, iterate.v)
    monitor.start(iterate, x_hat)
    index = 0
    # overflow is detected explicitly below
    with np.errstate(over="ignore", invalid="ignore"):
        while True:
            index += 1
            gu, gv = _gradient(a, b, x_hat - y, iterate.u, iterate.v, lam)
            u = iterate.u - step_size * gu
            v = iterate.v - step_size * gv
            x_new = observed_entries(a, b, u, v)
            if not (np.isfinite(u).all() and np.isfinite(v).all() and np.isfinite(x_new @ x_new)):
                monitor.fail("NonFinite: gradient step overflowed; step size too large")
                break
            iterate, x_hat = FactorPair(u, v), x_new
            if monitor.update(index, iterate, x_hat):
                break
    return iterate, monitor.report


def gd_solve(
    problem: Problem,
    init: FactorPair,
    config: GnimcConfig | None = None,
    step_size: float = 1e-3,
    truth: RecoveryMetric | None = None,
) -> tuple[FactorPair, SolveReport]:
    """Vanilla gradient descent with a fixed raw step size."""
    return _gradient_solve("gd", problem, init, config, step_size, 0.0, truth)


def rgd_solve(
    problem: Problem,
    init: FactorPair,
    config: GnimcConfig | None = None,
    step_size: float = 1e-3,
    lam: float = 1.0,
    truth: RecoveryMetric | None = None,
) -> tuple[FactorPair, SolveReport]:
    """Gradient descent with the imbalance regularizer; ``lam`` is raw (see :func:`normalized_step`)."""
    return _gradient_solve("rgd", problem, init, config, step_size, lam, truth)


def _block_map(fixed_rows: np.ndarray, free_rows: np.ndarray, q: np.ndarray) -> LinearMap:
    # Z -> entries of (fixed_rows q) * (free_rows Z), summed over the rank index
    d, r = free_rows.shape[1], q.shape[1]
    fq = fixed_rows @ q

    def forward(z):
        return np.einsum("kj,kj->k", fq, free_rows @ z.reshape(d, r))

    def adjoint(e):
        return (free_rows.T @ (e[:, None] * fq)).ravel()

    return LinearMap(d * r, fixed_rows.shape[0], forward, adjoint)


def altmin_half_step(
    problem: Problem, iterate: FactorPair, update: str, max_inner: int = 1000, tol: float = 1e-12
) -> tuple[FactorPair, int]:
    """Orthonormalize one factor and refit the other by least squares.

    ``update="v"`` returns ``(Q_U, V*)`` with ``V* = argmin_V ||P_Omega(A Q_U V^T B^T) - Y||``;
    ``update="u"`` is the mirror image.
    """
    problem.require_observed()
    a, b, y = problem.a_rows, problem.b_rows, problem.y
    r = iterate.rank
    if update == "v":
        q, _ = qr_thin(iterate.u)
        z, iters = lsqr_min_norm(_block_map(a, b, q), y, max_inner, tol)
        return FactorPair(q, z.reshape(-1, r)), iters
    if update == "u":
        q, _ = qr_thin(iterate.v)
        z, iters = lsqr_min_norm(_block_map(b, a, q), y, max_inner, tol)
        return FactorPair(z.reshape(-1, r), q), iters
    raise ValueError(f"update must be 'u' or 'v', got {update!r}")


def altmin_solve(
    problem: Problem,
    init: FactorPair,
    config: GnimcConfig | None = None,
    truth: RecoveryMetric | None = None,
) -> tuple[FactorPair, SolveReport]:
    """Alternating minimization with QR; one outer iteration updates V then U.

    Each half-step is solved to the full ``inner_iters_high_error`` cap:
    a truncated half-step is no longer a block minimization.
    """
    config = config or GnimcConfig()
    problem.require_observed()
    a, b = problem.a_rows, problem.b_rows
    monitor = Monitor("altmin", problem, config, truth)
    iterate = init
    monitor.start(iterate, observed_entries(a, b, iterate.u, iterate.v))
    cap = config.inner_iters_high_error
    index = 0
    while True:
        index += 1
        try:
            iterate, k1 = altmin_half_step(problem, iterate, "v", cap, config.lsqr_tol)
            iterate, k2 = altmin_half_step(problem, iterate, "u", cap, config.lsqr_tol)
        except (RankDeficient, NonFinite) as exc:
            monitor.fail(f"{type(exc).__name__}: {exc}")
            break
        if monitor.update(index, iterate, observed_entries(a, b, iterate.u, iterate.v), k1 + k2):
            break
    return iterate, monitor.report
