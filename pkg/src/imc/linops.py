"""Dense kernels and a small linear-operator abstraction.

Everything here is a pure function of its inputs. QR and SVD are thin
wrappers over LAPACK (Householder QR, bidiagonalization SVD) that pin down
sign conventions so outputs are reproducible; LSQR is implemented directly
because the solvers depend on its start-from-zero minimal-norm behaviour.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_LSQR_TOL = 1e-12


class RankDeficient(np.linalg.LinAlgError):
    """Raised when a factor that must have full column rank does not."""


class NonFinite(FloatingPointError):
    """Raised when an iteration produces NaN or Inf."""


def qr_thin(m: np.ndarray, rank_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Thin Householder QR with a nonnegative diagonal in ``R``.

    Raises :class:`RankDeficient` when the smallest singular value of ``m``
    is below ``rank_tol`` times the largest.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] < m.shape[1]:
        raise ValueError(f"qr_thin needs a tall matrix, got shape {m.shape}")
    q, r = np.linalg.qr(m, mode="reduced")
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q = q * signs
    r = r * signs[:, None]
    # singular values of R equal those of m
    s = np.linalg.svd(r, compute_uv=False)
    if s.size and (not np.isfinite(s).all() or s[-1] <= rank_tol * s[0]):
        raise RankDeficient(
            f"numerical rank below {m.shape[1]} (sigma_min/sigma_max = "
            f"{s[-1] / s[0] if s[0] > 0 else 0.0:.3e})"
        )
    return q, r


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Orthonormal basis for the column span of a full-rank tall matrix."""
    return qr_thin(m)[0]


def svd_truncated(m: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best rank-``k`` approximation factors ``(U, S, V)`` with ``m ~ U diag(S) V^T``.

    Columns are signed so that the largest-magnitude entry of every left
    singular vector is positive.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not 1 <= k <= min(m.shape):
        raise ValueError(f"rank {k} outside [1, {min(m.shape)}]")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    u, s, v = u[:, :k], s[:k], vt[:k].T
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivots, np.arange(k)])
    signs[signs == 0] = 1.0
    return u * signs, s, v * signs


def truncate_rank(m: np.ndarray, k: int) -> np.ndarray:
    """Rank-``k`` truncated SVD of ``m`` as a dense matrix."""
    u, s, v = svd_truncated(m, k)
    return (u * s) @ v.T


@dataclass(frozen=True)
class LinearMap:
    """A linear map R^in_dim -> R^out_dim given by forward and adjoint callables."""

    in_dim: int
    out_dim: int
    forward: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "LinearMap":
        mat = np.asarray(mat, dtype=float)
        return cls(mat.shape[1], mat.shape[0], mat.__matmul__, mat.T.__matmul__)

    def to_matrix(self) -> np.ndarray:
        """Materialize by applying the map to every basis vector (small maps only)."""
        eye = np.eye(self.in_dim)
        return np.column_stack([self.forward(e) for e in eye])


def adjoint_mismatch(op: LinearMap, rng: np.random.Generator, trials: int = 5) -> float:
    """Largest relative gap between <op(x), y> and <x, op^T(y)> over random pairs."""
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.in_dim)
        y = rng.standard_normal(op.out_dim)
        lhs = float(op.forward(x) @ y)
        rhs = float(x @ op.adjoint(y))
        scale = max(abs(lhs), abs(rhs), np.linalg.norm(x) * np.linalg.norm(y) * 1e-300)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def lsqr_min_norm(
    op: LinearMap | np.ndarray,
    b: np.ndarray,
    max_iters: int = 1000,
    tol: float = DEFAULT_LSQR_TOL,
) -> tuple[np.ndarray, int]:
    """LSQR (Paige & Saunders) started from zero.

    Stops when ``||r|| <= tol * ||b||`` (consistent systems) or when the
    normal-equations residual satisfies ``||op^T r|| <= tol * ||op|| * ||r||``,
    or after ``max_iters`` iterations. Starting from zero keeps every iterate
    in the row space of ``op``, so the result approximates the minimal-norm
    least-squares solution.

    Returns ``(x, iterations)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if isinstance(op, np.ndarray):
        op = LinearMap.from_matrix(op)
    b = np.asarray(b, dtype=float)
    if b.shape != (op.out_dim,):
        raise ValueError(f"rhs has shape {b.shape}, operator codomain is {op.out_dim}")

    x = np.zeros(op.in_dim)
    u = b.copy()
    beta = np.linalg.norm(u)
    if beta == 0.0:
        return x, 0
    u /= beta
    v = op.adjoint(u)
    alpha = np.linalg.norm(v)
    if alpha == 0.0:
        return x, 0
    v /= alpha
    w = v.copy()

    bnorm = beta
    anorm_sq = 0.0
    phibar, rhobar = beta, alpha
    itn = 0
    while itn < max_iters:
        itn += 1
        u = op.forward(v) - alpha * u
        beta = np.linalg.norm(u)
        if beta > 0.0:
            u /= beta
        anorm_sq += alpha * alpha + beta * beta
        v = op.adjoint(u) - beta * v
        alpha = np.linalg.norm(v)
        if alpha > 0.0:
            v /= alpha

        rho = np.hypot(rhobar, beta)
        c, s = rhobar / rho, beta / rho
        theta = s * alpha
        rhobar = -c * alpha
        phi = c * phibar
        phibar = s * phibar

        x += (phi / rho) * w
        w = v - (theta / rho) * w

        if not (np.isfinite(phibar) and np.isfinite(x[0]) and np.isfinite(alpha)):
            raise NonFinite(f"LSQR diverged at iteration {itn}")
        rnorm = abs(phibar)
        arnorm = alpha * abs(c * phibar)
        if rnorm <= tol * bnorm:
            break
        if arnorm <= tol * np.sqrt(anorm_sq) * rnorm:
            break
        if alpha == 0.0 or beta == 0.0:
            # Krylov space exhausted: x is exact
            break
    if not np.isfinite(x).all():
        raise NonFinite("LSQR produced non-finite entries")
    return x, itn
