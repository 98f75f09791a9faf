"""Problem data model, synthetic generator, observation model and metrics."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Literal

import numpy as np

from .linops import orthonormalize

NoiseTarget = Literal["entries", "features", "both"]
NOISE_TARGETS = ("entries", "features", "both")
FORMAT_VERSION = 1


class BadDims(ValueError):
    pass


class NotIsometry(ValueError):
    pass


class ZeroTruth(ValueError):
    pass


def incoherence(iso: np.ndarray, tol: float = 1e-8) -> float:
    """``max_i n * ||row_i||^2 / d`` for an ``n x d`` isometry."""
    iso = np.asarray(iso, dtype=float)
    n, d = iso.shape
    gram_err = np.linalg.norm(iso.T @ iso - np.eye(d))
    if gram_err > tol:
        raise NotIsometry(f"columns are not orthonormal (||X^T X - I||_F = {gram_err:.2e})")
    return float(n * np.max(np.einsum("ij,ij->i", iso, iso)) / d)


@dataclass(frozen=True)
class SideInfo:
    """Feature matrices ``A`` (n1 x d1) and ``B`` (n2 x d2), both isometries."""

    A: np.ndarray
    B: np.ndarray

    @cached_property
    def mu(self) -> float:
        return max(incoherence(self.A), incoherence(self.B))

    @property
    def n1(self) -> int:
        return self.A.shape[0]

    @property
    def n2(self) -> int:
        return self.B.shape[0]

    @property
    def d1(self) -> int:
        return self.A.shape[1]

    @property
    def d2(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class SampleSet:
    """Distinct observed cells ``(rows[k], cols[k])`` of an ``n1 x n2`` grid."""

    rows: np.ndarray
    cols: np.ndarray
    n1: int
    n2: int

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        if rows.shape != cols.shape or rows.ndim != 1 or rows.size == 0:
            raise BadDims("rows and cols must be equal-length nonempty 1-d arrays")
        if rows.min() < 0 or rows.max() >= self.n1 or cols.min() < 0 or cols.max() >= self.n2:
            raise BadDims("sample index out of range")
        flat = rows * self.n2 + cols
        if np.unique(flat).size != flat.size:
            raise BadDims("duplicate sample indices")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)

    @property
    def size(self) -> int:
        return self.rows.size

    @property
    def p(self) -> float:
        return self.size / (self.n1 * self.n2)


@dataclass(frozen=True)
class FactorPair:
    """Iterate ``(U, V)`` standing for ``M = U V^T``."""

    u: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def product(self) -> np.ndarray:
        return self.u @ self.v.T

    def imbalance(self) -> float:
        return float(np.linalg.norm(self.u.T @ self.u - self.v.T @ self.v))


@dataclass(frozen=True)
class Problem:
    """A synthetic IMC instance.

    ``side`` holds the true features; ``observed_side`` is what solvers see
    when the features were corrupted (``None`` means the true ones).
    """

    side: SideInfo
    m_star: np.ndarray
    spectrum: np.ndarray
    r: int
    seed: int | None = None
    samples: SampleSet | None = None
    y: np.ndarray | None = None
    noise_sigma: float = 0.0
    noise_target: str = "entries"
    noise_seed: int | None = None
    observed_side: SideInfo | None = None

    @property
    def kappa(self) -> float:
        return float(self.spectrum[0] / self.spectrum[-1])

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.side.n1, self.side.n2, self.side.d1, self.side.d2)

    @property
    def solver_side(self) -> SideInfo:
        return self.observed_side if self.observed_side is not None else self.side

    def require_observed(self) -> None:
        if self.samples is None or self.y is None:
            raise ValueError("problem has no observations; call sample_omega/observe first")

    @cached_property
    def a_rows(self) -> np.ndarray:
        """Rows of the solver-side ``A`` at the sampled row indices (|Omega| x d1)."""
        self.require_observed()
        return np.ascontiguousarray(self.solver_side.A[self.samples.rows])

    @cached_property
    def b_rows(self) -> np.ndarray:
        """Rows of the solver-side ``B`` at the sampled column indices (|Omega| x d2)."""
        self.require_observed()
        return np.ascontiguousarray(self.solver_side.B[self.samples.cols])

    def truth_dense(self) -> np.ndarray:
        return self.side.A @ self.m_star @ self.side.B.T

    def exact_entries(self) -> np.ndarray:
        """Noise-free values of ``X* = A M* B^T`` on the sample set."""
        if self.samples is None:
            raise ValueError("problem has no sample set")
        a = self.side.A[self.samples.rows]
        b = self.side.B[self.samples.cols]
        return np.einsum("kj,kj->k", a @ self.m_star, b)


def linear_spectrum(r: int, kappa: float) -> np.ndarray:
    """``r`` values linearly spaced between 1 and ``kappa``, sorted descending."""
    if r == 1:
        if kappa != 1:
            raise BadDims("a rank-1 spectrum has condition number 1")
        return np.array([1.0])
    return np.sort(np.linspace(1.0, kappa, r))[::-1].copy()


def generate(
    n1: int,
    n2: int,
    d1: int,
    d2: int,
    r: int,
    kappa: float = 1.0,
    seed: int = 0,
    spectrum: np.ndarray | None = None,
) -> Problem:
    """Random instance with orthonormalized Gaussian ``A, B, U, V`` and ``M* = U D V^T``.

    ``D`` is linearly spaced between 1 and ``kappa`` unless an explicit
    ``spectrum`` is given, in which case ``r`` must equal its length.
    """
    if spectrum is not None:
        spectrum = np.sort(np.asarray(spectrum, dtype=float))[::-1].copy()
        if spectrum.size != r:
            raise BadDims(f"spectrum has {spectrum.size} values but r = {r}")
        if spectrum[-1] <= 0:
            raise BadDims("spectrum must be strictly positive")
    else:
        if kappa < 1:
            raise BadDims(f"kappa must be >= 1, got {kappa}")
        spectrum = linear_spectrum(r, kappa)
    if not (1 <= r <= d1 <= n1 and r <= d2 <= n2):
        raise BadDims(f"need 1 <= r <= d_i <= n_i, got n=({n1},{n2}) d=({d1},{d2}) r={r}")

    rng = np.random.default_rng(seed)
    A = orthonormalize(rng.standard_normal((n1, d1)))
    B = orthonormalize(rng.standard_normal((n2, d2)))
    U = orthonormalize(rng.standard_normal((d1, r)))
    V = orthonormalize(rng.standard_normal((d2, r)))
    m_star = (U * spectrum) @ V.T
    return Problem(side=SideInfo(A, B), m_star=m_star, spectrum=spectrum, r=r, seed=seed)


def samples_for_ratio(d1: int, d2: int, r: int, rho: float) -> int:
    """|Omega| for oversampling ratio ``rho`` over the (d1 + d2 - r) r degrees of freedom."""
    return int(round(rho * (d1 + d2 - r) * r))


def sample_omega(n1: int, n2: int, m: int, seed: int) -> SampleSet:
    """``m`` distinct cells drawn uniformly without replacement, in row-major order."""
    total = n1 * n2
    if not 1 <= m <= total:
        raise BadDims(f"|Omega| = {m} outside [1, {total}]")
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=m, replace=False))
    rows, cols = np.divmod(flat, n2)
    return SampleSet(rows, cols, n1, n2)


def with_samples(problem: Problem, samples: SampleSet) -> Problem:
    if (samples.n1, samples.n2) != (problem.side.n1, problem.side.n2):
        raise BadDims("sample grid does not match the problem dimensions")
    return dataclasses.replace(problem, samples=samples, y=None, observed_side=None)


def observe(
    problem: Problem,
    noise_sigma: float = 0.0,
    seed: int = 0,
    target: NoiseTarget = "entries",
) -> Problem:
    """Attach observations ``y`` on the sample set.

    ``target`` selects where i.i.d. ``N(0, noise_sigma^2)`` noise goes: the
    observed entries, the feature matrices (perturbed entrywise, then
    re-orthonormalized for the solver), or both.
    """
    if problem.samples is None:
        raise ValueError("problem has no sample set")
    if target not in NOISE_TARGETS:
        raise ValueError(f"noise target must be one of {NOISE_TARGETS}, got {target!r}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    y = problem.exact_entries()
    observed_side = None
    if noise_sigma > 0 and target in ("entries", "both"):
        y = y + noise_sigma * rng.standard_normal(y.size)
    if noise_sigma > 0 and target in ("features", "both"):
        A = problem.side.A + noise_sigma * rng.standard_normal(problem.side.A.shape)
        B = problem.side.B + noise_sigma * rng.standard_normal(problem.side.B.shape)
        observed_side = SideInfo(orthonormalize(A), orthonormalize(B))
    return dataclasses.replace(
        problem,
        y=y,
        noise_sigma=float(noise_sigma),
        noise_target=target,
        noise_seed=seed,
        observed_side=observed_side,
    )


def rel_rmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """``||truth - estimate||_F / ||truth||_F``."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise BadDims(f"shape mismatch {estimate.shape} vs {truth.shape}")
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ZeroTruth("truth has zero Frobenius norm")
    return float(np.linalg.norm(truth - estimate) / denom)


class RecoveryMetric:
    """Distance between a factored estimate ``A~ U V^T B~^T`` and ``X*`` without forming n1 x n2 matrices.

    When the solver sees the true features, ``A`` and ``B`` are isometries and
    the distance is ``||U V^T - M*||_F``. With corrupted features both column
    spans are stacked and QR-compressed once, which keeps the evaluation exact.
    """

    def __init__(self, problem: Problem):
        self.m_star = problem.m_star
        self.truth_norm = float(np.linalg.norm(problem.m_star))
        if self.truth_norm == 0:
            raise ZeroTruth("truth has zero Frobenius norm")
        self._shared = problem.observed_side is None
        if not self._shared:
            obs, true = problem.observed_side, problem.side
            _, self._ra = np.linalg.qr(np.hstack([true.A, obs.A]))
            _, self._rb = np.linalg.qr(np.hstack([true.B, obs.B]))
            self._d1, self._d2 = true.d1, true.d2

    def error(self, u: np.ndarray, v: np.ndarray) -> float:
        m = u @ v.T
        if self._shared:
            return float(np.linalg.norm(m - self.m_star))
        d1, d2 = self._d1, self._d2
        core = np.zeros((self._ra.shape[1], self._rb.shape[1]))
        core[:d1, :d2] = self.m_star
        core[d1:, d2:] = -m
        return float(np.linalg.norm(self._ra @ core @ self._rb.T))

    def rel_rmse(self, u: np.ndarray, v: np.ndarray) -> float:
        return self.error(u, v) / self.truth_norm


def problem_to_dict(problem: Problem) -> dict:
    """JSON-ready replay record; ``A``, ``B`` and ``M*`` are regenerated from the seed."""
    if problem.seed is None:
        raise ValueError("only seeded problems can be serialized")
    n1, n2, d1, d2 = problem.dims
    doc = {
        "format_version": FORMAT_VERSION,
        "n1": n1,
        "n2": n2,
        "d1": d1,
        "d2": d2,
        "r": problem.r,
        "kappa": problem.kappa,
        "seed": problem.seed,
        "spectrum": problem.spectrum.tolist(),
        "noise_sigma": problem.noise_sigma,
        "noise_target": problem.noise_target,
        "noise_seed": problem.noise_seed,
        "omega_rows": None,
        "omega_cols": None,
        "y": None,
    }
    if problem.samples is not None:
        doc["omega_rows"] = problem.samples.rows.tolist()
        doc["omega_cols"] = problem.samples.cols.tolist()
    if problem.y is not None:
        doc["y"] = problem.y.tolist()
    return doc


def problem_from_dict(doc: dict) -> Problem:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported problem format version {doc.get('format_version')!r}")
    problem = generate(
        doc["n1"], doc["n2"], doc["d1"], doc["d2"], doc["r"],
        seed=doc["seed"], spectrum=np.asarray(doc["spectrum"]),
    )
    if doc.get("omega_rows") is None:
        return problem
    samples = SampleSet(np.asarray(doc["omega_rows"]), np.asarray(doc["omega_cols"]), doc["n1"], doc["n2"])
    problem = with_samples(problem, samples)
    if doc.get("y") is None:
        return problem
    observed_side = None
    if doc["noise_sigma"] > 0 and doc["noise_target"] in ("features", "both"):
        # features are re-derived from the recorded noise seed
        observed_side = observe(problem, doc["noise_sigma"], doc["noise_seed"], doc["noise_target"]).observed_side
    return dataclasses.replace(
        problem,
        y=np.asarray(doc["y"], dtype=float),
        noise_sigma=float(doc["noise_sigma"]),
        noise_target=doc["noise_target"],
        noise_seed=doc["noise_seed"],
        observed_side=observed_side,
    )


def save_problem(problem: Problem, path: str | Path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(problem)))


def load_problem(path: str | Path) -> Problem:
    return problem_from_dict(json.loads(Path(path).read_text()))
