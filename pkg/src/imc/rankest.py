"""Rank estimation from the spectral gaps of the back-projected observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import SampleSet, SideInfo


class ZeroObservation(ValueError):
    """All observed values are zero, so every gap is undefined."""


@dataclass(frozen=True)
class RankEstimate:
    r_hat: int
    gaps: np.ndarray
    d_const: float
    sigma_hat: np.ndarray


def default_d_const(d1: int, d2: int, num_samples: int) -> float:
    """``(sqrt(d1 d2) / |Omega|)^(1/2)``."""
    return float(np.sqrt(np.sqrt(d1 * d2) / num_samples))


def spectral_gaps(sigma: np.ndarray, d_const: float) -> np.ndarray:
    """``g_i = s_i / (s_{i+1} + D s_1 sqrt(i))`` for ``i = 1 .. len(sigma) - 1``.

    A zero denominator gives ``+inf`` (or 0 when the numerator is also zero).
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 1 or sigma.size < 2:
        raise ValueError("need at least two singular values")
    if np.any(np.diff(sigma) > 0):
        raise ValueError("singular values must be sorted in descending order")
    if d_const < 0:
        raise ValueError("d_const must be nonnegative")
    idx = np.arange(1, sigma.size)
    num = sigma[:-1]
    den = sigma[1:] + d_const * sigma[0] * np.sqrt(idx)
    with np.errstate(divide="ignore", invalid="ignore"):
        gaps = num / den
    gaps[den == 0] = np.where(num[den == 0] > 0, np.inf, 0.0)
    return gaps


def true_gaps(spectrum, d_const: float) -> np.ndarray:
    """Gaps of an exact descending spectrum (same formula as the estimator)."""
    return spectral_gaps(np.asarray(spectrum, dtype=float), d_const)


def estimate_rank(side: SideInfo, samples: SampleSet, y, d_const: float | None = None) -> RankEstimate:
    """``argmax_i`` of the spectral gaps of ``A^T P_Omega^*(y) B / p``, smallest index on ties.

    The ``d1 x d2`` matrix has the same nonzero singular values as the
    ``n1 x n2`` back-projection, since ``A`` and ``B`` are isometries.
    Singular values below ``sigma_1 max(d1, d2) eps`` are set to zero, so an
    exactly low-rank back-projection gets an infinite gap when ``d_const = 0``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (samples.size,):
        raise ValueError(f"expected {samples.size} values, got shape {y.shape}")
    if not np.any(y):
        raise ZeroObservation("all observed values are zero")
    d1, d2 = side.d1, side.d2
    if min(d1, d2) < 2:
        raise ValueError("rank estimation needs min(d1, d2) >= 2")
    if d_const is None:
        d_const = default_d_const(d1, d2, samples.size)
    elif not 0 <= d_const < 1:
        raise ValueError("d_const must lie in [0, 1)")
    a = side.A[samples.rows]
    b = side.B[samples.cols]
    x_hat = (a * (y / samples.p)[:, None]).T @ b
    sigma = np.linalg.svd(x_hat, compute_uv=False)
    # values below the numerical-rank tolerance are rounding noise
    sigma[sigma <= sigma[0] * max(d1, d2) * np.finfo(float).eps] = 0.0
    gaps = spectral_gaps(sigma, d_const)
    # argmax returns the first maximizer, i.e. the smallest index
    return RankEstimate(int(np.argmax(gaps)) + 1, gaps, float(d_const), sigma)
