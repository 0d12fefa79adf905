"""Gaussian posterior moments via symmetric positive-definite solves.

The posterior over x given (y, Phi) with prior precisions lambda and noise
precision gamma is N(mu, Sigma) with

    Sigma = (gamma Phi^T Phi + diag(lambda))^-1
    mu    = gamma Sigma Phi^T y

The N x N precision matrix is factorized with a Cholesky decomposition; on
failure a diagonal jitter is added, escalating 1e-10 -> 1e-4 by factors of
ten before giving up.  mu is computed literally as gamma * Sigma @ (Phi^T y)
so the stated relation between the returned moments holds to roundoff even
for badly scaled precision fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack as _lapack

from .model import SensingProblem

__all__ = [
    "NumericalConditioningError",
    "PosteriorMoments",
    "compute_posterior",
    "residual_stats",
]

# Jitter escalation ladder used when the Cholesky factorization fails.
JITTER_LEVELS = tuple(10.0 ** k for k in range(-10, -3))


class NumericalConditioningError(RuntimeError):
    """Raised when the precision matrix cannot be factorized even after the
    full jitter ladder has been attempted."""

    def __init__(self, jitter_levels):
        self.jitter_levels = tuple(jitter_levels)
        super().__init__(
            "Cholesky factorization failed; attempted diagonal jitters "
            f"{self.jitter_levels}"
        )


@dataclass(frozen=True)
class PosteriorMoments:
    """Posterior mean, covariance, and its cached diagonal."""

    mu: np.ndarray
    sigma: np.ndarray
    sigma_diag: np.ndarray


def _spd_inverse(pmat: np.ndarray) -> np.ndarray:
    """Invert a symmetric positive-definite matrix, escalating jitter on
    factorization failure.  The result is exactly symmetric."""
    n = pmat.shape[0]
    attempted = []
    for jit in (0.0,) + JITTER_LEVELS:
        if jit == 0.0:
            work = pmat.copy()
        else:
            attempted.append(jit)
            work = pmat.copy()
            work.flat[:: n + 1] += jit
        chol, info = _lapack.dpotrf(work, lower=1, overwrite_a=1)
        if info != 0:
            continue
        inv, info = _lapack.dpotri(chol, lower=1, overwrite_c=1)
        if info != 0:
            continue
        lower = np.tril(inv)
        return lower + np.tril(inv, -1).T
    if not attempted:
        attempted = list(JITTER_LEVELS)
    raise NumericalConditioningError(attempted)


def _moments_from_gram(gram: np.ndarray, phi_t_y: np.ndarray, lam: np.ndarray,
                       gamma: float) -> PosteriorMoments:
    pmat = gamma * gram
    n = pmat.shape[0]
    pmat.flat[:: n + 1] += lam
    sigma = _spd_inverse(pmat)
    mu = gamma * (sigma @ phi_t_y)
    return PosteriorMoments(mu=mu, sigma=sigma, sigma_diag=np.diag(sigma).copy())


def compute_posterior(problem: SensingProblem, lam, gamma: float) -> PosteriorMoments:
    """Posterior moments of x for given prior precisions and noise precision.

    Parameters
    ----------
    problem : SensingProblem
    lam : array, shape (N,)
        Effective prior precisions; all entries must be > 0.
    gamma : float
        Noise precision, > 0.

    Raises
    ------
    NumericalConditioningError
        If the precision matrix cannot be factorized after jitter escalation.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (problem.n,):
        raise ValueError(f"lam must have length N={problem.n}, got shape {lam.shape}")
    if not np.all(lam > 0):
        raise ValueError("all prior precisions must be > 0")
    if not (np.isfinite(gamma) and gamma > 0):
        raise ValueError(f"gamma must be finite and > 0, got {gamma}")
    gram = problem.phi.T @ problem.phi
    phi_t_y = problem.phi.T @ problem.y
    return _moments_from_gram(gram, phi_t_y, lam, float(gamma))


def residual_stats(problem: SensingProblem, moments: PosteriorMoments):
    """Data-fit quantities used by the noise-precision update.

    Returns
    -------
    resid_sq : float
        ||y - Phi mu||^2.
    trace_term : float
        tr(Sigma Phi^T Phi).
    """
    if moments.mu.shape != (problem.n,):
        raise ValueError("moments do not match the problem dimension")
    r = problem.y - problem.phi @ moments.mu
    resid_sq = float(r @ r)
    trace_term = float(np.sum((problem.phi @ moments.sigma) * problem.phi))
    return resid_sq, max(trace_term, 0.0)
