"""EM solver for the coupled-prior model, with SBL and PC-SBL reductions.

One iteration runs, in order: alpha update -> cap/prune -> coupling-weight
update -> posterior (mu, Sigma) -> noise precision, repeating until the
relative change of mu drops below tolerance.  The alpha update consumes the
posterior moments computed at the end of the previous iteration; the very
first iteration consumes the posterior of the initial hyperparameters.

The loop runs in two phases.  The warm-up phase uses the exact conditional
second moments mu_i^2 + Sigma_ii throughout.  Once the posterior mean has
stabilized (relative change below ``refine_tol``), the refinement phase
zeroes out the posterior-variance term of every coefficient whose mean
energy is insignificant (mu_i^2 < Sigma_ii), in both the alpha update and
the coupling-weight equations.  Coefficients that carry no significant
energy then lose the variance floor that would otherwise keep them weakly
active as noise absorbers: their precisions escalate, the support hardens,
and the noise-precision estimate settles near the noise-consistent level
instead of drifting upward.  Exact-EM behavior (no refinement phase) is
available via ``refinement=False`` and is used by the reduction oracles.

The coupling-weight stationarity condition for edge i is

    f(b) = (c-1)/b - d + [a_{i+1}/(A + b a_{i+1}) + a_i/(E + b a_i)] / 2 - B

with A = a_i + b_{i-1} a_{i-1}, E = a_{i+1} + b_{i+1} a_{i+2} and
B = [a_{i+1} (mu_i^2 + S_ii) + a_i (mu_{i+1}^2 + S_{i+1,i+1})] / 2.  For
c > 1, f is strictly decreasing and strictly convex on (0, inf), has exactly
one positive root, and that root lies strictly inside (0, c/d).  Clearing
denominators turns f = 0 into a cubic, so the root can also be obtained in
closed form; the default solver is a bracketed Newton iteration on f (the
bracket is certified by the two properties above), with the closed-form
cubic available as a cross-check method.

Edges are updated in ascending index order, each solve seeing the freshest
neighboring weights (Gauss-Seidel style).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    CouplingScheme,
    CouplingVector,
    HyperPriors,
    PrecisionField,
    SensingProblem,
    SolverState,
    prior_precisions,
)
from .posterior import PosteriorMoments, _moments_from_gram, residual_stats

__all__ = [
    "InternalInvariantError",
    "SolveResult",
    "SolverConfig",
    "beta_solve_stats",
    "beta_stationarity",
    "evaluate_q_alpha_beta",
    "reset_beta_solve_stats",
    "run_em",
    "solve_beta",
    "update_alpha",
    "update_beta",
    "update_eta",
    "update_gamma",
]

ROOT_METHODS = ("bracketed", "cardano")


class InternalInvariantError(RuntimeError):
    """A certified property of the coupling-weight root failed numerically
    (bracket does not straddle zero, or the root left (0, c/d))."""


# Counters: every scalar root solve is logged so long runs can certify that
# the bracket and the (0, c/d) bound never failed.
_BETA_STATS = {"calls": 0, "bracket_failures": 0, "bound_violations": 0}


def beta_solve_stats() -> dict:
    """Snapshot of root-solve counters for the current process."""
    return dict(_BETA_STATS)


def reset_beta_solve_stats() -> None:
    for key in _BETA_STATS:
        _BETA_STATS[key] = 0


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for one EM run.  Defaults follow the noninformative choices
    a = b = g = h = 1e-4 and (c, d) = (10, 1).

    ``refinement`` enables the small-energy refinement phase once the
    relative change of mu first drops below ``refine_tol``; with
    ``refinement=False`` the loop is the plain exact-moment EM.
    """

    hyperpriors: HyperPriors = field(default_factory=HyperPriors)
    scheme: CouplingScheme = field(default_factory=CouplingScheme.spp)
    max_iterations: int = 500
    rel_tol: float = 1e-6
    alpha_cap: float = 1e10
    init_alpha: float = 1.0
    init_beta: float = 1.0
    init_gamma: float = 1.0
    root_method: str = "bracketed"
    refinement: bool = True
    refine_tol: float = 1e-2
    track_history: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (np.isfinite(self.rel_tol) and self.rel_tol > 0):
            raise ValueError("rel_tol must be finite and > 0")
        if not (np.isfinite(self.refine_tol) and self.refine_tol > 0):
            raise ValueError("refine_tol must be finite and > 0")
        if not (np.isfinite(self.alpha_cap) and self.alpha_cap > 0):
            raise ValueError("alpha_cap must be finite and > 0")
        if not (np.isfinite(self.init_alpha) and self.init_alpha > 0):
            raise ValueError("init_alpha must be finite and > 0")
        if not (np.isfinite(self.init_beta) and self.init_beta >= 0):
            raise ValueError("init_beta must be finite and >= 0")
        if not (np.isfinite(self.init_gamma) and self.init_gamma > 0):
            raise ValueError("init_gamma must be finite and > 0")
        if self.root_method not in ROOT_METHODS:
            raise ValueError(f"root_method must be one of {ROOT_METHODS}")


@dataclass(frozen=True)
class SolveResult:
    """Outcome of one EM run; x_hat is the final posterior mean."""

    x_hat: np.ndarray
    state: SolverState
    iterations: int
    converged: bool
    history: list | None = None


def update_eta(moments: PosteriorMoments, beta) -> np.ndarray:
    """Coupled second moments driving the alpha update:

    eta_i = (mu_i^2 + S_ii) + beta_i (mu_{i+1}^2 + S_{i+1,i+1})
                            + beta_{i-1} (mu_{i-1}^2 + S_{i-1,i-1})
    """
    beta = np.asarray(beta, dtype=float)
    m2 = moments.mu ** 2 + moments.sigma_diag
    if beta.shape != (m2.size - 1,):
        raise ValueError(f"beta must have length N-1={m2.size - 1}, got shape {beta.shape}")
    eta = m2.copy()
    eta[:-1] += beta * m2[1:]
    eta[1:] += beta * m2[:-1]
    return eta


def update_alpha(eta, hyper: HyperPriors, cap: float) -> np.ndarray:
    """alpha_i = min((a + 1/2) / (b + eta_i / 2), cap)."""
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < 0):
        raise ValueError("eta entries must be >= 0")
    return np.minimum((hyper.a + 0.5) / (hyper.b + 0.5 * eta), cap)


def _edge_terms(j: int, alpha: np.ndarray, beta: np.ndarray, m2: np.ndarray):
    """(A, E, B) coefficients of the stationarity function for edge j."""
    n = alpha.size
    a_term = alpha[j] + (beta[j - 1] * alpha[j - 1] if j > 0 else 0.0)
    e_term = alpha[j + 1] + (beta[j + 1] * alpha[j + 2] if j + 1 < n - 1 else 0.0)
    b_term = 0.5 * (alpha[j + 1] * m2[j] + alpha[j] * m2[j + 1])
    return a_term, e_term, b_term


def beta_stationarity(beta_i: float, i: int, alpha, beta,
                      moments: PosteriorMoments, hyper: HyperPriors) -> float:
    """Evaluate the stationarity function f at beta_i for edge i.

    f is the partial derivative of the hyperparameter objective with respect
    to the i-th coupling weight; it is strictly decreasing on (0, inf).
    """
    if not beta_i > 0:
        raise ValueError(f"beta_i must be > 0, got {beta_i}")
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if not 0 <= i <= alpha.size - 2:
        raise ValueError(f"edge index {i} out of range for N={alpha.size}")
    m2 = moments.mu ** 2 + moments.sigma_diag
    a_term, e_term, b_term = _edge_terms(i, alpha, beta, m2)
    return (
        (hyper.c - 1.0) / beta_i
        - hyper.d
        + 0.5 * (alpha[i + 1] / (a_term + beta_i * alpha[i + 1])
                 + alpha[i] / (e_term + beta_i * alpha[i]))
        - b_term
    )


def _root_bracketed(a_term, e_term, b_term, a_i, a_ip1, c, d, start):
    """Unique positive root of f via Newton safeguarded by bisection.

    f is strictly decreasing and convex, positive at the lower bracket edge
    and negative at c/d, so the bracket always shrinks and Newton converges
    once it lands inside.
    """
    c1 = c - 1.0
    lo = min(1e-12, 0.1 * c1 / (b_term + d + 1.0))
    hi = c / d

    def f_and_slope(b):
        u = a_term + b * a_ip1
        v = e_term + b * a_i
        fx = c1 / b - d + 0.5 * (a_ip1 / u + a_i / v) - b_term
        dfx = -c1 / (b * b) - 0.5 * ((a_ip1 / u) ** 2 + (a_i / v) ** 2)
        return fx, dfx

    f_lo, _ = f_and_slope(lo)
    f_hi, _ = f_and_slope(hi)
    if not (f_lo > 0.0 and f_hi < 0.0):
        _BETA_STATS["bracket_failures"] += 1
        raise InternalInvariantError(
            f"root bracket failed: f({lo:.3e})={f_lo:.3e}, f({hi:.3e})={f_hi:.3e}"
        )

    x = min(max(start, lo), hi)
    if x == lo or x == hi:
        x = math.sqrt(lo * hi)
    for _ in range(120):
        fx, dfx = f_and_slope(x)
        if fx > 0.0:
            lo = x
        elif fx < 0.0:
            hi = x
        else:
            return x
        nxt = x - fx / dfx
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= 1e-15 * nxt:
            return nxt
        x = nxt
    return x


def _root_cardano(a_term, e_term, b_term, a_i, a_ip1, c, d):
    """Unique positive root via the closed-form solution of the cleared
    cubic.  The one-real-root branch uses the cancellation-safe cube-root
    pairing; the three-real-root branch (nonpositive discriminant) uses the
    trigonometric form."""
    at = 2.0 * (b_term + d) * a_i * a_ip1
    bt = 2.0 * (b_term + d) * (a_term * a_i + e_term * a_ip1) - 2.0 * c * a_i * a_ip1
    ct = 2.0 * (b_term + d) * a_term * e_term + (1.0 - 2.0 * c) * (a_term * a_i + e_term * a_ip1)
    dt = 2.0 * (1.0 - c) * a_term * e_term

    p = (3.0 * at * ct - bt * bt) / (3.0 * at * at)
    q = (27.0 * at * at * dt - 9.0 * at * bt * ct + 2.0 * bt ** 3) / (27.0 * at ** 3)
    shift = bt / (3.0 * at)
    disc = (0.5 * q) ** 2 + (p / 3.0) ** 3

    if disc > 0.0:
        sq = math.sqrt(disc)
        big = -0.5 * q - sq if q >= 0.0 else -0.5 * q + sq
        u = math.copysign(abs(big) ** (1.0 / 3.0), big)
        t = u - p / (3.0 * u) if u != 0.0 else 0.0
        candidates = [t - shift]
    elif p == 0.0:
        candidates = [-shift]
    else:
        rp = math.sqrt(-p / 3.0)
        arg = min(1.0, max(-1.0, 1.5 * q / (p * rp)))
        theta = math.acos(arg)
        candidates = [
            2.0 * rp * math.cos((theta - 2.0 * math.pi * k) / 3.0) - shift
            for k in range(3)
        ]

    positive = [r for r in candidates if r > 0.0]
    if not positive:
        raise InternalInvariantError(
            f"closed-form cubic produced no positive root among {candidates}"
        )
    if len(positive) == 1:
        return positive[0]
    # Degenerate rounding can surface spurious extra positives; keep the one
    # that actually satisfies the stationarity equation.
    def resid(b):
        return abs((c - 1.0) / b - d
                   + 0.5 * (a_ip1 / (a_term + b * a_ip1) + a_i / (e_term + b * a_i))
                   - b_term)
    return min(positive, key=resid)


def _solve_edge(a_term, e_term, b_term, a_i, a_ip1, hyper, start, method):
    _BETA_STATS["calls"] += 1
    root = None
    if method == "cardano":
        # The closed form loses digits when the coefficient scales span many
        # orders (capped precisions next to active coefficients); fall back
        # to the certified bracket when its output is unusable.
        try:
            root = _root_cardano(a_term, e_term, b_term, a_i, a_ip1,
                                 hyper.c, hyper.d)
        except InternalInvariantError:
            root = None
        if root is not None and not 0.0 < root < hyper.c / hyper.d:
            root = None
    if root is None:
        root = _root_bracketed(a_term, e_term, b_term, a_i, a_ip1,
                               hyper.c, hyper.d, start)
    if not 0.0 < root < hyper.c / hyper.d:
        _BETA_STATS["bound_violations"] += 1
        raise InternalInvariantError(
            f"coupling weight {root} escaped (0, {hyper.c / hyper.d})"
        )
    return root


def solve_beta(i: int, alpha, beta, moments: PosteriorMoments,
               hyper: HyperPriors, method: str = "bracketed") -> float:
    """Solve the stationarity equation for edge i.

    Returns the unique positive root, guaranteed to lie strictly inside
    (0, c/d).  ``method`` selects the bracketed Newton solve (default) or
    the closed-form cubic cross-check; the closed form silently falls back
    to the bracket when floating-point cancellation degrades it.
    """
    if method not in ROOT_METHODS:
        raise ValueError(f"method must be one of {ROOT_METHODS}")
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if not 0 <= i <= alpha.size - 2:
        raise ValueError(f"edge index {i} out of range for N={alpha.size}")
    m2 = moments.mu ** 2 + moments.sigma_diag
    a_term, e_term, b_term = _edge_terms(i, alpha, beta, m2)
    start = beta[i] if beta[i] > 0 else hyper.c / (2.0 * hyper.d)
    return _solve_edge(a_term, e_term, b_term, alpha[i], alpha[i + 1],
                       hyper, start, method)


def _sweep_beta(alpha: np.ndarray, beta: np.ndarray, m2: np.ndarray,
                hyper: HyperPriors, method: str) -> np.ndarray:
    """Gauss-Seidel sweep over all edges in ascending order against a given
    second-moment vector; each solve uses the freshest neighboring weights."""
    out = beta.copy()
    n = alpha.size
    for j in range(n - 1):
        a_term = alpha[j] + (out[j - 1] * alpha[j - 1] if j > 0 else 0.0)
        e_term = alpha[j + 1] + (out[j + 1] * alpha[j + 2] if j + 1 < n - 1 else 0.0)
        b_term = 0.5 * (alpha[j + 1] * m2[j] + alpha[j] * m2[j + 1])
        start = out[j] if out[j] > 0 else hyper.c / (2.0 * hyper.d)
        out[j] = _solve_edge(a_term, e_term, b_term, alpha[j], alpha[j + 1],
                             hyper, start, method)
    return out


def update_beta(alpha, beta, moments: PosteriorMoments, hyper: HyperPriors,
                method: str = "bracketed") -> np.ndarray:
    """One coupling-weight sweep driven by the exact posterior moments."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    m2 = moments.mu ** 2 + moments.sigma_diag
    return _sweep_beta(alpha, beta, m2, hyper, method)


def update_gamma(problem: SensingProblem, moments: PosteriorMoments,
                 hyper: HyperPriors) -> float:
    """gamma = (M + 2g) / (||y - Phi mu||^2 + tr(Sigma Phi^T Phi) + 2h)."""
    resid_sq, trace_term = residual_stats(problem, moments)
    return (problem.m + 2.0 * hyper.g) / (resid_sq + trace_term + 2.0 * hyper.h)


def evaluate_q_alpha_beta(alpha, beta, moments: PosteriorMoments,
                          hyper: HyperPriors) -> float:
    """Hyperparameter objective (up to an additive constant) whose partial
    derivative in beta_i is :func:`beta_stationarity`.  Diagnostic only."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("all alpha entries must be > 0")
    if np.any(beta <= 0):
        raise ValueError("all beta entries must be > 0")
    lam = prior_precisions(alpha, beta)
    m2 = moments.mu ** 2 + moments.sigma_diag
    q = np.sum((hyper.a - 1.0) * np.log(alpha) - hyper.b * alpha
               + 0.5 * np.log(lam) - 0.5 * lam * m2)
    q += np.sum((hyper.c - 1.0) * np.log(beta) - hyper.d * beta)
    return float(q)


def _initial_beta(scheme: CouplingScheme, n: int, init_beta: float) -> np.ndarray:
    if scheme.kind == "none":
        return np.zeros(n - 1)
    if scheme.kind == "pc_fixed":
        return np.full(n - 1, scheme.fixed_beta)
    return np.full(n - 1, init_beta)


def run_em(problem: SensingProblem, config: SolverConfig = SolverConfig()) -> SolveResult:
    """Run the EM loop until the relative change of mu drops below
    ``config.rel_tol`` or ``config.max_iterations`` is reached.

    With scheme "none" the coupling update is skipped and the weights stay
    zero (classical SBL); with scheme "pc_fixed" they stay at the shared
    value (PC-SBL).  See the module docstring for the warm-up/refinement
    phase schedule.
    """
    hyper = config.hyperpriors
    phi, y = problem.phi, problem.y
    n, m = problem.n, problem.m
    gram = phi.T @ phi
    phi_t_y = phi.T @ y

    alpha = np.minimum(np.full(n, config.init_alpha), config.alpha_cap)
    beta = _initial_beta(config.scheme, n, config.init_beta)
    gamma = config.init_gamma
    learn_beta = config.scheme.kind == "spp"

    moments = _moments_from_gram(gram, phi_t_y, prior_precisions(alpha, beta), gamma)
    mu_prev = moments.mu
    history = [] if config.track_history else None

    converged = False
    iterations = 0
    warming = True
    for it in range(1, config.max_iterations + 1):
        mu_sq = moments.mu ** 2
        if warming:
            m2 = mu_sq + moments.sigma_diag
        else:
            # Small-energy refinement: coefficients whose mean energy is not
            # significant lose the variance floor that keeps them active.
            m2 = mu_sq + np.where(mu_sq >= moments.sigma_diag,
                                  moments.sigma_diag, 0.0)
        eta = m2.copy()
        eta[:-1] += beta * m2[1:]
        eta[1:] += beta * m2[:-1]
        alpha = update_alpha(eta, hyper, config.alpha_cap)
        if learn_beta:
            beta = _sweep_beta(alpha, beta, m2, hyper, config.root_method)
        moments = _moments_from_gram(gram, phi_t_y,
                                     prior_precisions(alpha, beta), gamma)
        resid = y - phi @ moments.mu
        trace_term = max(float(np.sum(moments.sigma * gram)), 0.0)
        gamma = (m + 2.0 * hyper.g) / (float(resid @ resid) + trace_term + 2.0 * hyper.h)

        delta = float(np.linalg.norm(moments.mu - mu_prev))
        delta /= max(float(np.linalg.norm(mu_prev)), 1e-12)
        if history is not None:
            history.append((delta, gamma))
        mu_prev = moments.mu
        iterations = it
        if warming:
            if delta < (config.refine_tol if config.refinement else config.rel_tol):
                if config.refinement:
                    warming = False
                else:
                    converged = True
                    break
        elif delta < config.rel_tol:
            converged = True
            break

    state = SolverState(
        alpha=PrecisionField(alpha, cap=config.alpha_cap),
        beta=CouplingVector(beta),
        gamma=gamma,
        mu=moments.mu,
        sigma=moments.sigma,
        iteration=iterations,
    )
    return SolveResult(
        x_hat=moments.mu.copy(),
        state=state,
        iterations=iterations,
        converged=converged,
        history=history,
    )
