"""Core value types and the tridiagonal coupling structure.

The recovery model is y = Phi x + noise with a zero-mean Gaussian prior on x
whose per-coefficient precision is a coupled combination of neighboring
hyperparameters:

    lambda_i = alpha_i + beta_{i-1} alpha_{i-1} + beta_i alpha_{i+1}

All vectors are 0-indexed; the virtual boundary entries alpha_{-1},
alpha_{N} (one past each end) and beta_{-1}, beta_{N-1} are zero and never
stored.  Equivalently, lambda = T @ alpha where T is the symmetric
tridiagonal coupling matrix with unit diagonal and off-diagonal entries
beta_0 .. beta_{N-2}.  The solver never materializes T (the recurrence is
O(N)); the dense constructor below exists for tests and inspection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CouplingScheme",
    "CouplingVector",
    "HyperPriors",
    "PrecisionField",
    "SensingProblem",
    "SolverState",
    "build_coupling_matrix",
    "prior_precisions",
]

DEFAULT_ALPHA_CAP = 1e10


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CouplingScheme:
    """How neighboring precision hyperparameters are tied together.

    kind = "spp"      -- per-edge weights, learned (full coupled model)
    kind = "pc_fixed" -- one shared, fixed weight on every edge (PC-SBL)
    kind = "none"     -- zero coupling (classical SBL)
    """

    kind: str
    fixed_beta: float | None = None

    def __post_init__(self):
        if self.kind not in ("spp", "pc_fixed", "none"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if self.kind == "pc_fixed":
            if self.fixed_beta is None:
                raise ValueError("pc_fixed scheme requires a shared beta value")
            if not (np.isfinite(self.fixed_beta) and self.fixed_beta >= 0):
                raise ValueError("shared beta must be finite and >= 0")
        elif self.fixed_beta is not None:
            raise ValueError(f"fixed_beta is only meaningful for pc_fixed, got kind {self.kind!r}")

    @classmethod
    def spp(cls) -> "CouplingScheme":
        return cls("spp")

    @classmethod
    def pc_fixed(cls, beta: float) -> "CouplingScheme":
        return cls("pc_fixed", float(beta))

    @classmethod
    def none(cls) -> "CouplingScheme":
        return cls("none")


@dataclass(frozen=True)
class HyperPriors:
    """Gamma-prior constants: (a, b) for alpha, (c, d) for the coupling
    weights, (g, h) for the noise precision.

    c > 1 is required: it guarantees the coupling-weight stationarity
    equation has exactly one positive real root.
    """

    a: float = 1e-4
    b: float = 1e-4
    c: float = 10.0
    d: float = 1.0
    g: float = 1e-4
    h: float = 1e-4

    def __post_init__(self):
        for name in ("a", "b", "c", "d", "g", "h"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"hyperprior {name} must be finite and > 0, got {v}")
        if not self.c > 1:
            raise ValueError(f"c must be strictly greater than 1, got {self.c}")


@dataclass(frozen=True)
class PrecisionField:
    """Per-coefficient precision hyperparameters, capped at a pruning ceiling.

    Capped entries stay in the computation at the cap value; dimensions are
    never reduced.
    """

    alpha: np.ndarray
    cap: float = DEFAULT_ALPHA_CAP

    def __post_init__(self):
        arr = _frozen_array(self.alpha)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("alpha must be a nonempty 1-D vector")
        if not (np.isfinite(self.cap) and self.cap > 0):
            raise ValueError("cap must be finite and > 0")
        if not np.all((arr > 0) & (arr <= self.cap)):
            raise ValueError("every alpha entry must lie in (0, cap]")
        object.__setattr__(self, "alpha", arr)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.alpha, dtype=dtype)

    def __len__(self) -> int:
        return self.alpha.size


@dataclass(frozen=True)
class CouplingVector:
    """Edge weights between adjacent coefficients; length N-1 for an
    N-dimensional signal.  The virtual boundary weights are zero and not
    stored."""

    beta: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.beta)
        if arr.ndim != 1:
            raise ValueError("beta must be a 1-D vector")
        if not np.all(np.isfinite(arr) & (arr >= 0)):
            raise ValueError("every beta entry must be finite and >= 0")
        object.__setattr__(self, "beta", arr)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.beta, dtype=dtype)

    def __len__(self) -> int:
        return self.beta.size


@dataclass(frozen=True)
class SensingProblem:
    """One recovery instance: measurement matrix, observations, and
    (optionally) the ground truth used for scoring."""

    phi: np.ndarray
    y: np.ndarray
    x_true: np.ndarray | None = None
    true_support: frozenset[int] | None = None
    snr_db: float | None = None

    def __post_init__(self):
        phi = _frozen_array(self.phi)
        y = _frozen_array(self.y)
        if phi.ndim != 2:
            raise ValueError("phi must be a 2-D matrix")
        m, n = phi.shape
        if m < 1 or n < 2:
            raise ValueError(f"need M >= 1 and N >= 2, got shape {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi contains non-finite entries")
        if y.shape != (m,):
            raise ValueError(f"y must have length M={m}, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite entries")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "y", y)
        if self.x_true is not None:
            x = _frozen_array(self.x_true)
            if x.shape != (n,):
                raise ValueError(f"x_true must have length N={n}, got shape {x.shape}")
            object.__setattr__(self, "x_true", x)
            support = frozenset(int(i) for i in np.flatnonzero(x))
            if self.true_support is None:
                object.__setattr__(self, "true_support", support)
            elif frozenset(int(i) for i in self.true_support) != support:
                raise ValueError("true_support does not match the nonzeros of x_true")
            else:
                object.__setattr__(self, "true_support", support)
        elif self.true_support is not None:
            raise ValueError("true_support given without x_true")

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]


@dataclass(frozen=True)
class SolverState:
    """Solver hyperparameters and posterior moments after some iteration."""

    alpha: PrecisionField
    beta: CouplingVector
    gamma: float
    mu: np.ndarray
    sigma: np.ndarray
    iteration: int

    def __post_init__(self):
        n = len(self.alpha)
        if len(self.beta) != n - 1:
            raise ValueError(f"beta must have length N-1={n - 1}, got {len(self.beta)}")
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be finite and > 0, got {self.gamma}")
        mu = _frozen_array(self.mu)
        sigma = _frozen_array(self.sigma)
        if mu.shape != (n,):
            raise ValueError(f"mu must have length N={n}")
        if sigma.shape != (n, n):
            raise ValueError(f"sigma must be {n}x{n}")
        asym = np.max(np.abs(sigma - sigma.T))
        scale = max(float(np.max(np.abs(sigma))), np.finfo(float).tiny)
        if asym > 1e-8 * scale:
            raise ValueError("sigma is not symmetric within tolerance")
        if self.iteration < 0:
            raise ValueError("iteration must be nonnegative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def prior_precisions(alpha, beta) -> np.ndarray:
    """Effective prior precisions lambda = T @ alpha via the O(N) recurrence.

    lambda_i = alpha_i + beta_{i-1} alpha_{i-1} + beta_i alpha_{i+1}, with
    zero virtual boundary terms.  With beta = 0 this returns alpha unchanged
    (the classical SBL reduction).
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = alpha.size
    if alpha.ndim != 1 or n < 2:
        raise ValueError("alpha must be a 1-D vector of length >= 2")
    if beta.shape != (n - 1,):
        raise ValueError(f"beta must have length N-1={n - 1}, got shape {beta.shape}")
    lam = alpha.copy()
    lam[:-1] += beta * alpha[1:]
    lam[1:] += beta * alpha[:-1]
    return lam


def build_coupling_matrix(scheme: CouplingScheme, beta, n: int) -> np.ndarray:
    """Dense N x N coupling matrix for a scheme: unit diagonal, off-diagonal
    entries beta_i ("spp"), a shared scalar ("pc_fixed"), or zero ("none").

    Test/inspection helper; the solver uses :func:`prior_precisions` instead.
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    t = np.eye(n)
    if scheme.kind == "none":
        return t
    if scheme.kind == "pc_fixed":
        off = np.full(n - 1, scheme.fixed_beta)
    else:
        off = np.asarray(beta, dtype=float)
        if off.shape != (n - 1,):
            raise ValueError(f"beta must have length n-1={n - 1}, got shape {off.shape}")
    idx = np.arange(n - 1)
    t[idx, idx + 1] = off
    t[idx + 1, idx] = off
    return t
