"""Recovery metrics, success criterion, and trial aggregation.

NMSE = ||x_hat - x||^2 / ||x||^2; Corr is cosine similarity; SRR scores the
support overlap as |est & true| / (|est - true| + |true|) and equals 1 only
on an exact match.  A trial counts as a successful recovery when its NMSE
is no greater than 1e-5.

Supports are extracted from dense estimates with a relative magnitude
threshold (default tau = 0.01 of the largest entry), so SRR is invariant to
rescaling the estimate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridCell",
    "SUCCESS_NMSE_THRESHOLD",
    "TRIAL_CSV_FIELDS",
    "TrialRecord",
    "aggregate",
    "correlation",
    "extract_support",
    "nmse",
    "records_from_csv",
    "records_to_csv",
    "srr",
    "success",
]

SUCCESS_NMSE_THRESHOLD = 1e-5
DEFAULT_SUPPORT_TAU = 0.01

TRIAL_CSV_FIELDS = (
    "algorithm", "seed", "nmse", "corr", "srr", "iterations", "runtime_ms", "success",
)


@dataclass(frozen=True)
class TrialRecord:
    """Per-trial scores for one algorithm on one instance."""

    algorithm: str
    seed: int
    nmse: float
    corr: float
    srr: float
    iterations: int
    runtime_ms: float
    success: bool


@dataclass(frozen=True)
class GridCell:
    """One (SNR, measurement ratio) cell of a phase-transition grid."""

    snr_db: float
    measurement_ratio: float
    mean_rnmse: float
    n_trials: int

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")


def nmse(x_hat, x_true) -> float:
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    denom = float(x_true @ x_true)
    if denom == 0.0:
        raise ValueError("true signal is zero; NMSE is undefined")
    diff = x_hat - x_true
    return float(diff @ diff) / denom


def correlation(x_hat, x_true) -> float:
    """Cosine similarity; 1 iff x_hat is a positive scaling of x_true."""
    x_hat = np.asarray(x_hat, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    nh = float(np.linalg.norm(x_hat))
    nt = float(np.linalg.norm(x_true))
    if nh == 0.0 or nt == 0.0:
        raise ValueError("correlation is undefined for a zero vector")
    return float(np.clip(float(x_hat @ x_true) / (nh * nt), -1.0, 1.0))


def srr(estimated_support, true_support) -> float:
    est = set(estimated_support)
    true = set(true_support)
    if not true:
        raise ValueError("true support is empty; SRR is undefined")
    return len(est & true) / (len(est - true) + len(true))


def extract_support(x_hat, tau: float = DEFAULT_SUPPORT_TAU) -> frozenset[int]:
    """Indices with magnitude above tau times the largest magnitude."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    mags = np.abs(np.asarray(x_hat, dtype=float))
    peak = float(mags.max()) if mags.size else 0.0
    if peak == 0.0:
        return frozenset()
    return frozenset(int(i) for i in np.flatnonzero(mags > tau * peak))


def success(nmse_value: float) -> bool:
    """True iff the NMSE is no greater than the 1e-5 success threshold."""
    if nmse_value < 0:
        raise ValueError("NMSE cannot be negative")
    return nmse_value <= SUCCESS_NMSE_THRESHOLD


_NUMERIC_METRICS = ("nmse", "corr", "srr", "iterations", "runtime_ms")


def aggregate(records) -> dict:
    """Mean and sample std (n-1 divisor) per metric, plus the success rate.

    Records are sorted by seed first so the aggregation order is
    deterministic.  With a single record the std is reported as 0.0 (n is
    part of the summary, flagging the degenerate case).
    """
    records = sorted(records, key=lambda r: r.seed)
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    out = {"n": len(records)}
    for name in _NUMERIC_METRICS:
        values = np.array([float(getattr(r, name)) for r in records])
        mean = float(values.mean())
        std = float(values.std(ddof=1)) if len(records) > 1 else 0.0
        out[name] = {"mean": mean, "std": std}
    out["success_rate"] = sum(1 for r in records if r.success) / len(records)
    return out


def records_to_csv(records, path) -> None:
    """Write trial records with the fixed header; floats use shortest
    round-trip formatting, booleans are lowercase true/false."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRIAL_CSV_FIELDS)
        for rec in records:
            writer.writerow([
                rec.algorithm,
                rec.seed,
                repr(float(rec.nmse)),
                repr(float(rec.corr)),
                repr(float(rec.srr)),
                rec.iterations,
                repr(float(rec.runtime_ms)),
                "true" if rec.success else "false",
            ])


def records_from_csv(path) -> list[TrialRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRIAL_CSV_FIELDS:
            raise ValueError(f"unexpected CSV header {header}")
        out = []
        for row in reader:
            out.append(TrialRecord(
                algorithm=row[0],
                seed=int(row[1]),
                nmse=float(row[2]),
                corr=float(row[3]),
                srr=float(row[4]),
                iterations=int(row[5]),
                runtime_ms=float(row[6]),
                success=row[7] == "true",
            ))
    return out
