"""Experiment runner: builds instances, runs solver variants, persists
trial CSVs and summaries.

Reproducibility contract: every persisted artifact is a pure function of
(config, master_seed).  Trials may execute in parallel worker processes;
results are collected in a deterministic order (cell, then trial index), and
dense linear algebra inside a trial is pinned to one BLAS thread so the
worker count never changes the numbers.  Per-trial wall time is therefore
not persisted (the runtime_ms column is written as 0.0); the runner reports
elapsed wall time on the console instead.

The seed of a trial is ``derive_seed(master_seed, snr_bits, m, trial)``
(SplitMix64 mixing, see :mod:`sppsbl.datagen`; ``snr_bits`` is the IEEE-754
bit pattern of the cell's SNR), so any single cell or trial can be
regenerated in isolation, independent of the surrounding grid shape.
"""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from multiprocessing import get_context
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .datagen import (
    GenerationError,
    GeneratorSpec,
    derive_seed,
    generate,
    spec_from_dict,
    _FAMILY_PARAMS,
)
from .metrics import (
    DEFAULT_SUPPORT_TAU,
    GridCell,
    TrialRecord,
    aggregate,
    correlation,
    extract_support,
    nmse,
    records_to_csv,
    srr,
    success,
)
from .model import CouplingScheme, HyperPriors
from .posterior import NumericalConditioningError
from .solver import (
    InternalInvariantError,
    SolverConfig,
    beta_solve_stats,
    reset_beta_solve_stats,
    run_em,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PRESET_NAMES",
    "load_config",
    "preset_path",
    "run_experiment",
    "run_phase_grid",
]

PRESET_NAMES = ("table1", "table2", "table3", "successrate", "phase")


class ConfigError(ValueError):
    """Experiment configuration could not be parsed or validated."""


@dataclass(frozen=True)
class Cell:
    index: int
    snr_db: float
    m: int
    measurement_ratio: float | None

    @property
    def tag(self) -> str:
        if self.measurement_ratio is not None:
            return f"snr{self.snr_db:g}_r{self.measurement_ratio:g}"
        return f"snr{self.snr_db:g}_m{self.m}"

    @property
    def seed_path(self) -> tuple[int, int]:
        """Content-addressed seed components: a cell keeps its substream no
        matter how the surrounding grid is shaped, so any single cell can be
        re-run in isolation."""
        snr_bits = struct.unpack("<Q", struct.pack("<d", float(self.snr_db)))[0]
        return snr_bits, self.m


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``raw`` keeps the document as given
    for verbatim echoing into outputs."""

    name: str
    family: str
    n: int
    base_snr_db: float
    base_m: int | None
    base_ratio: float | None
    family_params: object
    algorithms: tuple  # of (label, SolverConfig)
    n_trials: int
    master_seed: int
    sweep_snr_db: tuple | None
    sweep_ratio: tuple | None
    output_dir: str
    support_tau: float
    raw: dict

    def cells(self) -> list[Cell]:
        snrs = self.sweep_snr_db if self.sweep_snr_db else (self.base_snr_db,)
        if self.sweep_ratio:
            ratios = self.sweep_ratio
        elif self.base_ratio is not None:
            ratios = (self.base_ratio,)
        else:
            ratios = (None,)
        out = []
        index = 0
        for snr in snrs:
            for ratio in ratios:
                m = self.base_m if ratio is None else _ratio_to_m(ratio, self.n)
                out.append(Cell(index=index, snr_db=snr, m=m,
                                measurement_ratio=ratio))
                index += 1
        return out

    def generator_spec(self, cell: Cell, trial: int) -> GeneratorSpec:
        snr_bits, m = cell.seed_path
        return GeneratorSpec(
            family=self.family,
            n=self.n,
            m=cell.m,
            snr_db=cell.snr_db,
            seed=derive_seed(self.master_seed, snr_bits, m, trial),
            family_params=self.family_params,
        )


def _ratio_to_m(ratio: float, n: int) -> int:
    m = int(round(ratio * n))
    if m < 1:
        raise ConfigError(f"measurement ratio {ratio} gives m={m} < 1 for n={n}")
    return m


def _parse_scheme(value, where: str) -> CouplingScheme:
    if value == "spp":
        return CouplingScheme.spp()
    if value == "none":
        return CouplingScheme.none()
    if isinstance(value, dict) and set(value) == {"pc_fixed"}:
        return CouplingScheme.pc_fixed(float(value["pc_fixed"]))
    raise ConfigError(
        f"{where}: scheme must be 'spp', 'none', or {{'pc_fixed': beta}}, got {value!r}"
    )


def _parse_solver(doc: dict, where: str) -> SolverConfig:
    kwargs = {}
    if "hyperpriors" in doc:
        try:
            kwargs["hyperpriors"] = HyperPriors(**doc["hyperpriors"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.hyperpriors: {exc}") from exc
    for key in ("max_iterations", "rel_tol", "alpha_cap", "init_alpha",
                "init_beta", "init_gamma", "root_method", "refinement",
                "refine_tol"):
        if key in doc:
            kwargs[key] = doc[key]
    kwargs["scheme"] = _parse_scheme(doc.get("scheme", "spp"), where)
    try:
        return SolverConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict, name_hint: str = "experiment") -> ExperimentConfig:
    """Validate a configuration document, raising :class:`ConfigError` with
    the offending field on any problem."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")

    def need(key, where="config"):
        if key not in doc:
            raise ConfigError(f"{where}: missing required field {key!r}")
        return doc[key]

    gen = need("generator")
    if not isinstance(gen, dict):
        raise ConfigError("generator: must be an object")
    family = gen.get("family")
    if family not in _FAMILY_PARAMS:
        raise ConfigError(
            f"generator.family: must be one of {sorted(_FAMILY_PARAMS)}, got {family!r}"
        )
    try:
        n = int(gen["n"])
        snr_db = float(gen["snr_db"])
        params = _FAMILY_PARAMS[family](**gen.get("family_params", {}))
        params.validate(n)
    except KeyError as exc:
        raise ConfigError(f"generator: missing required field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"generator: {exc}") from exc

    base_m = int(gen["m"]) if "m" in gen else None
    base_ratio = float(gen["measurement_ratio"]) if "measurement_ratio" in gen else None
    if base_ratio is not None and not 0 < base_ratio <= 1:
        raise ConfigError(f"generator.measurement_ratio: must lie in (0, 1], got {base_ratio}")
    if base_ratio is not None:
        base_m = _ratio_to_m(base_ratio, n)

    sweep = doc.get("sweep") or {}
    if not isinstance(sweep, dict) or not set(sweep) <= {"snr_db", "measurement_ratio"}:
        raise ConfigError("sweep: must be an object with keys among "
                          "{'snr_db', 'measurement_ratio'}")
    sweep_snr = tuple(float(v) for v in sweep.get("snr_db", ())) or None
    sweep_ratio = tuple(float(v) for v in sweep.get("measurement_ratio", ())) or None
    if sweep_ratio is not None:
        for r in sweep_ratio:
            if not 0 < r <= 1:
                raise ConfigError(f"sweep.measurement_ratio: ratio {r} outside (0, 1]")
            _ratio_to_m(r, n)
    if base_m is None and sweep_ratio is None:
        raise ConfigError("generator: needs 'm' or 'measurement_ratio' "
                          "(or a sweep over measurement_ratio)")

    algos_doc = need("algorithms")
    if not isinstance(algos_doc, list) or not algos_doc:
        raise ConfigError("algorithms: must be a nonempty list")
    algorithms = []
    seen = set()
    for idx, adoc in enumerate(algos_doc):
        where = f"algorithms[{idx}]"
        if not isinstance(adoc, dict) or "label" not in adoc:
            raise ConfigError(f"{where}: must be an object with a 'label'")
        label = str(adoc["label"])
        if label in seen:
            raise ConfigError(f"{where}: duplicate label {label!r}")
        seen.add(label)
        algorithms.append((label, _parse_solver(adoc, where)))

    n_trials = int(doc.get("n_trials", 50))
    if n_trials < 1:
        raise ConfigError(f"n_trials: must be >= 1, got {n_trials}")
    support_tau = float(doc.get("support_tau", DEFAULT_SUPPORT_TAU))
    if not 0 < support_tau < 1:
        raise ConfigError(f"support_tau: must lie in (0, 1), got {support_tau}")
    name = str(doc.get("name", name_hint))

    return ExperimentConfig(
        name=name,
        family=family,
        n=n,
        base_snr_db=snr_db,
        base_m=base_m,
        base_ratio=base_ratio,
        family_params=params,
        algorithms=tuple(algorithms),
        n_trials=n_trials,
        master_seed=int(doc.get("master_seed", 0)),
        sweep_snr_db=sweep_snr,
        sweep_ratio=sweep_ratio,
        output_dir=str(doc.get("output_dir", name)),
        support_tau=support_tau,
        raw=doc,
    )


def preset_path(name: str) -> Path:
    """Filesystem path of a packaged preset configuration."""
    base = name[:-4] if name.endswith(".cfg") else name
    if base not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    return Path(resources.files("sppsbl") / "presets" / f"{base}.cfg")


def load_config(path_or_preset) -> ExperimentConfig:
    """Load a config from a JSON file path, falling back to preset names."""
    path = Path(path_or_preset)
    if not path.exists():
        path = preset_path(str(path_or_preset))
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return config_from_dict(doc, name_hint=path.stem)


# ----------------------------------------------------------------------
# Trial execution
# ----------------------------------------------------------------------

def _run_one_trial(config: ExperimentConfig, cell: Cell, trial: int):
    """Generate the instance for (cell, trial) and score every algorithm on
    it.  Numerical failures mark the trial failed rather than aborting.
    Returns the records plus the root-solver counters for this trial."""
    spec = config.generator_spec(cell, trial)
    reset_beta_solve_stats()
    with threadpool_limits(limits=1):
        instance = generate(spec)
        prob = instance.problem
        records = []
        for label, solver_cfg in config.algorithms:
            try:
                result = run_em(prob, solver_cfg)
                val = nmse(result.x_hat, prob.x_true)
                if float(np.linalg.norm(result.x_hat)) == 0.0:
                    corr = 0.0
                else:
                    corr = correlation(result.x_hat, prob.x_true)
                est = extract_support(result.x_hat, config.support_tau)
                records.append(TrialRecord(
                    algorithm=label,
                    seed=spec.seed,
                    nmse=val,
                    corr=corr,
                    srr=srr(est, prob.true_support),
                    iterations=result.iterations,
                    runtime_ms=0.0,
                    success=success(val),
                ))
            except (NumericalConditioningError, InternalInvariantError,
                    GenerationError, np.linalg.LinAlgError):
                records.append(TrialRecord(
                    algorithm=label,
                    seed=spec.seed,
                    nmse=float("nan"),
                    corr=float("nan"),
                    srr=float("nan"),
                    iterations=0,
                    runtime_ms=0.0,
                    success=False,
                ))
    return records, beta_solve_stats()


def _worker(task):
    config, cell, trial = task
    return _run_one_trial(config, cell, trial)


def _execute(config: ExperimentConfig, cells, threads: int | None):
    """Run all (cell, trial) tasks, returning records grouped per cell in
    deterministic order plus the summed root-solver counters."""
    threads = threads or os.cpu_count() or 1
    tasks = [(config, cell, trial) for cell in cells
             for trial in range(config.n_trials)]
    if threads == 1 or len(tasks) == 1:
        results = [_worker(t) for t in tasks]
    else:
        chunk = max(1, len(tasks) // (threads * 4))
        with ProcessPoolExecutor(max_workers=threads,
                                 mp_context=get_context("spawn")) as pool:
            results = list(pool.map(_worker, tasks, chunksize=chunk))
    per_cell = {cell.index: [] for cell in cells}
    totals = {"calls": 0, "bracket_failures": 0, "bound_violations": 0}
    for (cfg, cell, trial), (recs, stats) in zip(tasks, results):
        per_cell[cell.index].extend(recs)
        for key in totals:
            totals[key] += stats[key]
    return per_cell, totals


def _good(records):
    return [r for r in records if not math.isnan(r.nmse)]


def _summarize_cell(cell: Cell, records, algorithms):
    rows = []
    failed = []
    for label, _ in algorithms:
        recs = [r for r in records if r.algorithm == label]
        good = _good(recs)
        n_failed = len(recs) - len(good)
        if n_failed:
            failed.append({"snr_db": cell.snr_db,
                           "measurement_ratio": cell.measurement_ratio,
                           "algorithm": label, "n_failed": n_failed})
        if not good:
            continue
        summary = aggregate(good)
        for metric in ("nmse", "corr", "srr", "iterations"):
            rows.append({
                "algorithm": label,
                "metric": metric,
                "mean": summary[metric]["mean"],
                "std": summary[metric]["std"],
                "n": summary["n"],
                "success_rate": summary["success_rate"],
                "snr_db": cell.snr_db,
                "measurement_ratio": cell.measurement_ratio,
            })
    return rows, failed


def run_experiment(config: ExperimentConfig, threads: int | None = None) -> dict:
    """Run every (cell x trial x algorithm) combination and persist results.

    Writes trials.csv (one per cell; directly under output_dir for a
    single-cell run, under cells/<tag>/ otherwise), summary.json, and
    config.json into ``config.output_dir``.  Returns the summary document.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = config.cells()
    per_cell, beta_stats = _execute(config, cells, threads)

    rows = []
    failed = []
    for cell in cells:
        records = per_cell[cell.index]
        if len(cells) == 1:
            csv_path = out_dir / "trials.csv"
        else:
            cell_dir = out_dir / "cells" / cell.tag
            cell_dir.mkdir(parents=True, exist_ok=True)
            csv_path = cell_dir / "trials.csv"
        records_to_csv(records, csv_path)
        cell_rows, cell_failed = _summarize_cell(cell, records, config.algorithms)
        rows.extend(cell_rows)
        failed.extend(cell_failed)

    summary = {
        "name": config.name,
        "version": __version__,
        "master_seed": config.master_seed,
        "n_trials": config.n_trials,
        "config": config.raw,
        "results": rows,
        "failed_trials": failed,
        "n_failed": sum(f["n_failed"] for f in failed),
        "beta_solve_stats": beta_stats,
    }
    _dump_json(summary, out_dir / "summary.json")
    _dump_json({"version": __version__, "config": config.raw,
                "master_seed": config.master_seed,
                "n_trials": config.n_trials}, out_dir / "config.json")
    return summary


def run_phase_grid(config: ExperimentConfig, threads: int | None = None) -> list[GridCell]:
    """2-D (SNR x measurement ratio) sweep of a single algorithm; writes
    grid.csv with the mean square-root NMSE per cell."""
    if not (config.sweep_snr_db and config.sweep_ratio):
        raise ConfigError("phase grid needs a sweep over both snr_db and "
                          "measurement_ratio")
    if len(config.algorithms) != 1:
        raise ConfigError("phase grid runs exactly one algorithm; got "
                          f"{len(config.algorithms)}")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = config.cells()
    per_cell, _ = _execute(config, cells, threads)

    grid = []
    for cell in cells:
        good = _good(per_cell[cell.index])
        if not good:
            continue
        mean_rnmse = float(np.mean([math.sqrt(r.nmse) for r in good]))
        grid.append(GridCell(snr_db=cell.snr_db,
                             measurement_ratio=cell.measurement_ratio,
                             mean_rnmse=mean_rnmse,
                             n_trials=len(good)))
    with open(out_dir / "grid.csv", "w") as fh:
        fh.write("snr_db,ratio,mean_rnmse,n_trials\n")
        for g in grid:
            fh.write(f"{g.snr_db!r},{g.measurement_ratio!r},"
                     f"{g.mean_rnmse!r},{g.n_trials}\n")
    _dump_json({"version": __version__, "config": config.raw,
                "master_seed": config.master_seed,
                "n_trials": config.n_trials}, out_dir / "config.json")
    return grid


def _dump_json(doc: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")
