"""Command-line interface.

Subcommands
-----------
generate : emit instance files from a generator spec document
solve    : recover one instance file and print its metrics
bench    : run an experiment config (or packaged preset) end to end
phase    : run a 2-D (SNR x measurement ratio) grid of one algorithm

``--seed`` overrides the master seed; the SPPSBL_SEED environment variable
is used as a fallback when the flag is absent.  Exit codes: 0 success,
1 configuration/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import ConfigError, config_from_dict, load_config, run_experiment, run_phase_grid
from .datagen import derive_seed, generate, load_instance, save_instance, spec_from_dict
from .metrics import DEFAULT_SUPPORT_TAU, correlation, extract_support, nmse, srr
from .solver import SolverConfig, run_em
from .bench import _parse_solver

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the configuration-error code on bad usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def _seed_override(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SPPSBL_SEED")
    return int(env) if env else None


def _build_parser() -> _Parser:
    parser = _Parser(prog="sppsbl",
                     description="Block-sparse recovery benchmark runner")
    parser.add_argument("--version", action="version", version=f"sppsbl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the master seed (env SPPSBL_SEED is the fallback)")
    common.add_argument("--out", type=Path, default=None, help="output directory")

    p_gen = sub.add_parser("generate", parents=[common],
                           help="emit instance files from a generator spec")
    p_gen.add_argument("--config", required=True,
                       help="JSON generator spec (family, n, m, snr_db, seed, family_params)")
    p_gen.add_argument("--trials", type=int, default=1,
                       help="number of instances (seeds derived per index when > 1)")

    p_solve = sub.add_parser("solve", parents=[common],
                             help="recover one instance file and print metrics")
    p_solve.add_argument("instance", help="instance JSON file")
    p_solve.add_argument("--config", default=None,
                         help="JSON solver config (scheme, hyperpriors, ...)")
    p_solve.add_argument("--tau", type=float, default=DEFAULT_SUPPORT_TAU,
                         help="relative support-extraction threshold")

    for name, help_text in (("bench", "run an experiment config"),
                            ("phase", "run a 2-D phase-transition grid")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--config", required=True,
                       help="experiment config path or preset name "
                            "(table1, table2, table3, successrate, phase)")
        p.add_argument("--trials", type=int, default=None, help="override n_trials")
        p.add_argument("--threads", type=int, default=None,
                       help="trial-level worker processes (default: all cores)")
    return parser


def _cmd_generate(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    spec = spec_from_dict(doc)
    seed = _seed_override(args)
    if seed is not None:
        doc = dict(doc, seed=seed)
        spec = spec_from_dict(doc)
    out_dir = args.out or Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {args.trials}")
    for i in range(args.trials):
        if args.trials > 1:
            spec_i = spec_from_dict(dict(doc, seed=derive_seed(spec.seed, i)))
        else:
            spec_i = spec
        path = out_dir / f"instance_{i:04d}.json"
        save_instance(generate(spec_i), path)
        print(path)
    return EXIT_OK


def _cmd_solve(args) -> int:
    instance = load_instance(args.instance)
    if args.config:
        with open(args.config) as fh:
            solver_cfg = _parse_solver(json.load(fh), "solver config")
    else:
        solver_cfg = SolverConfig()
    start = time.perf_counter()
    result = run_em(instance.problem, solver_cfg)
    elapsed_ms = (time.perf_counter() - start) * 1e3
    prob = instance.problem
    print(f"iterations: {result.iterations}  converged: {result.converged}  "
          f"runtime_ms: {elapsed_ms:.1f}")
    if prob.x_true is not None:
        val = nmse(result.x_hat, prob.x_true)
        est = extract_support(result.x_hat, args.tau)
        corr = (correlation(result.x_hat, prob.x_true)
                if float(np.linalg.norm(result.x_hat)) > 0 else 0.0)
        print(f"nmse: {val!r}")
        print(f"corr: {corr!r}")
        print(f"srr: {srr(est, prob.true_support)!r}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump({"x_hat": result.x_hat.tolist(),
                       "iterations": result.iterations,
                       "converged": result.converged}, fh)
    return EXIT_OK


def _load_experiment(args):
    config = load_config(args.config)
    doc = dict(config.raw)
    seed = _seed_override(args)
    if seed is not None:
        doc["master_seed"] = seed
    if args.trials is not None:
        doc["n_trials"] = args.trials
    if args.out is not None:
        doc["output_dir"] = str(args.out)
    return config_from_dict(doc, name_hint=config.name)


def _cmd_bench(args) -> int:
    config = _load_experiment(args)
    start = time.perf_counter()
    summary = run_experiment(config, threads=args.threads)
    elapsed = time.perf_counter() - start
    print(f"wrote {config.output_dir} ({summary['n_failed']} failed trials, "
          f"wall {elapsed:.1f} s)", file=sys.stderr)
    for row in summary["results"]:
        if row["metric"] == "nmse":
            print(f"{row['algorithm']}: mean NMSE {row['mean']:.4f} "
                  f"(std {row['std']:.4f}, n={row['n']}, "
                  f"success rate {row['success_rate']:.2f})")
    return EXIT_OK


def _cmd_phase(args) -> int:
    config = _load_experiment(args)
    start = time.perf_counter()
    grid = run_phase_grid(config, threads=args.threads)
    elapsed = time.perf_counter() - start
    print(f"wrote {config.output_dir}/grid.csv ({len(grid)} cells, "
          f"wall {elapsed:.1f} s)", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "generate": _cmd_generate,
    "solve": _cmd_solve,
    "bench": _cmd_bench,
    "phase": _cmd_phase,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, json.JSONDecodeError, ValueError) as exc:
        print(f"sppsbl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"sppsbl: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
