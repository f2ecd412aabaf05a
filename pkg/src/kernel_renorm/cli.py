"""Command-line interface: ``kernel-renorm <subcommand> CONFIG [--out DIR] [--seed N] [--threads N]``.

Exit codes: 0 success, 1 acceptance or invariant failure, 2 configuration or
fit error, 3 numerical failure (unconverged saddle, singular kernel,
diverging dynamics). Results are written to ``--out``, the ``[run] out``
setting, the ``KERNEL_RENORM_OUT`` environment variable or ``./results``, in
that order of precedence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import OUT_ENV, ConfigError, load_config
from .data import save_dataset
from .experiments import (FitError, NumericalFailure, SchemaError, _record, build_dataset, run_channel_sweep,
                          run_kernel, run_predict, run_scaling, run_simulate, run_solve, sweep_shape)
from .kernels import KernelFileError
from .linalg import SingularKernelError
from .oracle import DivergenceError

log = logging.getLogger("kernel_renorm")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def cmd_gen_data(cfg) -> int:
    train, test = build_dataset(cfg)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / "train_inputs.csv", out / "train_labels.csv")
    if test.n_patterns:
        save_dataset(test, out / "test_inputs.csv", out / "test_labels.csv")
    print(f"wrote {train.n_patterns} training and {test.n_patterns} test patterns to {out}")
    return EXIT_OK


def cmd_kernel(cfg) -> int:
    path, skipped = run_kernel(cfg)
    print(f"{'kept existing' if skipped else 'wrote'} kernel {path}")
    return EXIT_OK


def cmd_solve(cfg) -> int:
    rec, sols = run_solve(cfg)
    print(f"wrote {rec.write(cfg.out_dir)}")
    if not all(s.converged for s in sols):
        raise NumericalFailure("saddle point not converged for at least one load", [rec])
    return EXIT_OK


def cmd_predict(cfg) -> int:
    rec, sol = run_predict(cfg)
    print(f"wrote {rec.write(cfg.out_dir)} ({len(rec.rows)} rows)")
    if sol is not None and not sol.converged:
        raise NumericalFailure("saddle point not converged", [rec])
    return EXIT_OK


def cmd_simulate(cfg) -> int:
    recs, res = run_simulate(cfg)
    for rec in recs:
        print(f"wrote {rec.write(cfg.out_dir)}")
    if not res.solution.converged:
        raise NumericalFailure("saddle point for the theory columns not converged", recs)
    return EXIT_OK


def cmd_scaling(cfg) -> int:
    table, fits, results = run_scaling(cfg)
    print(f"wrote {table.write(cfg.out_dir)}")
    print(f"wrote {fits.write(cfg.out_dir)}")
    for row in fits.rows:
        print(f"  {row['architecture']} {row['quantity']} ({row['source']}): slope {row['slope']:.4g} "
              f"+- {row['slope_se']:.2g} [{row['status']}]")
    if not all(r["converged"] for r in table.rows):
        raise NumericalFailure("saddle point not converged for at least one size", [table, fits])
    return EXIT_OK


def cmd_channel_sweep(cfg) -> int:
    rec, curves = run_channel_sweep(cfg)
    print(f"wrote {rec.write(cfg.out_dir)}")
    shape = sweep_shape(curves)
    print(f"  FC non-increasing: {shape['fc_non_increasing']}; best N_c {shape['best_channels']} "
          f"({shape['gap_in_sd']:.2f} combined SD below infinite width)")
    if not all(r["converged"] for r in rec.rows):
        raise NumericalFailure("saddle point not converged for at least one channel count", [rec])
    return EXIT_OK


def cmd_verify(cfg) -> int:
    from .checks import run_acceptance

    results = run_acceptance(include_slow=cfg.include_slow)
    lines = [r.line() for r in results]
    failed = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)} passed, {len(failed)} failed")
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    rec = _record(cfg, "verify", [r.row() for r in results], include_slow=cfg.include_slow)
    rec.write(out)
    print("\n".join(lines))
    return EXIT_FAILED if failed else EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate or load the dataset and write it as CSV"),
    "kernel": (cmd_kernel, "compute the analytic kernel and cache it"),
    "solve": (cmd_solve, "solve the saddle-point equations"),
    "predict": (cmd_predict, "predictor bias, variance and test error at the saddle"),
    "simulate": (cmd_simulate, "Gibbs-posterior sampling against the similarity theory"),
    "scaling": (cmd_scaling, "finite-size scaling of the similarity shift"),
    "channel-sweep": (cmd_channel_sweep, "test loss against the number of channels"),
    "verify": (cmd_verify, "run the acceptance checks and write a report"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kernel-renorm",
                                     description="Finite-width kernel renormalization experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("config", type=Path, help="experiment configuration (INI)")
        p.add_argument("--out", help=f"output directory (default: [run] out, ${OUT_ENV} or ./results)")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--threads", type=int, help="cap on worker threads, BLAS included")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.out, args.threads)
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command][0](cfg)
    except (ConfigError, FitError, SchemaError, KernelFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, SingularKernelError, DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
