"""Command-line entry point: ``python -m queuecontrol <subcommand> [options]``.

Exit codes: 0 when every check passes, 1 when a check fails, 2 on a
configuration or runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .config import ConfigError, ExperimentConfig
from .costs import DomainError, ParameterError
from .experiments import OUT_DIR_ENV, run_experiment
from .hjb import SolverError
from .montecarlo import SimulationError

SUBCOMMANDS = {
    "sweep-wr": "sweep_wr",
    "solve": "solve",
    "verify-dcp": "verify_dcp",
    "converge-qcp": "converge_qcp",
    "conjugate-table": "conjugate_table",
}

EXIT_OK, EXIT_CHECK_FAILED, EXIT_ERROR = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="queuecontrol", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file (defaults are used for missing fields)")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV} or ./results)")
        sp.add_argument("--seed", type=int, help="override monte_carlo.seed")
        sp.add_argument("--workers", type=int, help="override monte_carlo.workers")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(kind: str, path=None, seed=None, workers=None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig(kind=kind)
    if cfg.kind != kind:
        cfg = replace(cfg, kind=kind)
    mc = cfg.monte_carlo
    if seed is not None:
        mc = replace(mc, seed=seed)
    if workers is not None:
        mc = replace(mc, workers=workers)
    return replace(cfg, monte_carlo=mc)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("queuecontrol")
    try:
        cfg = load_config(SUBCOMMANDS[args.command], args.config, args.seed, args.workers)
        result = run_experiment(cfg, args.out)
    except (ConfigError, ParameterError, DomainError, OSError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_ERROR
    except (SolverError, SimulationError) as exc:
        log.error("run failed: %s", exc)
        return EXIT_ERROR
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  value={c.value:.6g}  threshold={c.threshold:.6g}")
    for f in result.files:
        print(f"wrote {f}")
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
