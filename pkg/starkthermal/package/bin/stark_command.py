"""Command-line entry point of the Stark-manifold thermalization toolkit."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "lib"))

import stark_pipeline
from run_config import load_config
from stark_utils import (
    APP_NAME,
    VERSION,
    InputError,
    NumericalFailureError,
    get_logger,
    get_output_directory,
)

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from run_config import RunConfig

    Runner = Callable[[RunConfig, Path, "int | None", logging.Logger], dict[str, Any]]

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _run_basis(
    config: RunConfig,
    out: Path,
    _density_index: int | None,
    logger: logging.Logger,
) -> dict[str, Any]:
    return stark_pipeline.run_basis(config, out, logger)


COMMANDS: dict[str, tuple[Runner, str]] = {
    "basis": (_run_basis, "Enumerate the truncated product basis"),
    "evolve": (stark_pipeline.run_evolve, "Propagate the initial state with RK4"),
    "thermal": (stark_pipeline.run_thermal, "Predict thermal cluster populations"),
    "dos": (stark_pipeline.run_dos, "Estimate the density of states and shell"),
    "oracle-check": (
        stark_pipeline.run_oracle_check,
        "Check the estimators against exact diagonalization",
    ),
    "reduce-data": (
        stark_pipeline.run_reduce_data,
        "Reduce measured spectra to cluster populations",
    ),
    "compare": (
        stark_pipeline.run_compare,
        "Compare measured and predicted populations",
    ),
    "density-sweep": (
        stark_pipeline.run_density_sweep,
        "Equilibrium populations across the density grid",
    ),
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline stage."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--workers", type=int, help="override [run] workers")
    common.add_argument(
        "--density-bin",
        type=int,
        dest="density_bin",
        help="density index (simulation) or data bin (reduce-data, compare)",
    )

    parser = argparse.ArgumentParser(prog=APP_NAME)
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=help_text)
    return parser


def _attach_handlers(logger: logging.Logger, out: Path) -> list[logging.Handler]:
    formatter = logging.Formatter(LOG_FORMAT)
    out.mkdir(parents=True, exist_ok=True)
    handlers: list[logging.Handler] = [
        logging.StreamHandler(sys.stderr),
        logging.FileHandler(out / f"{APP_NAME}.log"),
    ]
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    return handlers


def _report_error(error: BaseException, exit_code: int) -> int:
    print(  # noqa: T201
        json.dumps(
            {
                "error": type(error).__name__,
                "message": str(error),
                "exit_code": exit_code,
            },
        ),
    )
    return exit_code


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and return the process exit code.

    Exit codes are 0 on success, 1 on invalid input or configuration and 2
    on a numerical or any other unexpected failure. Errors are reported on
    stdout as a JSON object with ``error``, ``message`` and ``exit_code``.
    """
    args = build_parser().parse_args(argv)
    runner, _ = COMMANDS[args.command]
    handlers: list[logging.Handler] = []
    logger = logging.getLogger(APP_NAME)
    try:
        config = load_config(args.config).with_overrides(
            seed=args.seed,
            workers=args.workers,
        )
        out = args.out or get_output_directory(config.run.output_dir)
        logger = get_logger(config.logging.loglevel)
        handlers = _attach_handlers(logger, out)
        logger.info(
            "%s %s: seed=%d workers=%d out=%s",
            args.command,
            VERSION,
            config.run.seed,
            config.run.workers,
            out,
        )
        runner(config, out, args.density_bin, logger)
        logger.info("%s finished", args.command)
    except NumericalFailureError as error:
        logger.exception("Numerical failure in %s", args.command)
        return _report_error(error, EXIT_NUMERICAL)
    except (InputError, ValueError, FileNotFoundError) as error:
        logger.error("Invalid input for %s: %s", args.command, error)  # noqa: TRY400
        return _report_error(error, EXIT_INPUT)
    except Exception as error:  # noqa: BLE001
        logger.exception("Unexpected failure in %s", args.command)
        return _report_error(error, EXIT_NUMERICAL)
    finally:
        for handler in handlers:
            logger.removeHandler(handler)
            handler.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
