"""Shared utilities for the Stark thermalization toolkit."""

import json
import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Any

import pandas as pd

APP_NAME = "starkthermal"
VERSION = "1.0.0"
CONF_NAME = f"{APP_NAME}.conf"

LOG_LEVEL_PATTERN = r"^(DEBUG|INFO|WARNING|ERROR|CRITICAL)$"

# Coupling strengths between each manifold cluster (-6..6) and the d states,
# measured in a separate experiment and used to rescale integrated spectra.
MEASURED_D_STATE_COUPLINGS = (
    0.005,
    0.014,
    0.014,
    0.023,
    0.060,
    0.098,
    0.125,
    0.132,
    0.159,
    0.103,
    0.080,
    0.087,
    0.087,
)

DEFAULT_DENSITIES_CM3 = (
    3.0e8,
    4.9e8,
    8.2e8,
    1.35e9,
    2.2e9,
    3.7e9,
    6.0e9,
    1.0e10,
    1.64e10,
    2.7e10,
)


def _join(values: tuple[float, ...]) -> str:
    return ", ".join(repr(v) for v in values)


# Field specifications for the run configuration (run_config.py). That file
# builds the typed parameter dataclasses from these specs. Tests compare these
# specs against default.conf to catch drift between the two files.
#
# Defaults are written as they appear in the config file; an empty default
# means "derived at resolution time" for optional fields.
CONFIG_FIELD_SPECS: dict[str, list[dict[str, object]]] = {
    "run": [
        {
            "field": "seed",
            "kind": "int",
            "required": True,
            "default": "12345",
            "validators": [{"type": "range", "min": 0}],
        },
        {
            "field": "workers",
            "kind": "int",
            "required": True,
            "default": "1",
            "validators": [{"type": "range", "min": 1, "max": 256}],
        },
        {
            "field": "output_dir",
            "kind": "str",
            "required": True,
            "default": "output",
            "validators": [{"type": "length", "min_len": 1, "max_len": 4096}],
        },
    ],
    "logging": [
        {
            "field": "loglevel",
            "kind": "str",
            "required": True,
            "default": "INFO",
            "validators": [{"type": "regex", "pattern": LOG_LEVEL_PATTERN}],
        },
    ],
    "manifold": [
        {
            "field": "cluster_spacing_mhz",
            "kind": "float",
            "required": True,
            "default": "530.0",
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
        {
            "field": "anharmonicity_mhz",
            "kind": "float",
            "required": True,
            "default": "1.0",
            "validators": [],
        },
        {
            "field": "intra_offsets_mhz",
            "kind": "float_list",
            "required": True,
            "default": "-20.0, -7.0, 6.0, 20.0",
            "validators": [{"type": "length", "min_len": 1, "max_len": 16}],
        },
        {
            "field": "max_cluster",
            "kind": "int",
            "required": True,
            "default": "6",
            "validators": [{"type": "range", "min": 1, "max": 50}],
        },
        {
            "field": "n_sublevels",
            "kind": "int",
            "required": True,
            "default": "4",
            "validators": [{"type": "range", "min": 1, "max": 16}],
        },
        {
            "field": "max_offset_ratio",
            "kind": "float",
            "required": True,
            "default": "0.5",
            "validators": [
                {
                    "type": "range",
                    "min": 0.0,
                    "max": 1.0,
                    "min_exclusive": True,
                    "max_exclusive": True,
                },
            ],
        },
    ],
    "dipoles": [
        {
            "field": "inter_c3_mhz_um3",
            "kind": "float",
            "required": True,
            "default": "200.0",
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
        {
            "field": "intra_inter_ratio",
            "kind": "float",
            "required": True,
            "default": "10.0",
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
        {
            "field": "spread",
            "kind": "float",
            "required": True,
            "default": "0.0",
            "validators": [
                {"type": "range", "min": 0.0, "max": 1.0, "max_exclusive": True},
            ],
        },
        {
            "field": "matrix_path",
            "kind": "str",
            "required": False,
            "default": "",
            "validators": [],
        },
    ],
    "geometry": [
        {
            "field": "densities_cm3",
            "kind": "float_list",
            "required": True,
            "default": _join(DEFAULT_DENSITIES_CM3),
            "validators": [
                {"type": "length", "min_len": 1, "max_len": 100},
                {"type": "range", "min": 0.0, "min_exclusive": True},
            ],
        },
        {
            "field": "exclusion_um",
            "kind": "float",
            "required": True,
            "default": "0.0",
            "validators": [{"type": "range", "min": 0.0}],
        },
        {
            "field": "realizations",
            "kind": "int",
            "required": True,
            "default": "10",
            "validators": [{"type": "range", "min": 1}],
        },
        {
            "field": "max_attempts",
            "kind": "int",
            "required": True,
            "default": "10000",
            "validators": [{"type": "range", "min": 1}],
        },
    ],
    "basis": [
        {
            "field": "n_atoms",
            "kind": "int",
            "required": True,
            "default": "4",
            "validators": [{"type": "range", "min": 1, "max": 8}],
        },
        {
            "field": "delta_cut_spacings",
            "kind": "float",
            "required": True,
            "default": "1.0",
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
        {
            "field": "reference_energy_mhz",
            "kind": "optional_float",
            "required": False,
            "default": "",
            "validators": [],
        },
        {
            "field": "max_dim",
            "kind": "int",
            "required": True,
            "default": "2000000",
            "validators": [{"type": "range", "min": 1}],
        },
        {
            "field": "initial_cluster",
            "kind": "int",
            "required": True,
            "default": "0",
            "validators": [],
        },
        {
            "field": "initial_sublevels",
            "kind": "int_list",
            "required": False,
            "default": "",
            "validators": [{"type": "range", "min": 0}],
        },
    ],
    "hamiltonian": [
        {
            "field": "three_body",
            "kind": "bool",
            "required": True,
            "default": "true",
            "validators": [],
        },
        {
            "field": "three_body_paths",
            "kind": "str",
            "required": True,
            "default": "outside",
            "validators": [
                {"type": "choice", "values": ["outside", "inside", "all"]},
            ],
        },
        {
            "field": "denominator_floor_mhz",
            "kind": "float",
            "required": True,
            "default": "1.0",
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
        {
            "field": "drop_tolerance",
            "kind": "float",
            "required": True,
            "default": "1e-12",
            "validators": [{"type": "range", "min": 0.0}],
        },
    ],
    "dynamics": [
        {
            "field": "t_total_us",
            "kind": "float",
            "required": True,
            "default": "3.0",
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
        {
            "field": "dt_policy",
            "kind": "str",
            "required": True,
            "default": "auto",
            "validators": [{"type": "choice", "values": ["auto", "spectral"]}],
        },
        {
            "field": "dt_factor",
            "kind": "float",
            "required": True,
            "default": "0.1",
            "validators": [
                {"type": "range", "min": 0.0, "max": 2.8, "min_exclusive": True},
            ],
        },
        {
            "field": "sample_every",
            "kind": "int",
            "required": True,
            "default": "100",
            "validators": [{"type": "range", "min": 1}],
        },
        {
            "field": "eq_window_us",
            "kind": "float",
            "required": True,
            "default": "0.5",
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
        {
            "field": "eq_tol",
            "kind": "float",
            "required": True,
            "default": "0.005",
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
    ],
    "typicality": [
        {
            "field": "n_samples",
            "kind": "int",
            "required": True,
            "default": "48",
            "validators": [{"type": "range", "min": 2}],
        },
        {
            "field": "stop_stderr",
            "kind": "float",
            "required": True,
            "default": "0.001",
            "validators": [{"type": "range", "min": 0.0}],
        },
        {
            "field": "shell_lower",
            "kind": "float",
            "required": True,
            "default": "0.3333333333333333",
            "validators": [
                {
                    "type": "range",
                    "min": 0.0,
                    "max": 1.0,
                    "min_exclusive": True,
                    "max_exclusive": True,
                },
            ],
        },
        {
            "field": "shell_upper",
            "kind": "float",
            "required": True,
            "default": "0.6666666666666666",
            "validators": [
                {
                    "type": "range",
                    "min": 0.0,
                    "max": 1.0,
                    "min_exclusive": True,
                    "max_exclusive": True,
                },
            ],
        },
        {
            "field": "shell_centering",
            "kind": "str",
            "required": True,
            "default": "initial",
            "validators": [{"type": "choice", "values": ["initial", "middle"]}],
        },
        {
            "field": "ds_factor",
            "kind": "float",
            "required": True,
            "default": "0.05",
            "validators": [
                {"type": "range", "min": 0.0, "max": 0.1, "min_exclusive": True},
            ],
        },
        {
            "field": "sweep_fractions",
            "kind": "float_list",
            "required": False,
            "default": "0.3, 0.4",
            "validators": [
                {
                    "type": "range",
                    "min": 0.0,
                    "max": 1.0,
                    "min_exclusive": True,
                    "max_exclusive": True,
                },
            ],
        },
    ],
    "kpm": [
        {
            "field": "n_moments",
            "kind": "int",
            "required": True,
            "default": "2048",
            "validators": [{"type": "range", "min": 2}],
        },
        {
            "field": "n_vectors",
            "kind": "int",
            "required": True,
            "default": "16",
            "validators": [{"type": "range", "min": 1}],
        },
        {
            "field": "grid_size",
            "kind": "int",
            "required": True,
            "default": "4096",
            "validators": [{"type": "range", "min": 2}],
        },
    ],
    "oracle": [
        {
            "field": "max_dim",
            "kind": "int",
            "required": True,
            "default": "6000",
            "validators": [{"type": "range", "min": 1}],
        },
    ],
    "expdata": [
        {
            "field": "shots_path",
            "kind": "str",
            "required": False,
            "default": "",
            "validators": [],
        },
        {
            "field": "region_edges_ghz",
            "kind": "float_list",
            "required": False,
            "default": "",
            "validators": [],
        },
        {
            "field": "couplings",
            "kind": "float_list",
            "required": True,
            "default": _join(MEASURED_D_STATE_COUPLINGS),
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
        {
            "field": "scan_min_ghz",
            "kind": "float",
            "required": True,
            "default": "104.0",
            "validators": [{"type": "range", "min": 0.0}],
        },
        {
            "field": "scan_max_ghz",
            "kind": "float",
            "required": True,
            "default": "112.0",
            "validators": [{"type": "range", "min": 0.0}],
        },
        {
            "field": "n_bins",
            "kind": "int",
            "required": True,
            "default": "10",
            "validators": [{"type": "range", "min": 1}],
        },
        {
            "field": "normalize_order",
            "kind": "str",
            "required": True,
            "default": "shot",
            "validators": [{"type": "choice", "values": ["shot", "bin"]}],
        },
        {
            "field": "cluster_period_ghz",
            "kind": "float",
            "required": True,
            "default": "0.53",
            "validators": [{"type": "range", "min": 0.0, "min_exclusive": True}],
        },
    ],
    "compare": [
        {
            "field": "experimental_path",
            "kind": "str",
            "required": False,
            "default": "",
            "validators": [],
        },
        {
            "field": "predicted_path",
            "kind": "str",
            "required": False,
            "default": "",
            "validators": [],
        },
    ],
    "output": [
        {
            "field": "export_positions",
            "kind": "bool",
            "required": True,
            "default": "false",
            "validators": [],
        },
        {
            "field": "export_operator",
            "kind": "bool",
            "required": True,
            "default": "false",
            "validators": [],
        },
    ],
}


class StarkError(Exception):
    """Base class for all toolkit errors."""


class InputError(StarkError, ValueError):
    """Invalid configuration, parameters or input data."""


class NumericalFailureError(StarkError, RuntimeError):
    """A numerical procedure failed or violated one of its invariants."""


def get_output_directory(configured: str = "output") -> Path:
    """Get the directory where run artifacts are written.

    The configured directory is used unless STARK_OUT_DIR is set, which
    takes precedence (used by the tests and by batch wrappers).

    Returns:
        Path to the output directory.

    """
    if env_dir := os.environ.get("STARK_OUT_DIR"):
        return Path(env_dir)
    return Path(configured)


def get_fallback_logger() -> logging.Logger:
    """Get a basic logger for use when no configuration is available.

    The log level is hardcoded to INFO since without a resolved run
    configuration we cannot read the user's configured level.
    """
    logger = logging.getLogger(APP_NAME)
    logger.setLevel(logging.INFO)
    return logger


@lru_cache(maxsize=1)
def get_logger(loglevel: str) -> logging.Logger:
    """Get the app logger configured with the [logging] loglevel setting.

    The result is cached; a different level evicts the cached logger, which is
    fine since there is only one app logger and the level is global anyway.
    """
    logger = logging.getLogger(APP_NAME)
    logger.setLevel(logging.getLevelNamesMapping().get(loglevel, logging.INFO))
    return logger


def provenance(
    command: str,
    seed: int | None,
    config: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Provenance record embedded in every artifact.

    No timestamps: identical inputs must produce byte-identical outputs.
    """
    return {
        "version": VERSION,
        "command": command,
        "seed": seed,
        "config": config or {},
    }


def provenance_header(record: dict[str, Any]) -> list[str]:
    """'#' comment lines carrying a provenance record in CSV and text artifacts."""
    config = json.dumps(record.get("config", {}), sort_keys=True, allow_nan=True)
    return [
        f"# {APP_NAME} {record['version']}",
        f"# command: {record['command']}",
        f"# seed: {record['seed']}",
        f"# config: {config}",
    ]


def read_provenance_header(path: Path) -> dict[str, Any]:
    """Parse the provenance comment lines at the top of an artifact."""
    record: dict[str, Any] = {}
    with path.open() as handle:
        for line in handle:
            if not line.startswith("# "):
                break
            key, sep, value = line[2:].rstrip("\n").partition(": ")
            if not sep:
                record["version"] = key.removeprefix(f"{APP_NAME} ")
            elif key == "config":
                record["config"] = json.loads(value)
            elif key == "seed":
                record["seed"] = None if value == "None" else int(value)
            else:
                record[key] = value
    return record


def write_text(lines: list[str], path: Path, record: dict[str, Any]) -> None:
    """Write a plain-text report preceded by '#' provenance comment lines."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join([*provenance_header(record), *lines]) + "\n")


def write_json(payload: dict[str, Any], path: Path) -> None:
    """Write a JSON artifact with sorted keys and a trailing newline."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, allow_nan=True)
        handle.write("\n")


def write_csv(
    frame: pd.DataFrame,
    path: Path,
    record: dict[str, Any] | None = None,
) -> None:
    """Write a CSV artifact preceded by '#' provenance comment lines.

    Read it back with ``read_csv``.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as handle:
        if record is not None:
            handle.writelines(f"{line}\n" for line in provenance_header(record))
        frame.to_csv(handle, index=False, float_format="%.17g")


def read_csv(path: Path, nrows: int | None = None) -> pd.DataFrame:
    """Read a CSV artifact, skipping '#' lines and keeping floats bit-exact."""
    return pd.read_csv(path, comment="#", float_precision="round_trip", nrows=nrows)
