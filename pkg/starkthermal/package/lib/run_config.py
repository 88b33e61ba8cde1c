"""Typed run configuration read from an INI file.

Every field is declared once in CONFIG_FIELD_SPECS (stark_utils.py); this
module converts and validates raw values against those specs and assembles
the per-section parameter classes. Tests compare the specs against the
shipped default.conf to catch drift between the two files.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from manifold import DipoleParams, ManifoldParams, mhz_to_rad_per_us
from stark_utils import CONFIG_FIELD_SPECS, InputError

DEFAULT_CONF_PATH = Path(__file__).resolve().parents[2] / "default.conf"

_BOOLEANS = configparser.ConfigParser.BOOLEAN_STATES


class ConfigError(InputError):
    """The configuration file is malformed or a value fails validation."""


@dataclass(frozen=True)
class RunSection:
    seed: int = 12345
    workers: int = 1
    output_dir: str = "output"


@dataclass(frozen=True)
class LoggingSection:
    loglevel: str = "INFO"


@dataclass(frozen=True)
class GeometrySection:
    densities_cm3: tuple[float, ...] = ()
    exclusion_um: float = 0.0
    realizations: int = 10
    max_attempts: int = 10_000


@dataclass(frozen=True)
class BasisSection:
    n_atoms: int = 4
    delta_cut_spacings: float = 1.0
    reference_energy_mhz: float | None = None
    max_dim: int = 2_000_000
    initial_cluster: int = 0
    initial_sublevels: tuple[int, ...] = ()


@dataclass(frozen=True)
class HamiltonianSection:
    three_body: bool = True
    three_body_paths: str = "outside"
    denominator_floor_mhz: float = 1.0
    drop_tolerance: float = 1e-12


@dataclass(frozen=True)
class DynamicsSection:
    t_total_us: float = 3.0
    dt_policy: str = "auto"
    dt_factor: float = 0.1
    sample_every: int = 100
    eq_window_us: float = 0.5
    eq_tol: float = 0.005


@dataclass(frozen=True)
class TypicalitySection:
    n_samples: int = 48
    stop_stderr: float = 1e-3
    shell_lower: float = 1.0 / 3.0
    shell_upper: float = 2.0 / 3.0
    shell_centering: str = "initial"
    ds_factor: float = 0.05
    sweep_fractions: tuple[float, ...] = (0.3, 0.4)


@dataclass(frozen=True)
class KpmSection:
    n_moments: int = 2048
    n_vectors: int = 16
    grid_size: int = 4096


@dataclass(frozen=True)
class OracleSection:
    max_dim: int = 6000


@dataclass(frozen=True)
class ExpDataSection:
    shots_path: str = ""
    region_edges_ghz: tuple[float, ...] = ()
    couplings: tuple[float, ...] = ()
    scan_min_ghz: float = 104.0
    scan_max_ghz: float = 112.0
    n_bins: int = 10
    normalize_order: str = "shot"
    cluster_period_ghz: float = 0.53


@dataclass(frozen=True)
class CompareSection:
    experimental_path: str = ""
    predicted_path: str = ""


@dataclass(frozen=True)
class OutputSection:
    export_positions: bool = False
    export_operator: bool = False


_SECTION_CLASSES: dict[str, type] = {
    "run": RunSection,
    "logging": LoggingSection,
    "manifold": ManifoldParams,
    "dipoles": DipoleParams,
    "geometry": GeometrySection,
    "basis": BasisSection,
    "hamiltonian": HamiltonianSection,
    "dynamics": DynamicsSection,
    "typicality": TypicalitySection,
    "kpm": KpmSection,
    "oracle": OracleSection,
    "expdata": ExpDataSection,
    "compare": CompareSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class RunConfig:
    """Fully validated configuration of one run."""

    run: RunSection
    logging: LoggingSection
    manifold: ManifoldParams
    dipoles: DipoleParams
    geometry: GeometrySection
    basis: BasisSection
    hamiltonian: HamiltonianSection
    dynamics: DynamicsSection
    typicality: TypicalitySection
    kpm: KpmSection
    oracle: OracleSection
    expdata: ExpDataSection
    compare: CompareSection
    output: OutputSection

    @property
    def delta_cut(self) -> float:
        """Energy window half-width in rad/us."""
        return self.basis.delta_cut_spacings * mhz_to_rad_per_us(
            self.manifold.cluster_spacing_mhz,
        )

    @property
    def reference_energy(self) -> float | None:
        """Window center in rad/us, or None for the cluster-0 default."""
        if self.basis.reference_energy_mhz is None:
            return None
        return mhz_to_rad_per_us(self.basis.reference_energy_mhz)

    @property
    def denominator_floor(self) -> float:
        return mhz_to_rad_per_us(self.hamiltonian.denominator_floor_mhz)

    def with_overrides(
        self,
        seed: int | None = None,
        workers: int | None = None,
        output_dir: str | None = None,
    ) -> RunConfig:
        """Copy with command-line overrides of the [run] section applied."""
        run = self.run
        if seed is not None:
            if seed < 0:
                msg = f"seed must be non-negative, got {seed}"
                raise ConfigError(msg)
            run = dataclasses.replace(run, seed=seed)
        if workers is not None:
            if workers < 1:
                msg = f"workers must be at least 1, got {workers}"
                raise ConfigError(msg)
            run = dataclasses.replace(run, workers=workers)
        if output_dir is not None:
            run = dataclasses.replace(run, output_dir=output_dir)
        return dataclasses.replace(self, run=run)

    def as_dict(self) -> dict[str, dict[str, Any]]:
        """Resolved configuration as plain JSON-ready values."""
        result: dict[str, dict[str, Any]] = {}
        for section in _SECTION_CLASSES:
            values = dataclasses.asdict(getattr(self, section))
            result[section] = {
                key: list(value) if isinstance(value, tuple) else value
                for key, value in values.items()
            }
        return result


def _split(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _convert(section: str, spec: dict[str, Any], raw: str) -> object:
    name = f"[{section}] {spec['field']}"
    kind = spec["kind"]
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "bool":
            return _BOOLEANS[raw.lower()]
        if kind == "float":
            return _finite(float(raw), name)
        if kind == "optional_float":
            return None if raw == "" else _finite(float(raw), name)
        if kind == "float_list":
            return tuple(_finite(float(item), name) for item in _split(raw))
        if kind == "int_list":
            return tuple(int(item) for item in _split(raw))
    except ConfigError:
        raise
    except (KeyError, ValueError) as error:
        msg = f"{name}: cannot read {raw!r} as {kind}"
        raise ConfigError(msg) from error
    msg = f"Unknown field kind: {kind}"
    raise ValueError(msg)


def _finite(value: float, name: str) -> float:
    if not math.isfinite(value):
        msg = f"{name} must be finite, got {value}"
        raise ConfigError(msg)
    return value


def _check_range(name: str, value: float, rule: dict[str, Any]) -> None:
    low, high = rule.get("min"), rule.get("max")
    if low is not None and (
        value <= low if rule.get("min_exclusive") else value < low
    ):
        op = ">" if rule.get("min_exclusive") else ">="
        msg = f"{name} must be {op} {low}, got {value}"
        raise ConfigError(msg)
    if high is not None and (
        value >= high if rule.get("max_exclusive") else value > high
    ):
        op = "<" if rule.get("max_exclusive") else "<="
        msg = f"{name} must be {op} {high}, got {value}"
        raise ConfigError(msg)


def _validate(section: str, spec: dict[str, Any], value: object) -> None:
    """Apply the field validators; range rules apply to every list element."""
    if value is None:
        return
    name = f"[{section}] {spec['field']}"
    for rule in spec.get("validators", []):
        kind = rule["type"]
        if kind == "range":
            items = value if isinstance(value, tuple) else (value,)
            for item in items:
                _check_range(name, float(item), rule)  # type: ignore[arg-type]
        elif kind == "regex":
            if not re.match(rule["pattern"], str(value)):
                msg = f"{name} does not match {rule['pattern']}: {value!r}"
                raise ConfigError(msg)
        elif kind == "choice":
            if value not in rule["values"]:
                msg = f"{name} must be one of {rule['values']}, got {value!r}"
                raise ConfigError(msg)
        elif kind == "length":
            size = len(value)  # type: ignore[arg-type]
            if not rule["min_len"] <= size <= rule["max_len"]:
                msg = (
                    f"{name} must have {rule['min_len']}..{rule['max_len']} "
                    f"entries, got {size}"
                )
                raise ConfigError(msg)
        else:
            msg = f"Unknown validator type: {kind}"
            raise ValueError(msg)


def _check_cross_fields(config: RunConfig) -> None:
    typicality = config.typicality
    if typicality.shell_lower >= typicality.shell_upper:
        msg = (
            f"[typicality] shell_lower {typicality.shell_lower} must be below "
            f"shell_upper {typicality.shell_upper}"
        )
        raise ConfigError(msg)
    if config.expdata.scan_min_ghz >= config.expdata.scan_max_ghz:
        msg = "[expdata] scan_min_ghz must be below scan_max_ghz"
        raise ConfigError(msg)
    edges = config.expdata.region_edges_ghz
    if edges and len(edges) != len(config.expdata.couplings) + 1:
        msg = (
            f"[expdata] {len(edges)} region edges do not bound "
            f"{len(config.expdata.couplings)} regions"
        )
        raise ConfigError(msg)
    if abs(config.basis.initial_cluster) > config.manifold.max_cluster:
        msg = (
            f"[basis] initial_cluster {config.basis.initial_cluster} outside "
            f"+/-{config.manifold.max_cluster}"
        )
        raise ConfigError(msg)
    if any(s >= config.manifold.n_sublevels for s in config.basis.initial_sublevels):
        msg = (
            f"[basis] initial_sublevels {config.basis.initial_sublevels} must be "
            f"below n_sublevels {config.manifold.n_sublevels}"
        )
        raise ConfigError(msg)


def parse_config(parser: configparser.ConfigParser) -> RunConfig:
    """Build a RunConfig from parsed INI content, filling in defaults.

    Raises:
        ConfigError: On unknown sections or keys, or invalid values.

    """
    unknown_sections = set(parser.sections()) - set(CONFIG_FIELD_SPECS)
    if unknown_sections:
        msg = f"Unknown configuration sections: {sorted(unknown_sections)}"
        raise ConfigError(msg)

    sections: dict[str, object] = {}
    for section, specs in CONFIG_FIELD_SPECS.items():
        known = {str(spec["field"]) for spec in specs}
        present = dict(parser.items(section)) if parser.has_section(section) else {}
        unknown_keys = set(present) - known
        if unknown_keys:
            msg = f"Unknown keys in [{section}]: {sorted(unknown_keys)}"
            raise ConfigError(msg)
        values: dict[str, object] = {}
        for spec in specs:
            field_name = str(spec["field"])
            raw = present.get(field_name, str(spec["default"])).strip()
            if raw == "" and spec.get("required"):
                msg = f"[{section}] {field_name} is required"
                raise ConfigError(msg)
            value = _convert(section, spec, raw)
            _validate(section, spec, value)
            values[field_name] = value
        sections[section] = _SECTION_CLASSES[section](**values)

    config = RunConfig(**sections)  # type: ignore[arg-type]
    _check_cross_fields(config)
    return config


def _new_parser() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None)


def load_config(path: Path | None = None) -> RunConfig:
    """Load and validate a configuration file; defaults only when path is None.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigError: If the content is invalid.

    """
    parser = _new_parser()
    if path is not None:
        if not path.exists():
            msg = f"Configuration file not found: {path}"
            raise FileNotFoundError(msg)
        try:
            with path.open() as handle:
                parser.read_file(handle)
        except configparser.Error as error:
            msg = f"Malformed configuration {path}: {error}"
            raise ConfigError(msg) from error
    return parse_config(parser)


def parse_config_text(text: str) -> RunConfig:
    """Parse configuration from a string (tests and embedded configs)."""
    parser = _new_parser()
    try:
        parser.read_string(text)
    except configparser.Error as error:
        msg = f"Malformed configuration: {error}"
        raise ConfigError(msg) from error
    return parse_config(parser)
