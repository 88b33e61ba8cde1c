"""Tests for run_config and the CONFIG_FIELD_SPECS / default.conf sync.

run_config.py builds the typed sections from CONFIG_FIELD_SPECS in
stark_utils.py. These tests verify those specs match the shipped default.conf
so the two files don't drift apart.
"""

from __future__ import annotations

import configparser
import math
from pathlib import Path

import pytest
from manifold import mhz_to_rad_per_us
from run_config import (
    DEFAULT_CONF_PATH,
    ConfigError,
    _convert,
    load_config,
    parse_config_text,
)
from stark_utils import CONFIG_FIELD_SPECS, DEFAULT_DENSITIES_CM3, InputError

repo_root = Path(__file__).parent.parent
default_conf_path = repo_root / "starkthermal" / "default.conf"


def _load_default_conf() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(default_conf_path)
    return parser


def test_default_conf_path_points_at_shipped_file() -> None:
    assert default_conf_path.resolve() == DEFAULT_CONF_PATH


def test_default_conf_sections_match() -> None:
    parser = _load_default_conf()

    assert parser.sections() == list(CONFIG_FIELD_SPECS)


def test_default_conf_field_names_match() -> None:
    parser = _load_default_conf()

    for section, specs in CONFIG_FIELD_SPECS.items():
        conf_fields = list(parser[section])
        spec_fields = [s["field"] for s in specs]
        assert spec_fields == conf_fields, f"field mismatch in [{section}]"


def test_default_conf_values_match_spec_defaults() -> None:
    """Test that default.conf and the field defaults convert to equal values."""
    parser = _load_default_conf()

    for section, specs in CONFIG_FIELD_SPECS.items():
        for spec in specs:
            name = str(spec["field"])
            from_conf = _convert(section, spec, parser[section][name].strip())
            from_spec = _convert(section, spec, str(spec["default"]))
            assert from_conf == from_spec, f"default mismatch for [{section}] {name}"


def test_load_config_defaults_equal_default_conf() -> None:
    assert load_config(None) == load_config(default_conf_path)


def test_default_values() -> None:
    config = load_config(None)

    assert config.geometry.densities_cm3 == DEFAULT_DENSITIES_CM3
    assert config.basis.n_atoms == 4
    assert config.manifold.max_cluster == 6
    assert config.basis.reference_energy_mhz is None
    assert config.reference_energy is None
    assert config.delta_cut == pytest.approx(mhz_to_rad_per_us(530.0))
    assert config.denominator_floor == pytest.approx(2.0 * math.pi)
    assert config.dynamics.dt_policy == "auto"
    assert config.expdata.region_edges_ghz == ()
    assert len(config.expdata.couplings) == 13


def test_missing_keys_take_defaults() -> None:
    config = parse_config_text("[basis]\nn_atoms = 2\n")

    assert config.basis.n_atoms == 2
    assert config.run.seed == 12345
    assert config.kpm.n_moments == 2048


def test_lists_and_optionals_are_parsed() -> None:
    config = parse_config_text(
        "[basis]\nreference_energy_mhz = 12.5\ninitial_sublevels = 0, 2\n"
        "[typicality]\nsweep_fractions = 0.2, 0.3, 0.5\n",
    )

    assert config.reference_energy == pytest.approx(mhz_to_rad_per_us(12.5))
    assert config.basis.initial_sublevels == (0, 2)
    assert config.typicality.sweep_fractions == (0.2, 0.3, 0.5)


@pytest.mark.parametrize(
    ("text", "fragment"),
    [
        ("[nonsense]\na = 1\n", "Unknown configuration sections"),
        ("[run]\ncolour = red\n", "Unknown keys"),
        ("[run]\nseed = -1\n", "seed must be >= 0"),
        ("[run]\nworkers = many\n", "cannot read"),
        ("[logging]\nloglevel = LOUD\n", "does not match"),
        ("[dynamics]\ndt_policy = euler\n", "must be one of"),
        ("[dynamics]\ndt_factor = 3.0\n", "must be <= 2.8"),
        ("[geometry]\ndensities_cm3 = 1e9, -2e9\n", "must be > 0.0"),
        ("[manifold]\ncluster_spacing_mhz = nan\n", "must be finite"),
        ("[hamiltonian]\nthree_body = maybe\n", "cannot read"),
        (
            "[typicality]\nshell_lower = 0.7\nshell_upper = 0.6\n",
            "must be below",
        ),
        ("[basis]\ninitial_cluster = 9\n", "outside"),
        ("[expdata]\nregion_edges_ghz = 1, 2, 3\n", "region edges"),
        ("[run\nseed = 1\n", "Malformed"),
    ],
)
def test_invalid_config_is_rejected(text: str, fragment: str) -> None:
    with pytest.raises(ConfigError, match=fragment):
        parse_config_text(text)


def test_config_error_is_input_error() -> None:
    assert issubclass(ConfigError, InputError)


def test_load_config_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.conf")


def test_with_overrides() -> None:
    config = load_config(None).with_overrides(seed=5, workers=3, output_dir="x")

    assert (config.run.seed, config.run.workers, config.run.output_dir) == (5, 3, "x")
    with pytest.raises(ConfigError):
        config.with_overrides(workers=0)


def test_as_dict_is_json_ready() -> None:
    resolved = load_config(None).as_dict()

    assert set(resolved) == set(CONFIG_FIELD_SPECS)
    assert isinstance(resolved["geometry"]["densities_cm3"], list)
    assert resolved["manifold"]["intra_offsets_mhz"] == [-20.0, -7.0, 6.0, 20.0]
