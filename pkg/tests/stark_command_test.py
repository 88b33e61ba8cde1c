"""Tests for stark_command.py.

The subcommands run end to end on the small three-atom configuration from
conftest, writing their artifacts into a temporary directory.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import pytest
import stark_command
from stark_utils import APP_NAME, VERSION, NumericalFailureError, read_csv


def _run(config: Path, out: Path, command: str, *extra: str) -> int:
    argv = [command, "--config", str(config), "--out", str(out), *extra]
    return stark_command.main(argv)


def _error_payload(capsys: pytest.CaptureFixture[str]) -> dict[str, Any]:
    lines = capsys.readouterr().out.strip().splitlines()
    return json.loads(lines[-1])  # type: ignore[no-any-return]


def _load(path: Path) -> dict[str, Any]:
    return json.loads(path.read_text())  # type: ignore[no-any-return]


def _write_shots(directory: Path) -> Path:
    """Long-format spectra with lines at 1, 2 and 3 GHz."""
    frequencies = np.linspace(0.0, 4.0, 401)
    rows = []
    for k, (weights, total) in enumerate(
        [
            ((1.0, 1.0, 1.0), 1.0),
            ((1.0, 2.0, 1.0), 2.0),
            ((1.0, 1.0, 2.0), 3.0),
            ((2.0, 1.0, 1.0), 4.0),
        ],
    ):
        signal = sum(
            w * c * np.exp(-0.5 * ((frequencies - center) / 0.1) ** 2)
            for w, c, center in zip(
                weights,
                (0.1, 0.2, 0.1),
                (1.0, 2.0, 3.0),
                strict=True,
            )
        )
        rows.append(
            pd.DataFrame(
                {
                    "shot_id": f"shot{k}",
                    "freq_ghz": frequencies,
                    "signal": signal,
                    "total_signal": total,
                },
            ),
        )
    path = directory / "shots.csv"
    pd.concat(rows).to_csv(path, index=False)
    return path


def _with_expdata(config_file: Path, shots: Path, edges: str | None) -> Path:
    text = config_file.read_text()
    extra = f"\nshots_path = {shots}\n"
    if edges is not None:
        extra += f"region_edges_ghz = {edges}\n"
    config_file.write_text(text.replace("n_bins = 2\n", "n_bins = 2" + extra))
    return config_file


def test_parser_has_every_subcommand() -> None:
    parser = stark_command.build_parser()

    args = parser.parse_args(["evolve", "--seed", "3", "--density-bin", "1"])

    assert args.command == "evolve"
    assert args.seed == 3
    assert args.density_bin == 1
    assert set(stark_command.COMMANDS) == {
        "basis",
        "evolve",
        "thermal",
        "dos",
        "oracle-check",
        "reduce-data",
        "compare",
        "density-sweep",
    }


def test_version(capsys: pytest.CaptureFixture[str]) -> None:
    with pytest.raises(SystemExit) as excinfo:
        stark_command.main(["--version"])

    assert excinfo.value.code == 0
    assert capsys.readouterr().out.strip() == f"{APP_NAME} {VERSION}"


def test_basis_command(config_file: Path, tmp_path: Path) -> None:
    out = tmp_path / "out"

    assert _run(config_file, out, "basis") == 0

    payload = _load(out / "basis.json")
    assert payload["basis"]["dim"] > 0
    assert payload["initial_state_support"] == 8
    assert payload["provenance"]["command"] == "basis"
    assert (out / f"{APP_NAME}.log").exists()


def test_basis_output_is_deterministic(config_file: Path, tmp_path: Path) -> None:
    _run(config_file, tmp_path / "a", "basis")
    _run(config_file, tmp_path / "b", "basis")

    first = (tmp_path / "a" / "basis.json").read_bytes()
    assert first == (tmp_path / "b" / "basis.json").read_bytes()


def test_evolve_command(config_file: Path, tmp_path: Path) -> None:
    out = tmp_path / "out"

    assert _run(config_file, out, "evolve", "--density-bin", "0") == 0

    trace = read_csv(out / "trace_density0.csv")
    payload = _load(out / "evolve_density0.json")
    assert list(trace.columns[:4]) == ["t_us", "p_m1", "p_0", "p_p1"]
    assert trace["p_0"].iloc[0] == pytest.approx(1.0)
    assert trace["t_us"].iloc[-1] == pytest.approx(0.04)
    assert sum(payload["p_eq"].values()) == pytest.approx(1.0)
    assert len(payload["realizations"]) == 2


def test_dos_and_thermal_commands(config_file: Path, tmp_path: Path) -> None:
    out = tmp_path / "out"

    assert _run(config_file, out, "dos") == 0
    assert _run(config_file, out, "thermal") == 0

    shell = _load(out / "shell.json")
    thermal = _load(out / "thermal.json")
    assert shell["integral"] == pytest.approx(1.0, abs=1e-8)
    assert shell["density_index"] == 1
    assert len(shell["fraction_sweep"]) == 1
    assert sum(thermal["populations"].values()) == pytest.approx(1.0)
    assert thermal["n_samples"] == 4
    assert (out / "dos.csv").exists()
    assert (out / "thermal.csv").exists()


def test_oracle_check_command(config_file: Path, tmp_path: Path) -> None:
    out = tmp_path / "out"

    assert _run(config_file, out, "oracle-check") == 0

    payload = _load(out / "oracle_check.json")
    assert payload["passed"]["rk4_fidelity"]
    assert payload["rk4_fidelity"] > 1.0 - 1e-8
    assert set(payload["passed"]) == {"populations", "rk4_fidelity", "shell_count"}


def test_density_sweep_command(config_file: Path, tmp_path: Path) -> None:
    out = tmp_path / "out"

    assert _run(config_file, out, "density-sweep") == 0

    table = read_csv(out / "density_sweep.csv")
    payload = _load(out / "density_sweep.json")
    assert list(table["kind"]) == ["dynamics", "dynamics", "thermal"]
    assert len(payload["excess_over_thermal"]) == 2
    assert "non_increasing" in payload["monotonicity"]


def test_reduce_data_and_compare(config_file: Path, tmp_path: Path) -> None:
    out = tmp_path / "out"
    config = _with_expdata(
        config_file,
        _write_shots(tmp_path),
        "0.5, 1.5, 2.5, 3.5",
    )

    assert _run(config, out, "reduce-data") == 0

    reduced = _load(out / "expdata.json")
    assert [b["n_shots"] for b in reduced["bins"]] == [2, 2]
    mixed = (1.0 / 3.0 + 0.25) / 2.0
    assert reduced["bins"][0]["populations"] == pytest.approx(
        [mixed, 1.0 - 2.0 * mixed, mixed],
        abs=1e-4,
    )

    predicted = tmp_path / "predicted.json"
    populations = {"p_m1": 0.3, "p_0": 0.4, "p_p1": 0.3}
    predicted.write_text(json.dumps({"populations": populations}))
    config.write_text(
        config.read_text()
        + f"\n[compare]\nexperimental_path = {out / 'expdata.json'}\n"
        + f"predicted_path = {predicted}\n",
    )

    assert _run(config, out, "compare") == 0

    comparisons = _load(out / "compare.json")["comparisons"]
    assert [c["bin_index"] for c in comparisons] == [0, 1]
    assert all(0.0 <= c["total_variation"] <= 1.0 for c in comparisons)
    assert "total variation distance" in (out / "compare.txt").read_text()


def test_reduce_data_without_regions_suggests_them(
    config_file: Path,
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    out = tmp_path / "out"
    config = _with_expdata(config_file, _write_shots(tmp_path), None)

    assert _run(config, out, "reduce-data") == 1

    payload = _error_payload(capsys)
    suggestion = _load(out / "suggested_regions.json")
    assert payload["error"] == "InputError"
    assert "region_edges_ghz" in payload["message"]
    assert len(suggestion["suggested_region_edges_ghz"]) == 4
    assert not (out / "expdata.json").exists()


def test_missing_config_file(
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    code = _run(tmp_path / "absent.conf", tmp_path / "out", "basis")

    payload = _error_payload(capsys)
    assert code == 1
    assert payload == {
        "error": "FileNotFoundError",
        "message": f"Configuration file not found: {tmp_path / 'absent.conf'}",
        "exit_code": 1,
    }


def test_invalid_config_value(
    config_file: Path,
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    text = config_file.read_text()
    config_file.write_text(text.replace("n_atoms = 3", "n_atoms = 0"))

    assert _run(config_file, tmp_path / "out", "basis") == 1
    assert _error_payload(capsys)["error"] == "ConfigError"


def test_bad_density_index(
    config_file: Path,
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    assert _run(config_file, tmp_path / "out", "evolve", "--density-bin", "7") == 1
    assert "outside" in _error_payload(capsys)["message"]


def test_compare_without_inputs(
    config_file: Path,
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    assert _run(config_file, tmp_path / "out", "compare") == 1
    assert "experimental_path" in _error_payload(capsys)["message"]


def test_numerical_failure_exit_code(
    monkeypatch: pytest.MonkeyPatch,
    config_file: Path,
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    def diverging(*_args: object) -> dict[str, Any]:
        msg = "Norm drift 1e-3 exceeds 1e-6"
        raise NumericalFailureError(msg)

    monkeypatch.setitem(stark_command.COMMANDS, "evolve", (diverging, "evolve"))

    assert _run(config_file, tmp_path / "out", "evolve") == 2
    assert _error_payload(capsys) == {
        "error": "NumericalFailureError",
        "message": "Norm drift 1e-3 exceeds 1e-6",
        "exit_code": 2,
    }


def test_unexpected_error_is_reported_as_json(
    monkeypatch: pytest.MonkeyPatch,
    config_file: Path,
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
) -> None:
    def broken(*_args: object) -> dict[str, Any]:
        raise KeyError("p_0")

    monkeypatch.setitem(stark_command.COMMANDS, "dos", (broken, "dos"))
    out = tmp_path / "out"

    assert _run(config_file, out, "dos") == 2
    assert _error_payload(capsys) == {
        "error": "KeyError",
        "message": "'p_0'",
        "exit_code": 2,
    }
    assert "Unexpected failure in dos" in (out / f"{APP_NAME}.log").read_text()


def test_seed_override_reaches_provenance(config_file: Path, tmp_path: Path) -> None:
    out = tmp_path / "out"

    assert _run(config_file, out, "basis", "--seed", "99") == 0

    assert _load(out / "basis.json")["provenance"]["seed"] == 99
