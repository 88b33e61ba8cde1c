"""Pipeline stages behind the command-line subcommands.

Every stage takes a validated RunConfig, writes its artifacts into the output
directory and returns the JSON payload it wrote. All artifacts embed the
resolved configuration, the code version and the seed.
"""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "lib"))

import numpy as np
import pandas as pd
from basis import (
    ClusterPopulations,
    ProductBasis,
    basis_summary,
    cluster_column,
    enumerate_basis,
    initial_state,
)
from dynamics import (
    PopulationTrace,
    choose_dt,
    detect_equilibrium,
    evolve,
)
from expdata import (
    CouplingTable,
    RegionBoundaries,
    SpectrumShot,
    bin_by_total_signal,
    compare,
    load_shots,
    populations_frame,
    reduce_bin,
    suggest_region_boundaries,
)
from geometry import AtomGeometry, realization_seed, sample_positions
from hamiltonian import (
    AssemblyReport,
    SpectralBounds,
    assemble_with_report,
    spectral_bounds,
)
from kpm import ShellSelection, chebyshev_moments, dos_estimate, select_shell
from kpm import shell_fraction_sweep as kpm_shell_fraction_sweep
from manifold import DipoleTable, StarkManifold, build_dipole_table, build_manifold
from oracle import (
    exact_diagonalize,
    exact_evolve,
    fidelity,
    microcanonical_populations,
)
from stark_jobs import run_jobs
from stark_utils import (
    InputError,
    provenance,
    write_csv,
    write_json,
    write_text,
)
from typicality import EnergyShell, ThermalEstimate, thermal_populations

if TYPE_CHECKING:
    import logging
    from collections.abc import Sequence
    from concurrent.futures import Executor

    import numpy.typing as npt
    from expdata import BinReduction
    from run_config import RunConfig
    from sparse_operator import SparseOperator

# Oracle-check tolerances: per-cluster typicality residual and RK4 fidelity.
ORACLE_POPULATION_TOL = 0.02
ORACLE_FIDELITY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class StaticSystem:
    """Parts of the model that do not depend on atom positions."""

    manifold: StarkManifold
    dipoles: DipoleTable
    basis: ProductBasis
    psi0: npt.NDArray[np.complex128] = field(repr=False)


@dataclass(frozen=True, eq=False)
class Realization:
    """One disorder realization: geometry, Hamiltonian and its bounds."""

    density_index: int
    realization: int
    geometry: AtomGeometry
    operator: SparseOperator
    bounds: SpectralBounds
    report: AssemblyReport


def _record(config: RunConfig, command: str) -> dict[str, Any]:
    return provenance(command, config.run.seed, config.as_dict())


def build_static(config: RunConfig, logger: logging.Logger) -> StaticSystem:
    """Manifold, dipole table, truncated basis and the initial state."""
    manifold = build_manifold(config.manifold)
    dipoles = build_dipole_table(config.dipoles, manifold, config.run.seed)
    basis = enumerate_basis(
        manifold,
        config.basis.n_atoms,
        e_ref=config.reference_energy,
        delta_cut=config.delta_cut,
        max_dim=config.basis.max_dim,
        logger=logger,
    )
    psi0 = initial_state(
        basis,
        config.basis.initial_cluster,
        config.basis.initial_sublevels or None,
    )
    return StaticSystem(manifold=manifold, dipoles=dipoles, basis=basis, psi0=psi0)


def density_index_or_default(config: RunConfig, density_index: int | None) -> int:
    """Validate a density index; the highest density when None."""
    n_densities = len(config.geometry.densities_cm3)
    if density_index is None:
        return n_densities - 1
    if not 0 <= density_index < n_densities:
        msg = f"Density index {density_index} outside 0..{n_densities - 1}"
        raise InputError(msg)
    return density_index


def _export_realization(  # noqa: PLR0913
    config: RunConfig,
    density_index: int,
    realization: int,
    geometry: AtomGeometry,
    operator: SparseOperator,
    out: Path,
) -> None:
    record = _record(config, "export")
    if config.output.export_positions:
        name = f"positions_density{density_index}_real{realization}.csv"
        geometry.export_csv(out / name, record)
    if config.output.export_operator and realization == 0:
        out.mkdir(parents=True, exist_ok=True)
        operator.export_text(out / f"operator_density{density_index}.txt", record)


def build_realization(
    config: RunConfig,
    static: StaticSystem,
    density_index: int,
    realization: int,
    logger: logging.Logger,
    out: Path | None = None,
) -> Realization:
    """Sample positions for one realization and assemble its Hamiltonian.

    With ``out`` set, the [output] flags export the positions of every
    realization and the Hamiltonian of realization 0.
    """
    density = config.geometry.densities_cm3[density_index]
    geometry = sample_positions(
        config.basis.n_atoms,
        density,
        exclusion_um=config.geometry.exclusion_um,
        seed=realization_seed(config.run.seed, density_index, realization),
        max_attempts=config.geometry.max_attempts,
    )
    operator, report = assemble_with_report(
        static.manifold,
        static.dipoles,
        geometry,
        static.basis,
        three_body=config.hamiltonian.three_body,
        three_body_paths=config.hamiltonian.three_body_paths,
        denominator_floor=config.denominator_floor,
        drop_tol=config.hamiltonian.drop_tolerance,
        logger=logger,
    )
    bounds = spectral_bounds(operator, seed=config.run.seed)
    if out is not None:
        _export_realization(config, density_index, realization, geometry, operator, out)
    return Realization(
        density_index=density_index,
        realization=realization,
        geometry=geometry,
        operator=operator,
        bounds=bounds,
        report=report,
    )


def run_basis(config: RunConfig, out: Path, logger: logging.Logger) -> dict[str, Any]:
    """Enumerate the basis and write basis.json."""
    static = build_static(config, logger)
    payload = {
        "provenance": _record(config, "basis"),
        "basis": basis_summary(static.basis),
        "initial_state_support": int(np.count_nonzero(static.psi0)),
    }
    write_json(payload, out / "basis.json")
    return payload


@dataclass(frozen=True, eq=False)
class DensityResult:
    """Realization-averaged dynamics at one density."""

    density_index: int
    density_cm3: float
    p_eq: npt.NDArray[np.float64] = field(repr=False)
    p_eq_stderr: npt.NDArray[np.float64] = field(repr=False)
    mean_trace: PopulationTrace
    realizations: list[dict[str, Any]]


def _evolve_realization(
    config: RunConfig,
    static: StaticSystem,
    density_index: int,
    realization: int,
    executor: Executor | None,
    logger: logging.Logger,
    out: Path | None = None,
) -> tuple[PopulationTrace, dict[str, Any]]:
    system = build_realization(
        config,
        static,
        density_index,
        realization,
        logger,
        out,
    )
    dynamics = config.dynamics
    dt = choose_dt(
        system.bounds,
        dynamics.t_total_us,
        policy=dynamics.dt_policy,
        factor=dynamics.dt_factor,
    )
    result = evolve(
        system.operator,
        static.psi0,
        static.basis,
        dynamics.t_total_us,
        dt,
        dynamics.sample_every,
        bounds=system.bounds,
        executor=executor,
        logger=logger,
    )
    trace = result.trace
    summary: dict[str, Any] = {
        "realization": realization,
        "dt_us": result.dt,
        "n_steps": result.n_steps,
        "spectral_bounds_rad_per_us": [system.bounds.e_min, system.bounds.e_max],
        "final_norm_drift": result.final_norm_drift,
        "energy_drift_over_rho": float(
            np.abs(trace.energies - trace.energies[0]).max()
            / system.bounds.spectral_radius,
        ),
        "nnz": system.operator.nnz,
        "three_body_entries": system.report.three_body_entries,
        "skipped_denominators": system.report.skipped_denominators,
    }
    try:
        equilibrium = detect_equilibrium(
            trace,
            dynamics.eq_window_us,
            dynamics.eq_tol,
            logger,
        )
    except InputError:
        logger.warning(
            "Trace too short for %.4g us equilibrium windows",
            dynamics.eq_window_us,
        )
        summary.update(equilibrated=False, t_eq_us=None)
    else:
        summary.update(
            equilibrated=equilibrium.equilibrated,
            t_eq_us=equilibrium.t_eq,
            p_eq=equilibrium.p_eq.as_dict(),
        )
    return trace, summary


def average_traces(traces: Sequence[PopulationTrace]) -> PopulationTrace:
    """Average realizations on the sample times of the most coarsely sampled one.

    Realizations pick their own RK4 step, so their samples fall on different
    times; every trace is interpolated onto the common grid first. The norm
    drift is the worst over realizations.
    """
    grid = min(traces, key=lambda t: t.n_samples).times
    resampled = [t.resample(grid) for t in traces]
    return PopulationTrace(
        times=grid,
        populations=np.mean([t.populations for t in resampled], axis=0),
        norm_drift=np.max([t.norm_drift for t in resampled], axis=0),
        energies=np.mean([t.energies for t in resampled], axis=0),
        max_cluster=traces[0].max_cluster,
    )


def evolve_density(
    config: RunConfig,
    static: StaticSystem,
    density_index: int,
    logger: logging.Logger,
    out: Path | None = None,
) -> DensityResult:
    """Evolve every realization at one density and average the results.

    The equilibrium populations of a realization are the mean over its final
    equilibrium window; realizations run in parallel when workers > 1, and a
    single realization uses the pool for row-partitioned matvecs instead.
    """
    n_real = config.geometry.realizations
    workers = config.run.workers
    use_pool_for_matvec = n_real == 1 and workers > 1
    pool = (
        ThreadPoolExecutor(max_workers=workers)
        if use_pool_for_matvec
        else nullcontext()
    )
    with pool as executor:
        outcomes = run_jobs(
            lambda r: _evolve_realization(
                config,
                static,
                density_index,
                r,
                executor,
                logger,
                out,
            ),
            list(range(n_real)),
            1 if use_pool_for_matvec else workers,
            logger,
        )
    traces = [o.result[0] for o in outcomes if o.result is not None]
    summaries = [o.result[1] for o in outcomes if o.result is not None]

    max_cluster = static.manifold.max_cluster
    window = config.dynamics.eq_window_us
    finals = []
    for trace in traces:
        tail = trace.times >= trace.times[-1] - window
        finals.append(trace.populations[tail].mean(axis=0))
    finals_array = np.vstack(finals)
    p_eq = ClusterPopulations.from_weights(finals_array.mean(axis=0), max_cluster)
    if len(finals) > 1:
        stderr = finals_array.std(axis=0, ddof=1) / np.sqrt(len(finals))
    else:
        stderr = np.zeros(finals_array.shape[1])

    mean_trace = average_traces(traces)
    return DensityResult(
        density_index=density_index,
        density_cm3=config.geometry.densities_cm3[density_index],
        p_eq=p_eq.values,
        p_eq_stderr=np.asarray(stderr),
        mean_trace=mean_trace,
        realizations=summaries,
    )


def _populations_dict(
    values: npt.NDArray[np.float64],
    max_cluster: int,
) -> dict[str, float]:
    return {
        cluster_column(c): float(v)
        for c, v in zip(range(-max_cluster, max_cluster + 1), values, strict=True)
    }


def run_evolve(
    config: RunConfig,
    out: Path,
    density_index: int | None,
    logger: logging.Logger,
) -> dict[str, Any]:
    """Evolve the initial state at one density; write trace CSV and JSON."""
    index = density_index_or_default(config, density_index)
    static = build_static(config, logger)
    result = evolve_density(config, static, index, logger, out)
    record = _record(config, "evolve")
    result.mean_trace.export_csv(out / f"trace_density{index}.csv", record)
    max_cluster = static.manifold.max_cluster
    payload = {
        "provenance": record,
        "density_index": index,
        "density_cm3": result.density_cm3,
        "p_eq": _populations_dict(result.p_eq, max_cluster),
        "p_eq_stderr": _populations_dict(result.p_eq_stderr, max_cluster),
        "realizations": result.realizations,
    }
    write_json(payload, out / f"evolve_density{index}.json")
    return payload


@dataclass(frozen=True, eq=False)
class ThermalResult:
    """Thermal prediction with the shell it was computed in."""

    selection: ShellSelection
    estimate: ThermalEstimate
    initial_energy: float
    sweep: list[tuple[ShellSelection, ThermalEstimate]]


def _dos_and_shells(
    config: RunConfig,
    system: Realization,
    initial_energy: float,
    logger: logging.Logger,
) -> tuple[Any, ShellSelection, list[ShellSelection]]:
    moments = chebyshev_moments(
        system.operator,
        config.kpm.n_moments,
        config.kpm.n_vectors,
        config.run.seed,
        bounds=system.bounds,
        workers=config.run.workers,
        logger=logger,
    )
    dos = dos_estimate(moments, config.kpm.grid_size)
    center = initial_energy if config.typicality.shell_centering == "initial" else None
    selection = select_shell(
        dos,
        config.typicality.shell_lower,
        config.typicality.shell_upper,
        center=center,
        logger=logger,
    )
    sweep = kpm_shell_fraction_sweep(
        dos,
        config.typicality.sweep_fractions,
        center=center,
        logger=logger,
    )
    return dos, selection, sweep


def thermal_prediction(
    config: RunConfig,
    static: StaticSystem,
    system: Realization,
    logger: logging.Logger,
) -> tuple[Any, ThermalResult]:
    """DOS, shell and typicality estimate (plus the shell-fraction sweep)."""
    initial_energy = system.operator.expectation(static.psi0)
    dos, selection, sweep_shells = _dos_and_shells(
        config,
        system,
        initial_energy,
        logger,
    )
    typicality = config.typicality
    lam = max(
        abs(system.bounds.e_min - selection.shell.e0),
        abs(system.bounds.e_max - selection.shell.e0),
    )
    ds = typicality.ds_factor / lam**2
    stop = typicality.stop_stderr or None

    def _estimate(shell: EnergyShell) -> ThermalEstimate:
        return thermal_populations(
            system.operator,
            static.basis,
            shell,
            typicality.n_samples,
            config.run.seed,
            workers=config.run.workers,
            stop_stderr=stop,
            ds=ds,
            bounds=system.bounds,
            logger=logger,
        )

    estimate = _estimate(selection.shell)
    sweep = [(s, _estimate(s.shell)) for s in sweep_shells]
    return dos, ThermalResult(
        selection=selection,
        estimate=estimate,
        initial_energy=initial_energy,
        sweep=sweep,
    )


def _thermal_payload(result: ThermalResult) -> dict[str, Any]:
    return {
        "initial_energy_rad_per_us": result.initial_energy,
        "shell": result.selection.as_dict(),
        **result.estimate.as_dict(),
        "fraction_sweep": [
            {
                "fraction": s.upper_fraction - s.lower_fraction,
                "shell": s.as_dict(),
                "populations": e.mean.as_dict(),
                "max_stderr": float(e.stderr.max()),
            }
            for s, e in result.sweep
        ],
    }


def run_thermal(
    config: RunConfig,
    out: Path,
    density_index: int | None,
    logger: logging.Logger,
) -> dict[str, Any]:
    """Predict the thermal populations; write thermal.json and thermal.csv."""
    index = density_index_or_default(config, density_index)
    static = build_static(config, logger)
    system = build_realization(config, static, index, 0, logger)
    _, result = thermal_prediction(config, static, system, logger)
    record = _record(config, "thermal")
    payload = {
        "provenance": record,
        "density_index": index,
        **_thermal_payload(result),
    }
    write_json(payload, out / "thermal.json")
    result.estimate.export_csv(out / "thermal.csv", record)
    return payload


def run_dos(
    config: RunConfig,
    out: Path,
    density_index: int | None,
    logger: logging.Logger,
) -> dict[str, Any]:
    """Estimate the DOS and the shell; write dos.csv and shell.json."""
    index = density_index_or_default(config, density_index)
    static = build_static(config, logger)
    system = build_realization(config, static, index, 0, logger)
    initial_energy = system.operator.expectation(static.psi0)
    dos, selection, sweep = _dos_and_shells(config, system, initial_energy, logger)
    record = _record(config, "dos")
    dos.export_csv(out / "dos.csv", record)
    payload = {
        "provenance": record,
        "density_index": index,
        "integral": dos.integrate(),
        "initial_energy_rad_per_us": initial_energy,
        "shell": selection.as_dict(),
        "fraction_sweep": [s.as_dict() for s in sweep],
    }
    write_json(payload, out / "shell.json")
    return payload


def run_oracle_check(
    config: RunConfig,
    out: Path,
    density_index: int | None,
    logger: logging.Logger,
) -> dict[str, Any]:
    """Check typicality, KPM and RK4 against exact diagonalization."""
    index = density_index_or_default(config, density_index)
    static = build_static(config, logger)
    system = build_realization(config, static, index, 0, logger, out)
    eig = exact_diagonalize(system.operator, config.oracle.max_dim, logger)
    _, thermal = thermal_prediction(config, static, system, logger)
    shell = thermal.selection.shell
    exact = microcanonical_populations(eig, shell, static.basis)

    estimate = thermal.estimate
    residuals = estimate.mean.values - exact.values
    allowed = np.maximum(ORACLE_POPULATION_TOL, 2.0 * estimate.stderr)

    dynamics = config.dynamics
    dt = choose_dt(
        system.bounds,
        dynamics.t_total_us,
        policy=dynamics.dt_policy,
        factor=dynamics.dt_factor,
    )
    rk4 = evolve(
        system.operator,
        static.psi0,
        static.basis,
        dynamics.t_total_us,
        dt,
        dynamics.sample_every,
        bounds=system.bounds,
        logger=logger,
    )
    reference = exact_evolve(eig, static.psi0, dynamics.t_total_us)
    rk4_fidelity = fidelity(rk4.final_state, reference)

    lo, hi = thermal.selection.e_lo, thermal.selection.e_hi
    in_cdf_shell = int(((eig.eigenvalues >= lo) & (eig.eigenvalues <= hi)).sum())
    expected = (config.typicality.shell_upper - config.typicality.shell_lower) * eig.dim
    count_tol = max(2.0, 0.02 * eig.dim)

    table = pd.DataFrame(
        {
            "cluster": static.basis.manifold.clusters,
            "typicality": estimate.mean.values,
            "stderr": estimate.stderr,
            "microcanonical": exact.values,
            "residual": residuals,
            "allowed": allowed,
        },
    )
    passed = {
        "populations": bool(np.all(np.abs(residuals) <= allowed)),
        "rk4_fidelity": rk4_fidelity >= 1.0 - ORACLE_FIDELITY_TOL,
        "shell_count": abs(in_cdf_shell - expected) <= count_tol,
    }
    record = _record(config, "oracle-check")
    payload = {
        "provenance": record,
        "density_index": index,
        "dim": eig.dim,
        "shell": thermal.selection.as_dict(),
        "typicality": estimate.mean.as_dict(),
        "typicality_stderr": [float(e) for e in estimate.stderr],
        "microcanonical": exact.as_dict(),
        "residuals": [float(r) for r in residuals],
        "allowed": [float(a) for a in allowed],
        "rk4_fidelity": rk4_fidelity,
        "rk4_dt_us": rk4.dt,
        "eigenvalues_in_shell": in_cdf_shell,
        "expected_in_shell": expected,
        "passed": passed,
    }
    write_json(payload, out / "oracle_check.json")
    write_csv(table, out / "oracle_check.csv", record)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.5f}"))  # noqa: T201
    return payload


def run_reduce_data(
    config: RunConfig,
    out: Path,
    density_index: int | None,
    logger: logging.Logger,
) -> dict[str, Any]:
    """Reduce measured spectra to populations per density bin."""
    expdata = config.expdata
    if not expdata.shots_path:
        msg = "[expdata] shots_path is required for reduce-data"
        raise InputError(msg)
    shots = load_shots(Path(expdata.shots_path))
    for shot in shots:
        shot.check_scan_range(expdata.scan_min_ghz, expdata.scan_max_ghz)
    record = _record(config, "reduce-data")

    if not expdata.region_edges_ghz:
        grid = shots[0].frequencies_ghz
        mean_signal = np.mean(
            [np.interp(grid, s.frequencies_ghz, s.signal) for s in shots],
            axis=0,
        )
        suggestion = suggest_region_boundaries(
            SpectrumShot.from_samples(grid, mean_signal, shot_id="average"),
            len(expdata.couplings),
            expdata.cluster_period_ghz,
            logger=logger,
        )
        write_json(
            {
                "provenance": record,
                "suggested_region_edges_ghz": [float(e) for e in suggestion],
            },
            out / "suggested_regions.json",
        )
        msg = (
            "[expdata] region_edges_ghz is not set; a suggestion was written to "
            f"{out / 'suggested_regions.json'} for review"
        )
        raise InputError(msg)

    boundaries = RegionBoundaries.from_edges(expdata.region_edges_ghz)
    couplings = CouplingTable.from_values(expdata.couplings)
    bins = bin_by_total_signal(shots, expdata.n_bins)
    selected = range(len(bins)) if density_index is None else [density_index]
    if density_index is not None and not 0 <= density_index < len(bins):
        msg = f"Density bin {density_index} outside 0..{len(bins) - 1}"
        raise InputError(msg)

    def _reduce(k: int) -> BinReduction:
        return reduce_bin(
            bins[k],
            boundaries,
            couplings,
            bin_index=k,
            normalize_order=expdata.normalize_order,
            logger=logger,
        )

    outcomes = run_jobs(_reduce, list(selected), config.run.workers, logger)
    reductions = [o.result for o in outcomes if o.result is not None]
    payload = {
        "provenance": record,
        "normalize_order": expdata.normalize_order,
        "bins": [r.as_dict() for r in reductions],
    }
    write_json(payload, out / "expdata.json")
    write_csv(populations_frame(reductions), out / "expdata.csv", record)
    return payload


def _read_populations(payload: dict[str, Any]) -> ClusterPopulations:
    values = payload["populations"]
    if isinstance(values, dict):
        n = len(values)
        max_cluster = n // 2
        clusters = range(-max_cluster, max_cluster + 1)
        ordered = [values[cluster_column(c)] for c in clusters]
    else:
        ordered = list(values)
        max_cluster = len(ordered) // 2
    weights = np.asarray(ordered, dtype=float)
    return ClusterPopulations.from_weights(weights, max_cluster)


def _load_json(path_text: str, key: str) -> dict[str, Any]:
    if not path_text:
        msg = f"[compare] {key} is required for compare"
        raise InputError(msg)
    path = Path(path_text)
    if not path.exists():
        msg = f"{key} not found: {path}"
        raise FileNotFoundError(msg)
    with path.open() as handle:
        return json.load(handle)  # type: ignore[no-any-return]


def run_compare(
    config: RunConfig,
    out: Path,
    density_index: int | None,
    logger: logging.Logger,
) -> dict[str, Any]:
    """Compare reduced data bins against a predicted distribution."""
    experimental = _load_json(config.compare.experimental_path, "experimental_path")
    predicted_payload = _load_json(config.compare.predicted_path, "predicted_path")
    predicted = _read_populations(predicted_payload)
    bins = experimental.get("bins", [experimental])
    if density_index is not None:
        bins = [b for b in bins if b.get("bin_index") == density_index]
        if not bins:
            msg = f"No experimental bin {density_index}"
            raise InputError(msg)

    reports = []
    text = []
    for entry in bins:
        measured = _read_populations(entry)
        raw_errors = entry.get("stderr")
        errors = (
            None
            if raw_errors is None
            else np.array([np.nan if e is None else e for e in raw_errors], dtype=float)
        )
        report = compare(measured, predicted, errors, config.basis.initial_cluster)
        reports.append({"bin_index": entry.get("bin_index"), **report.as_dict()})
        text.append(f"bin {entry.get('bin_index')}\n{report.render()}")
        logger.info(
            "Bin %s: total variation %.4f, initial excess %+.4f",
            entry.get("bin_index"),
            report.total_variation,
            report.initial_excess,
        )
    record = _record(config, "compare")
    payload = {"provenance": record, "comparisons": reports}
    write_json(payload, out / "compare.json")
    write_text(text, out / "compare.txt", record)
    return payload


def monotonicity_report(
    values: npt.NDArray[np.float64],
    errors: npt.NDArray[np.float64],
) -> dict[str, Any]:
    """Check that values do not increase from one density to the next.

    A rise counts as a violation only when it exceeds twice the combined
    standard error of the two points.
    """
    rises = np.diff(values)
    allowed = 2.0 * np.sqrt(errors[1:] ** 2 + errors[:-1] ** 2)
    violations = [int(i) for i in np.nonzero(rises > allowed)[0]]
    return {
        "non_increasing": not violations,
        "violations_after_index": violations,
        "rises": [float(r) for r in rises],
    }


def run_density_sweep(
    config: RunConfig,
    out: Path,
    density_index: int | None,
    logger: logging.Logger,
) -> dict[str, Any]:
    """Equilibrium populations across the density grid and the thermal row.

    The thermal prediction is computed once, at the reference density
    (``density_index``, the highest density by default).
    """
    static = build_static(config, logger)
    max_cluster = static.manifold.max_cluster
    c0 = config.basis.initial_cluster
    results = [
        evolve_density(config, static, k, logger)
        for k in range(len(config.geometry.densities_cm3))
    ]
    reference = density_index_or_default(config, density_index)
    system = build_realization(config, static, reference, 0, logger)
    _, thermal = thermal_prediction(config, static, system, logger)
    thermal_values = thermal.estimate.mean.values
    thermal_c0 = thermal.estimate.mean[c0]

    rows = []
    for result in results:
        row: dict[str, Any] = {"kind": "dynamics", "density_cm3": result.density_cm3}
        row.update(_populations_dict(result.p_eq, max_cluster))
        row.update(
            {
                f"stderr_{k.removeprefix('p_')}": v
                for k, v in _populations_dict(result.p_eq_stderr, max_cluster).items()
            },
        )
        rows.append(row)
    thermal_row: dict[str, Any] = {"kind": "thermal", "density_cm3": np.nan}
    thermal_row.update(_populations_dict(thermal_values, max_cluster))
    thermal_row.update(
        {
            f"stderr_{k.removeprefix('p_')}": v
            for k, v in _populations_dict(thermal.estimate.stderr, max_cluster).items()
        },
    )
    rows.append(thermal_row)
    record = _record(config, "density-sweep")
    write_csv(pd.DataFrame(rows), out / "density_sweep.csv", record)

    column = c0 + max_cluster
    initial = np.array([r.p_eq[column] for r in results])
    initial_err = np.array([r.p_eq_stderr[column] for r in results])
    payload = {
        "provenance": record,
        "densities_cm3": [r.density_cm3 for r in results],
        "initial_cluster": c0,
        "initial_cluster_population": [float(v) for v in initial],
        "initial_cluster_stderr": [float(v) for v in initial_err],
        "thermal_reference_density_index": reference,
        "thermal": _thermal_payload(thermal),
        "excess_over_thermal": [float(v - thermal_c0) for v in initial],
        "monotonicity": monotonicity_report(initial, initial_err),
        "realizations": {str(r.density_index): r.realizations for r in results},
    }
    write_json(payload, out / "density_sweep.json")
    return payload
