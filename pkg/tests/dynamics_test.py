"""Tests for the dynamics module."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from basis import ProductBasis, initial_state
from dynamics import (
    STABILITY_LIMIT,
    NormDriftError,
    PopulationTrace,
    choose_dt,
    detect_equilibrium,
    evolve,
)
from hamiltonian import SpectralBounds
from oracle import exact_diagonalize, exact_evolve, fidelity
from sparse_operator import SparseOperator
from stark_utils import InputError, provenance, read_csv


def _two_level(coupling: float) -> SparseOperator:
    return SparseOperator.from_triplets(
        np.array([0, 1]),
        np.array([1, 0]),
        np.array([coupling, coupling]),
        2,
    )


def test_rabi_oscillation_matches_analytic() -> None:
    """Test that a resonant two-level system follows cos/sin of V t."""
    coupling = 1.0
    operator = _two_level(coupling)
    psi0 = np.array([1.0, 0.0], dtype=np.complex128)
    t_total = 2.0

    result = evolve(operator, psi0, None, t_total, dt=0.005 / coupling)

    expected = np.array([np.cos(coupling * t_total), -1j * np.sin(coupling * t_total)])
    assert np.allclose(result.final_state, expected, atol=1e-6)
    assert result.final_norm_drift < 1e-9
    assert result.trace.max_cluster == 0


def test_rk4_matches_exact_evolution(
    small_operator: SparseOperator,
    small_basis: ProductBasis,
    small_bounds: SpectralBounds,
) -> None:
    psi0 = initial_state(small_basis, 0)
    t_total = 0.02
    dt = choose_dt(small_bounds, t_total, policy="auto")

    result = evolve(
        small_operator,
        psi0,
        small_basis,
        t_total,
        dt,
        sample_every=10,
        bounds=small_bounds,
    )

    reference = exact_evolve(exact_diagonalize(small_operator), psi0, t_total)
    assert fidelity(result.final_state, reference) > 1.0 - 1e-8
    assert result.trace.norm_drift.max() < 1e-6


def test_energy_and_populations_are_recorded(
    small_operator: SparseOperator,
    small_basis: ProductBasis,
    small_bounds: SpectralBounds,
) -> None:
    psi0 = initial_state(small_basis, 0)

    result = evolve(
        small_operator,
        psi0,
        small_basis,
        0.01,
        choose_dt(small_bounds, 0.01, policy="auto"),
        sample_every=25,
        bounds=small_bounds,
    )
    trace = result.trace

    assert trace.times[0] == 0.0
    assert trace.times[-1] == pytest.approx(0.01)
    assert trace.n_samples == 1 + result.n_steps // 25 + (result.n_steps % 25 > 0)
    assert np.allclose(trace.populations.sum(axis=1), 1.0)
    assert trace.population(0)[0] == pytest.approx(1.0)
    drift = np.abs(trace.energies - trace.energies[0]).max()
    assert drift < 1e-5 * small_bounds.spectral_radius


def test_reverse_propagation_recovers_initial_state(
    small_operator: SparseOperator,
    small_basis: ProductBasis,
    small_bounds: SpectralBounds,
) -> None:
    psi0 = initial_state(small_basis, 0)
    dt = choose_dt(small_bounds, 0.01, policy="auto")

    forward = evolve(small_operator, psi0, None, 0.01, dt, bounds=small_bounds)
    back = evolve(
        small_operator,
        forward.final_state,
        None,
        0.01,
        dt,
        bounds=small_bounds,
        reverse=True,
    )

    assert np.linalg.norm(back.final_state - psi0) < 1e-6


def test_partitioned_matvec_gives_same_trace(
    random_hermitian: SparseOperator,
) -> None:
    psi0 = np.zeros(random_hermitian.dim, dtype=np.complex128)
    psi0[0] = 1.0

    serial = evolve(random_hermitian, psi0, None, 0.5, 0.005)
    with ThreadPoolExecutor(max_workers=2) as executor:
        parallel = evolve(random_hermitian, psi0, None, 0.5, 0.005, executor=executor)

    assert np.allclose(serial.final_state, parallel.final_state, atol=1e-12)


def test_step_above_stability_bound_is_rejected() -> None:
    bounds = SpectralBounds(e_min=-1.0, e_max=1.0)
    psi0 = np.array([1.0, 0.0], dtype=np.complex128)

    with pytest.raises(InputError, match="stability"):
        evolve(_two_level(1.0), psi0, None, 10.0, STABILITY_LIMIT + 0.1, bounds=bounds)


def test_norm_drift_aborts_with_suggestion() -> None:
    bounds = SpectralBounds(e_min=-1.0, e_max=1.0)
    psi0 = np.array([1.0, 0.0], dtype=np.complex128)

    with pytest.raises(NormDriftError, match="try dt <="):
        evolve(_two_level(1.0), psi0, None, 10.0, 2.0, sample_every=1, bounds=bounds)


@pytest.mark.parametrize(
    ("kwargs", "fragment"),
    [
        ({"t_total": 0.0}, "t_total"),
        ({"sample_every": 0}, "sample_every"),
        ({"dt": -1.0}, "dt must be positive"),
    ],
)
def test_invalid_arguments(kwargs: dict[str, float], fragment: str) -> None:
    arguments: dict[str, object] = {"t_total": 1.0, "dt": 0.01, "sample_every": 1}
    arguments.update(kwargs)
    psi0 = np.array([1.0, 0.0], dtype=np.complex128)

    with pytest.raises(InputError, match=fragment):
        evolve(_two_level(1.0), psi0, None, **arguments)  # type: ignore[arg-type]


def test_choose_dt_policies() -> None:
    bounds = SpectralBounds(e_min=-500.0, e_max=1000.0)

    spectral = choose_dt(bounds, 3.0, policy="spectral")
    auto = choose_dt(bounds, 3.0, policy="auto")

    assert spectral == pytest.approx(0.1 / 1000.0)
    # (rho dt)^5 * t * rho / 72 stays at half the norm tolerance
    x = auto * 1000.0
    assert auto <= spectral
    assert 3.0 * 1000.0 * x**5 / 72.0 == pytest.approx(0.5e-6, rel=1e-9)
    with pytest.raises(InputError):
        choose_dt(bounds, 3.0, policy="euler")
    with pytest.raises(InputError):
        choose_dt(bounds, 3.0, factor=3.0)


def _synthetic_trace(p0: np.ndarray, times: np.ndarray) -> PopulationTrace:
    side = 0.5 * (1.0 - p0)
    return PopulationTrace(
        times=times,
        populations=np.column_stack([side, p0, side]),
        norm_drift=np.zeros_like(times),
        energies=np.zeros_like(times),
        max_cluster=1,
    )


def test_detect_equilibrium_on_relaxing_trace() -> None:
    times = np.linspace(0.0, 1.0, 101)
    trace = _synthetic_trace(1.0 / 3.0 + 2.0 / 3.0 * np.exp(-times / 0.05), times)

    result = detect_equilibrium(trace, window=0.1, tol=0.005)

    assert result.equilibrated
    assert result.t_eq is not None
    assert 0.1 <= result.t_eq <= 0.5
    assert result.p_eq[0] == pytest.approx(1.0 / 3.0, abs=1e-3)
    assert result.window_means.shape == (10, 3)


def test_detect_equilibrium_on_oscillating_trace() -> None:
    times = np.linspace(0.0, 1.0, 101)
    trace = _synthetic_trace(0.5 + 0.3 * np.cos(2.0 * np.pi * times / 0.4), times)

    result = detect_equilibrium(trace, window=0.1, tol=0.005)

    assert not result.equilibrated
    assert result.t_eq is None
    assert result.p_eq.values.sum() == pytest.approx(1.0)


def test_detect_equilibrium_needs_two_windows() -> None:
    times = np.linspace(0.0, 0.15, 16)
    trace = _synthetic_trace(np.full(16, 0.5), times)

    with pytest.raises(InputError, match="two"):
        detect_equilibrium(trace, window=0.1, tol=0.005)


def test_trace_csv_columns(tmp_path: Path) -> None:
    times = np.linspace(0.0, 1.0, 5)
    trace = _synthetic_trace(np.full(5, 0.5), times)
    path = tmp_path / "trace.csv"

    trace.export_csv(path, provenance("evolve", 1))

    frame = read_csv(path)
    assert list(frame.columns) == [
        "t_us",
        "p_m1",
        "p_0",
        "p_p1",
        "norm_drift",
        "energy_rad_per_us",
    ]
    assert frame["p_0"].tolist() == [0.5] * 5


def test_rk4_global_error_is_fourth_order(
    small_operator: SparseOperator,
    small_bounds: SpectralBounds,
) -> None:
    """Test that halving the step divides the final error by about 16."""
    rng = np.random.default_rng(3)
    psi0 = rng.normal(size=small_operator.dim) + 1j * rng.normal(
        size=small_operator.dim
    )
    psi0 /= np.linalg.norm(psi0)
    dt = 0.4 / small_bounds.spectral_radius
    t_total = 32 * dt
    reference = exact_evolve(exact_diagonalize(small_operator), psi0, t_total)

    errors = []
    for refinement in (1, 2, 4):
        result = evolve(
            small_operator,
            psi0,
            None,
            t_total,
            dt / refinement,
            sample_every=1000,
            bounds=small_bounds,
            norm_tol=1.0,
        )
        errors.append(float(np.linalg.norm(result.final_state - reference)))

    exponents = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all((exponents > 3.5) & (exponents < 4.5))
