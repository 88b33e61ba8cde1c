"""Tests for the hamiltonian module."""

from __future__ import annotations

import itertools

import numpy as np
import pytest
from basis import ProductBasis
from geometry import AtomGeometry
from hamiltonian import (
    SpectralBounds,
    assemble,
    assemble_with_report,
    spectral_bounds,
)
from manifold import DipoleTable, StarkManifold
from sparse_operator import SparseOperator
from stark_utils import InputError


def _pair_coupling(
    first: tuple[int, ...],
    second: tuple[int, ...],
    dipoles: DipoleTable,
    inv_r3: np.ndarray,
) -> float:
    """d * d' / r^3 when the states differ in exactly two atoms, else 0."""
    moved = [k for k, (a, b) in enumerate(zip(first, second, strict=True)) if a != b]
    if len(moved) != 2:
        return 0.0
    i, j = moved
    return float(
        dipoles.matrix[first[i], second[i]]
        * dipoles.matrix[first[j], second[j]]
        * inv_r3[i, j],
    )


def _brute_force_hamiltonian(
    basis: ProductBasis,
    dipoles: DipoleTable,
    geometry: AtomGeometry,
    paths: str | None,
    floor: float,
) -> np.ndarray:
    """Dense H built state by state from the coupling definitions."""
    states = [tuple(int(v) for v in row) for row in basis.levels]
    energies = basis.manifold.energies
    inv_r3 = geometry.pair_inv_r3
    dense = np.diag(basis.e_diag - basis.e_ref).astype(np.float64)
    for s, t in itertools.product(range(basis.dim), repeat=2):
        if s != t:
            dense[s, t] += _pair_coupling(states[s], states[t], dipoles, inv_r3)
    if paths is None:
        return dense

    in_basis = set(states)
    n_levels = basis.manifold.n_levels
    intermediates = [
        m
        for m in itertools.product(range(n_levels), repeat=basis.n_atoms)
        if paths == "all"
        or (paths == "outside" and m not in in_basis)
        or (paths == "inside" and m in in_basis)
    ]
    e_m = np.array([energies[list(m)].sum() for m in intermediates])
    coupling = np.array(
        [
            [_pair_coupling(state, m, dipoles, inv_r3) for m in intermediates]
            for state in states
        ],
    )
    gaps = basis.e_diag[:, None] - e_m[None, :]
    usable = np.abs(gaps) >= floor
    weighted = np.where(usable, coupling / np.where(usable, gaps, 1.0), 0.0)
    second_order = 0.5 * (weighted @ coupling.T + coupling @ weighted.T)
    differing = (basis.levels[:, None, :] != basis.levels[None, :, :]).sum(axis=2)
    return dense + np.where(differing == 3, second_order, 0.0)


def test_two_body_matches_brute_force(
    small_manifold: StarkManifold,
    small_dipoles: DipoleTable,
    small_geometry: AtomGeometry,
    small_basis: ProductBasis,
) -> None:
    operator = assemble(
        small_manifold,
        small_dipoles,
        small_geometry,
        small_basis,
        three_body=False,
    )

    expected = _brute_force_hamiltonian(
        small_basis,
        small_dipoles,
        small_geometry,
        None,
        0.0,
    )
    assert np.allclose(operator.to_dense(), expected, rtol=1e-12, atol=1e-9)


@pytest.mark.parametrize("paths", ["outside", "all"])
def test_three_body_matches_brute_force(
    small_manifold: StarkManifold,
    small_dipoles: DipoleTable,
    small_geometry: AtomGeometry,
    small_basis: ProductBasis,
    paths: str,
) -> None:
    """Test the second-order terms against an explicit sum over intermediates."""
    floor = 2.0 * np.pi
    operator, report = assemble_with_report(
        small_manifold,
        small_dipoles,
        small_geometry,
        small_basis,
        three_body=True,
        three_body_paths=paths,
        denominator_floor=floor,
    )

    expected = _brute_force_hamiltonian(
        small_basis,
        small_dipoles,
        small_geometry,
        paths,
        floor,
    )
    assert report.three_body_entries > 0
    assert np.allclose(operator.to_dense(), expected, rtol=1e-9, atol=1e-9)


def test_operator_is_hermitian_and_real(small_operator: SparseOperator) -> None:
    dense = small_operator.to_dense()

    assert small_operator.is_real
    assert np.allclose(dense, dense.conj().T, rtol=1e-12, atol=1e-12)


def test_diagonal_is_energy_offset(
    small_operator: SparseOperator,
    small_basis: ProductBasis,
) -> None:
    expected = small_basis.e_diag - small_basis.e_ref
    assert np.allclose(small_operator.diagonal(), expected)


def test_couplings_scale_as_inverse_cube(
    small_manifold: StarkManifold,
    small_dipoles: DipoleTable,
    small_geometry: AtomGeometry,
    small_basis: ProductBasis,
) -> None:
    """Test that doubling every distance divides the exchange terms by 8."""
    near = assemble(
        small_manifold,
        small_dipoles,
        small_geometry,
        small_basis,
        three_body=False,
    ).to_dense()
    far = assemble(
        small_manifold,
        small_dipoles,
        small_geometry.scaled(2.0),
        small_basis,
        three_body=False,
    ).to_dense()

    off_diagonal = ~np.eye(small_basis.dim, dtype=bool)
    assert np.allclose(far[off_diagonal], near[off_diagonal] / 8.0)
    assert np.allclose(np.diag(far), np.diag(near))


def test_assembly_rejects_mismatched_geometry(
    small_manifold: StarkManifold,
    small_dipoles: DipoleTable,
    small_basis: ProductBasis,
) -> None:
    positions = np.zeros((2, 3))
    positions[1, 0] = 1.0
    geometry = AtomGeometry(positions=positions, density_cm3=1.0e9, radius_um=1.0)

    with pytest.raises(InputError, match="atoms"):
        assemble(small_manifold, small_dipoles, geometry, small_basis)


def test_assembly_rejects_coincident_atoms(
    small_manifold: StarkManifold,
    small_dipoles: DipoleTable,
    small_basis: ProductBasis,
) -> None:
    geometry = AtomGeometry(
        positions=np.zeros((3, 3)),
        density_cm3=1.0e9,
        radius_um=1.0,
    )

    with pytest.raises(InputError, match="positive"):
        assemble(small_manifold, small_dipoles, geometry, small_basis)


def test_assembly_rejects_unknown_paths(
    small_manifold: StarkManifold,
    small_dipoles: DipoleTable,
    small_geometry: AtomGeometry,
    small_basis: ProductBasis,
) -> None:
    with pytest.raises(InputError, match="three_body_paths"):
        assemble(
            small_manifold,
            small_dipoles,
            small_geometry,
            small_basis,
            three_body_paths="sideways",
        )


def test_spectral_bounds_enclose_spectrum(
    small_operator: SparseOperator,
    small_bounds: SpectralBounds,
) -> None:
    eigenvalues = np.linalg.eigvalsh(small_operator.to_dense())
    width = eigenvalues[-1] - eigenvalues[0]

    assert small_bounds.e_min <= eigenvalues[0]
    assert small_bounds.e_max >= eigenvalues[-1]
    assert eigenvalues[0] - small_bounds.e_min < 0.05 * width
    assert small_bounds.e_max - eigenvalues[-1] < 0.05 * width
    assert small_bounds.spectral_radius >= np.abs(eigenvalues).max()


def test_spectral_bounds_of_random_operator(random_hermitian: SparseOperator) -> None:
    bounds = spectral_bounds(random_hermitian, seed=3)
    eigenvalues = np.linalg.eigvalsh(random_hermitian.to_dense())

    assert bounds.contains(float(eigenvalues[0]))
    assert bounds.contains(float(eigenvalues[-1]))
    assert bounds.half_width == pytest.approx(
        0.5 * (eigenvalues[-1] - eigenvalues[0]),
        rel=0.05,
    )


def test_spectral_bounds_keep_margin_after_loose_iteration() -> None:
    """Test that an early power-iteration stop still leaves a 1 % margin."""
    eigenvalues = np.linspace(-1.0, 1.0, 50)
    index = np.arange(50)
    operator = SparseOperator.from_triplets(index, index, eigenvalues, 50)

    bounds = spectral_bounds(operator, tol=1e-5, seed=2)

    assert bounds.e_max >= 1.0 + 0.015
    assert bounds.e_min <= -1.0 - 0.015
    assert bounds.half_width < 1.1
