"""Tests for the geometry module."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from geometry import (
    AtomGeometry,
    interatomic_spacing,
    load_positions_csv,
    realization_seed,
    sample_positions,
    sphere_radius,
)
from stark_utils import InputError


def test_interatomic_spacing_scale() -> None:
    """Test that density 1e9 cm^-3 gives a 10 um spacing."""
    assert interatomic_spacing(1.0e9) == pytest.approx(10.0)
    assert interatomic_spacing(8.0e9) == pytest.approx(5.0)


def test_sphere_volume_matches_density() -> None:
    radius = sphere_radius(4, 1.0e9)

    volume_um3 = 4.0 / 3.0 * math.pi * radius**3
    assert volume_um3 == pytest.approx(4 * 1000.0)


def test_positions_lie_in_sphere() -> None:
    geometry = sample_positions(6, 2.2e9, seed=1)

    assert geometry.positions.shape == (6, 3)
    assert np.all(np.linalg.norm(geometry.positions, axis=1) <= geometry.radius_um)


def test_sampling_is_seeded() -> None:
    first = sample_positions(4, 1.0e10, seed=8)
    again = sample_positions(4, 1.0e10, seed=8)
    other = sample_positions(4, 1.0e10, seed=9)

    assert np.array_equal(first.positions, again.positions)
    assert not np.array_equal(first.positions, other.positions)


def test_realization_seeds_are_distinct() -> None:
    seeds = {realization_seed(1, d, r) for d in range(10) for r in range(10)}

    assert len(seeds) == 100
    assert realization_seed(1, 2, 3) == realization_seed(1, 2, 3)


def test_exclusion_radius_is_honoured() -> None:
    spacing = interatomic_spacing(1.0e9)
    geometry = sample_positions(4, 1.0e9, exclusion_um=0.3 * spacing, seed=2)

    assert geometry.nearest_neighbor_distances().min() >= 0.3 * spacing


def test_overdense_configuration_fails() -> None:
    radius = sphere_radius(5, 1.0e9)

    with pytest.raises(InputError, match="attempts|overdense|configuration"):
        sample_positions(5, 1.0e9, exclusion_um=3.0 * radius, seed=0, max_attempts=20)


@pytest.mark.parametrize(
    ("n_atoms", "density"),
    [(0, 1.0e9), (3, 0.0), (3, -1.0e9), (3, math.nan)],
)
def test_invalid_arguments(n_atoms: int, density: float) -> None:
    with pytest.raises(InputError):
        sample_positions(n_atoms, density)


def test_pair_distances_of_known_geometry() -> None:
    """Test 1/r^3 prefactors and nearest neighbours on a fixed triangle."""
    positions = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 4.0, 0.0]])
    geometry = AtomGeometry(positions=positions, density_cm3=1.0e9, radius_um=5.0)

    distances = geometry.pair_distances
    assert distances[1, 2] == pytest.approx(5.0)
    assert geometry.pair_inv_r3[0, 1] == pytest.approx(1.0 / 27.0)
    assert geometry.pair_inv_r3[0, 0] == 0.0
    assert list(geometry.nearest_neighbor_distances()) == pytest.approx([3.0, 3.0, 4.0])


def test_scaling_preserves_shape() -> None:
    geometry = sample_positions(4, 1.0e9, seed=3)

    scaled = geometry.scaled(0.5)

    assert scaled.density_cm3 == pytest.approx(8.0e9)
    assert np.allclose(scaled.pair_inv_r3, 8.0 * geometry.pair_inv_r3)


def test_mean_nearest_neighbor_tracks_spacing() -> None:
    """Test that the mean nearest-neighbour distance scales with n^(-1/3)."""
    mean_nn = []
    for density in (1.0e9, 8.0e9):
        distances = [
            sample_positions(20, density, seed=s).nearest_neighbor_distances().mean()
            for s in range(30)
        ]
        mean_nn.append(float(np.mean(distances)))

    assert mean_nn[0] / mean_nn[1] == pytest.approx(2.0, rel=0.1)
    assert 0.3 * interatomic_spacing(1.0e9) < mean_nn[0] < interatomic_spacing(1.0e9)


def test_positions_csv(tmp_path: Path) -> None:
    geometry = sample_positions(3, 1.0e9, seed=4)
    path = tmp_path / "positions.csv"

    geometry.export_csv(path)
    loaded = load_positions_csv(path, 1.0e9)

    assert np.array_equal(loaded.positions, geometry.positions)
    assert loaded.radius_um == pytest.approx(geometry.radius_um)
