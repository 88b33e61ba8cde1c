"""Frozen-gas atom positions and pairwise coupling prefactors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.spatial.distance import pdist, squareform
from stark_utils import InputError, read_csv, write_csv

if TYPE_CHECKING:
    from pathlib import Path

# 1 cm^3 = 1e12 um^3
UM3_PER_CM3 = 1.0e12


def interatomic_spacing(density_cm3: float) -> float:
    """Typical interatomic spacing density**(-1/3), in um."""
    return float((density_cm3 / UM3_PER_CM3) ** (-1.0 / 3.0))


def sphere_radius(n_atoms: int, density_cm3: float) -> float:
    """Radius (um) of the sphere that holds n_atoms at the given density."""
    volume_um3 = n_atoms / (density_cm3 / UM3_PER_CM3)
    return float((3.0 * volume_um3 / (4.0 * math.pi)) ** (1.0 / 3.0))


@dataclass(frozen=True, eq=False)
class AtomGeometry:
    """Positions of N distinguishable, stationary atoms."""

    positions: npt.NDArray[np.float64] = field(repr=False)
    density_cm3: float
    radius_um: float
    exclusion_um: float = 0.0

    @property
    def n_atoms(self) -> int:
        return int(self.positions.shape[0])

    @property
    def pair_distances(self) -> npt.NDArray[np.float64]:
        """Symmetric N x N distance matrix (um), zero diagonal."""
        return np.asarray(squareform(pdist(self.positions)), dtype=np.float64)

    @property
    def pair_inv_r3(self) -> npt.NDArray[np.float64]:
        """Symmetric N x N matrix of 1/r**3 (um^-3), zero diagonal."""
        distances = self.pair_distances
        inv = np.zeros_like(distances)
        off_diagonal = ~np.eye(self.n_atoms, dtype=bool)
        inv[off_diagonal] = distances[off_diagonal] ** -3
        return inv

    def nearest_neighbor_distances(self) -> npt.NDArray[np.float64]:
        """Distance from each atom to its nearest neighbour (um)."""
        distances = self.pair_distances + np.diag(
            np.full(self.n_atoms, np.inf),
        )
        return np.asarray(distances.min(axis=1), dtype=np.float64)

    def scaled(self, factor: float) -> AtomGeometry:
        """Return the geometry with every position multiplied by factor."""
        return AtomGeometry(
            positions=self.positions * factor,
            density_cm3=self.density_cm3 / factor**3,
            radius_um=self.radius_um * factor,
            exclusion_um=self.exclusion_um * factor,
        )

    def export_csv(self, path: Path, record: dict[str, Any] | None = None) -> None:
        """Write positions as CSV with columns x, y, z (um)."""
        frame = pd.DataFrame(self.positions, columns=["x", "y", "z"])
        write_csv(frame, path, record)


def load_positions_csv(path: Path, density_cm3: float) -> AtomGeometry:
    """Read positions written by AtomGeometry.export_csv."""
    frame = read_csv(path)
    positions = frame[["x", "y", "z"]].to_numpy(dtype=np.float64)
    return AtomGeometry(
        positions=positions,
        density_cm3=density_cm3,
        radius_um=sphere_radius(len(positions), density_cm3),
    )


def realization_seed(seed: int, density_index: int, realization: int) -> int:
    """Derive an independent, reproducible seed for one disorder realization."""
    sequence = np.random.SeedSequence([seed, density_index, realization])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def sample_positions(
    n_atoms: int,
    density_cm3: float,
    exclusion_um: float = 0.0,
    seed: int = 0,
    max_attempts: int = 10_000,
) -> AtomGeometry:
    """Sample atom positions uniformly in a sphere of volume n_atoms/density.

    Whole configurations are redrawn until every pair is at least
    ``exclusion_um`` apart.

    Raises:
        InputError: On invalid arguments, or when no valid configuration was
            found within ``max_attempts`` draws (overdense configuration).

    """
    if n_atoms < 1:
        msg = f"n_atoms must be at least 1, got {n_atoms}"
        raise InputError(msg)
    if not (math.isfinite(density_cm3) and density_cm3 > 0):
        msg = f"Density must be positive, got {density_cm3}"
        raise InputError(msg)
    if exclusion_um < 0:
        msg = f"Exclusion radius must be non-negative, got {exclusion_um}"
        raise InputError(msg)

    radius = sphere_radius(n_atoms, density_cm3)
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        directions = rng.normal(size=(n_atoms, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = radius * rng.random(n_atoms) ** (1.0 / 3.0)
        positions = directions * radii[:, None]
        separations = pdist(positions)
        if separations.size == 0 or (
            separations.min() >= exclusion_um and separations.min() > 0
        ):
            return AtomGeometry(
                positions=positions,
                density_cm3=density_cm3,
                radius_um=radius,
                exclusion_um=exclusion_um,
            )

    msg = (
        f"No configuration of {n_atoms} atoms at {density_cm3:.3g} cm^-3 "
        f"respects the {exclusion_um} um exclusion radius after "
        f"{max_attempts} attempts"
    )
    raise InputError(msg)
