"""Stark-ladder level structure and transition dipole table.

Energies are angular frequencies in rad/us with hbar = 1 and time in us, so a
frequency of f MHz enters as 2*pi*f rad/us.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt
from stark_utils import InputError

TWO_PI = 2.0 * math.pi


def mhz_to_rad_per_us(value_mhz: float) -> float:
    """Convert a frequency in MHz to an angular frequency in rad/us."""
    return TWO_PI * value_mhz


@dataclass(frozen=True, order=True)
class LevelId:
    """One single-atom level: a cluster of the ladder and a sublevel in it."""

    cluster: int
    sublevel: int


@dataclass(frozen=True)
class ManifoldParams:
    """Manifold parameters as they appear in the configuration (MHz)."""

    cluster_spacing_mhz: float = 530.0
    anharmonicity_mhz: float = 1.0
    intra_offsets_mhz: tuple[float, ...] = (-20.0, -7.0, 6.0, 20.0)
    max_cluster: int = 6
    n_sublevels: int = 4
    max_offset_ratio: float = 0.5


@dataclass(frozen=True, eq=False)
class StarkManifold:
    """The single-atom energy ladder.

    Levels are indexed densely as ``(cluster + max_cluster) * n_sublevels +
    sublevel``, so ascending level index is ascending (cluster, sublevel).
    """

    cluster_spacing: float
    anharmonicity: float
    intra_offsets: tuple[float, ...]
    max_cluster: int
    energies: npt.NDArray[np.float64] = field(repr=False)

    @property
    def n_sublevels(self) -> int:
        return len(self.intra_offsets)

    @property
    def n_clusters(self) -> int:
        return 2 * self.max_cluster + 1

    @property
    def n_levels(self) -> int:
        return self.n_clusters * self.n_sublevels

    @property
    def clusters(self) -> npt.NDArray[np.int64]:
        """Cluster labels in ascending order (-max_cluster..max_cluster)."""
        return np.arange(-self.max_cluster, self.max_cluster + 1)

    @property
    def level_clusters(self) -> npt.NDArray[np.int64]:
        """Cluster label of every level index."""
        return np.repeat(self.clusters, self.n_sublevels)

    def level_index(self, level: LevelId) -> int:
        """Return the dense index of a level.

        Raises:
            KeyError: If the level does not exist in this manifold.

        """
        if abs(level.cluster) > self.max_cluster or not (
            0 <= level.sublevel < self.n_sublevels
        ):
            msg = f"Level {level} is not part of this manifold"
            raise KeyError(msg)
        return (level.cluster + self.max_cluster) * self.n_sublevels + level.sublevel

    def level_id(self, index: int) -> LevelId:
        """Return the LevelId for a dense level index."""
        if not 0 <= index < self.n_levels:
            msg = f"Level index {index} out of range [0, {self.n_levels})"
            raise KeyError(msg)
        cluster, sublevel = divmod(index, self.n_sublevels)
        return LevelId(cluster - self.max_cluster, sublevel)

    def level_energy(self, cluster: int, sublevel: int) -> float:
        """Energy of a level in rad/us, straight from the ladder formula."""
        return _ladder_energy(
            cluster,
            sublevel,
            self.cluster_spacing,
            self.anharmonicity,
            self.intra_offsets,
        )

    def cluster_levels(self, cluster: int) -> npt.NDArray[np.int64]:
        """Dense indices of all sublevels of one cluster."""
        start = self.level_index(LevelId(cluster, 0))
        return np.arange(start, start + self.n_sublevels)


def _ladder_energy(
    cluster: int,
    sublevel: int,
    spacing: float,
    anharmonicity: float,
    offsets: tuple[float, ...],
) -> float:
    return cluster * spacing + anharmonicity * cluster**2 + offsets[sublevel]


def build_manifold(params: ManifoldParams) -> StarkManifold:
    """Build the Stark ladder from configuration parameters.

    Args:
        params: Ladder parameters in MHz.

    Returns:
        A manifold whose level energies follow
        ``c * spacing + anharmonicity * c**2 + offsets[s]`` exactly.

    Raises:
        InputError: If a parameter is non-finite or the resulting ladder
            violates the near-harmonic ordering constraints.

    """
    values = (
        params.cluster_spacing_mhz,
        params.anharmonicity_mhz,
        params.max_offset_ratio,
        *params.intra_offsets_mhz,
    )
    if not all(math.isfinite(v) for v in values):
        msg = f"Manifold parameters must be finite, got {params}"
        raise InputError(msg)
    if params.cluster_spacing_mhz <= 0:
        msg = f"Cluster spacing must be positive, got {params.cluster_spacing_mhz}"
        raise InputError(msg)
    if params.max_cluster < 1:
        msg = f"max_cluster must be at least 1, got {params.max_cluster}"
        raise InputError(msg)
    if len(params.intra_offsets_mhz) != params.n_sublevels:
        msg = (
            f"Expected {params.n_sublevels} intra-cluster offsets, "
            f"got {len(params.intra_offsets_mhz)}"
        )
        raise InputError(msg)
    if abs(params.anharmonicity_mhz) * params.max_cluster**2 >= (
        params.cluster_spacing_mhz
    ):
        msg = (
            f"Anharmonic shift {params.anharmonicity_mhz} MHz x "
            f"{params.max_cluster}^2 reaches one cluster spacing"
        )
        raise InputError(msg)
    offsets_mhz = params.intra_offsets_mhz
    if any(b < a for a, b in zip(offsets_mhz, offsets_mhz[1:], strict=False)):
        msg = f"Intra-cluster offsets must be non-decreasing, got {offsets_mhz}"
        raise InputError(msg)
    if not 0 < params.max_offset_ratio < 1:
        msg = f"max_offset_ratio must lie in (0, 1), got {params.max_offset_ratio}"
        raise InputError(msg)
    span = offsets_mhz[-1] - offsets_mhz[0]
    if span >= params.max_offset_ratio * params.cluster_spacing_mhz:
        msg = (
            f"Intra-cluster span {span} MHz is not small against the "
            f"{params.cluster_spacing_mhz} MHz spacing "
            f"(ratio limit {params.max_offset_ratio})"
        )
        raise InputError(msg)

    spacing = mhz_to_rad_per_us(params.cluster_spacing_mhz)
    anharmonicity = mhz_to_rad_per_us(params.anharmonicity_mhz)
    offsets = tuple(mhz_to_rad_per_us(v) for v in offsets_mhz)
    energies = np.array(
        [
            _ladder_energy(c, s, spacing, anharmonicity, offsets)
            for c in range(-params.max_cluster, params.max_cluster + 1)
            for s in range(params.n_sublevels)
        ],
        dtype=np.float64,
    )

    per_cluster = energies.reshape(2 * params.max_cluster + 1, params.n_sublevels)
    if np.any(per_cluster[1:, 0] <= per_cluster[:-1, -1]):
        msg = "Neighbouring clusters overlap in energy"
        raise InputError(msg)

    return StarkManifold(
        cluster_spacing=spacing,
        anharmonicity=anharmonicity,
        intra_offsets=offsets,
        max_cluster=params.max_cluster,
        energies=energies,
    )


@dataclass(frozen=True)
class DipoleParams:
    """Dipole-table parameters as they appear in the configuration.

    ``inter_c3_mhz_um3`` is the exchange coefficient of a pair of
    inter-cluster transitions; the dipole strength itself is
    ``sqrt(2*pi*inter_c3_mhz_um3)`` so that ``d * d' / r**3`` is in rad/us
    for r in um.
    """

    inter_c3_mhz_um3: float = 200.0
    intra_inter_ratio: float = 10.0
    spread: float = 0.0
    matrix_path: str = ""


@dataclass(frozen=True, eq=False)
class DipoleTable:
    """Symmetric transition-dipole table over the dense level index."""

    matrix: npt.NDArray[np.float64] = field(repr=False)
    level_clusters: npt.NDArray[np.int64] = field(repr=False)

    @property
    def n_levels(self) -> int:
        return int(self.matrix.shape[0])

    def transitions(
        self,
    ) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.float64]]:
        """Padded per-level transition lists.

        Returns:
            ``(targets, strengths)`` of shape ``(n_levels, max_degree)``; rows
            are padded with target -1 and strength 0.

        """
        nonzero = self.matrix != 0
        degree = int(nonzero.sum(axis=1).max(initial=0))
        targets = np.full((self.n_levels, degree), -1, dtype=np.int64)
        strengths = np.zeros((self.n_levels, degree), dtype=np.float64)
        for level in range(self.n_levels):
            (cols,) = np.nonzero(nonzero[level])
            targets[level, : len(cols)] = cols
            strengths[level, : len(cols)] = self.matrix[level, cols]
        return targets, strengths

    def median_ratio(self) -> float:
        """Median intra-cluster magnitude over median inter-cluster magnitude."""
        delta = np.abs(self.level_clusters[:, None] - self.level_clusters[None, :])
        upper = np.triu(np.ones_like(self.matrix, dtype=bool), k=1)
        magnitudes = np.abs(self.matrix)
        intra = magnitudes[upper & (delta == 0) & (magnitudes > 0)]
        inter = magnitudes[upper & (delta == 1) & (magnitudes > 0)]
        if intra.size == 0 or inter.size == 0:
            return math.nan
        return float(np.median(intra) / np.median(inter))


def validate_dipole_matrix(
    matrix: npt.NDArray[np.float64],
    manifold: StarkManifold,
) -> npt.NDArray[np.float64]:
    """Check a dipole matrix against the ladder selection rules.

    Returns:
        The matrix, exactly symmetrized.

    Raises:
        InputError: On shape mismatch, non-finite or asymmetric entries, a
            nonzero diagonal, or couplings between non-adjacent clusters.

    """
    n_levels = manifold.n_levels
    if matrix.shape != (n_levels, n_levels):
        msg = f"Dipole matrix must be {n_levels}x{n_levels}, got {matrix.shape}"
        raise InputError(msg)
    if not np.all(np.isfinite(matrix)):
        msg = "Dipole matrix contains non-finite entries"
        raise InputError(msg)
    if not np.allclose(matrix, matrix.T, rtol=1e-12, atol=0.0):
        msg = "Dipole matrix is not symmetric"
        raise InputError(msg)
    if np.any(np.diag(matrix) != 0):
        msg = "Dipole matrix has nonzero diagonal entries"
        raise InputError(msg)
    clusters = manifold.level_clusters
    delta = np.abs(clusters[:, None] - clusters[None, :])
    forbidden = (delta > 1) & (matrix != 0)
    if np.any(forbidden):
        rows, cols = np.nonzero(forbidden)
        first = (manifold.level_id(int(rows[0])), manifold.level_id(int(cols[0])))
        msg = (
            f"Dipole matrix couples non-adjacent clusters "
            f"({int(forbidden.sum()) // 2} pairs, first {first[0]} <-> {first[1]})"
        )
        raise InputError(msg)
    return 0.5 * (matrix + matrix.T)


def load_dipole_matrix(path: Path, manifold: StarkManifold) -> DipoleTable:
    """Load a dipole table from a CSV matrix over the dense level index."""
    if not path.exists():
        msg = f"Dipole matrix not found: {path}"
        raise FileNotFoundError(msg)
    matrix = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return DipoleTable(
        matrix=validate_dipole_matrix(matrix, manifold),
        level_clusters=manifold.level_clusters,
    )


def build_dipole_table(
    params: DipoleParams,
    manifold: StarkManifold,
    seed: int,
) -> DipoleTable:
    """Build the transition-dipole table.

    Inter-cluster (|dcluster| = 1) transitions get the base strength,
    intra-cluster ones the base strength times ``intra_inter_ratio``; each
    magnitude is then multiplied by ``1 + spread * u`` with u uniform in
    [-1, 1), drawn deterministically from ``seed``.

    Raises:
        InputError: If a strength is not positive or the spread is outside
            [0, 1).

    """
    if params.matrix_path:
        return load_dipole_matrix(Path(params.matrix_path), manifold)
    if params.inter_c3_mhz_um3 <= 0 or params.intra_inter_ratio <= 0:
        msg = (
            "Dipole strengths must be positive, got "
            f"inter_c3={params.inter_c3_mhz_um3}, ratio={params.intra_inter_ratio}"
        )
        raise InputError(msg)
    if not 0 <= params.spread < 1:
        msg = f"Dipole spread must lie in [0, 1), got {params.spread}"
        raise InputError(msg)

    base = math.sqrt(mhz_to_rad_per_us(params.inter_c3_mhz_um3))
    clusters = manifold.level_clusters
    delta = np.abs(clusters[:, None] - clusters[None, :])
    strengths = np.where(delta == 0, base * params.intra_inter_ratio, base)

    rng = np.random.default_rng(seed)
    jitter = 1.0 + params.spread * rng.uniform(-1.0, 1.0, size=strengths.shape)
    upper = np.triu((delta <= 1).astype(np.float64), k=1)
    matrix = upper * strengths * jitter
    matrix = matrix + matrix.T

    return DipoleTable(matrix=matrix, level_clusters=clusters)
