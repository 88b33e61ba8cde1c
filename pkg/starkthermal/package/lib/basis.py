"""Energy-truncated N-atom product basis and the cluster-population observable."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Any

import numpy as np
import numpy.typing as npt
from manifold import LevelId, StarkManifold
from stark_utils import InputError, get_fallback_logger

if TYPE_CHECKING:
    import logging

# Population sums are checked against 1 with this tolerance.
POPULATION_SUM_TOL = 1e-12


def cluster_column(cluster: int) -> str:
    """Column name for a cluster population, e.g. p_m6, p_0, p_p6."""
    if cluster < 0:
        return f"p_m{-cluster}"
    if cluster > 0:
        return f"p_p{cluster}"
    return "p_0"


@dataclass(frozen=True, eq=False)
class ClusterPopulations:
    """Fractional population of every cluster, ordered -max_cluster..max_cluster."""

    values: npt.NDArray[np.float64] = field(repr=False)
    max_cluster: int

    def __post_init__(self) -> None:
        if self.values.shape != (2 * self.max_cluster + 1,):
            msg = (
                f"Expected {2 * self.max_cluster + 1} cluster populations, "
                f"got shape {self.values.shape}"
            )
            raise InputError(msg)
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            msg = f"Cluster populations must be finite and >= 0: {self.values}"
            raise InputError(msg)
        total = float(self.values.sum())
        if abs(total - 1.0) > POPULATION_SUM_TOL:
            msg = f"Cluster populations sum to {total!r}, not 1"
            raise InputError(msg)

    @property
    def clusters(self) -> npt.NDArray[np.int64]:
        return np.arange(-self.max_cluster, self.max_cluster + 1)

    def __getitem__(self, cluster: int) -> float:
        if abs(cluster) > self.max_cluster:
            msg = f"Cluster {cluster} outside -{self.max_cluster}..{self.max_cluster}"
            raise KeyError(msg)
        return float(self.values[cluster + self.max_cluster])

    def as_dict(self) -> dict[str, float]:
        return {
            cluster_column(int(c)): float(v)
            for c, v in zip(self.clusters, self.values, strict=True)
        }

    @classmethod
    def from_weights(
        cls,
        weights: npt.NDArray[np.float64],
        max_cluster: int,
    ) -> ClusterPopulations:
        """Normalize non-negative cluster weights into populations."""
        total = float(weights.sum())
        if total <= 0 or not math.isfinite(total):
            msg = f"Cannot normalize cluster weights with total {total}"
            raise InputError(msg)
        return cls(values=weights / total, max_cluster=max_cluster)


@dataclass(frozen=True, eq=False)
class ProductBasis:
    """Product states inside the energy window, in lexicographic level order.

    ``levels[i]`` holds the dense level index of every atom of state i and
    ``keys[i]`` its mixed-radix encoding, which is strictly increasing with i
    so lookups are a binary search.
    """

    manifold: StarkManifold
    n_atoms: int
    levels: npt.NDArray[np.int64] = field(repr=False)
    keys: npt.NDArray[np.int64] = field(repr=False)
    e_diag: npt.NDArray[np.float64] = field(repr=False)
    e_ref: float
    delta_cut: float

    @property
    def dim(self) -> int:
        return int(self.keys.shape[0])

    @cached_property
    def radix(self) -> npt.NDArray[np.int64]:
        """Place values of each atom in the state key."""
        n_levels = self.manifold.n_levels
        return np.array(
            [n_levels ** (self.n_atoms - 1 - i) for i in range(self.n_atoms)],
            dtype=np.int64,
        )

    @cached_property
    def atom_clusters(self) -> npt.NDArray[np.int64]:
        """Cluster label of every atom in every state, shape (dim, n_atoms)."""
        return self.manifold.level_clusters[self.levels]

    @cached_property
    def cluster_fractions(self) -> npt.NDArray[np.float64]:
        """Fraction of the atoms of each state in each cluster, (dim, n_clusters)."""
        n_clusters = self.manifold.n_clusters
        counts = np.zeros((self.dim, n_clusters), dtype=np.int64)
        rows = np.arange(self.dim)
        columns = self.atom_clusters + self.manifold.max_cluster
        for atom in range(self.n_atoms):
            np.add.at(counts, (rows, columns[:, atom]), 1)
        return counts / self.n_atoms

    def encode(self, levels: npt.NDArray[np.int64]) -> npt.NDArray[np.int64]:
        """Encode level tuples (rows) as state keys."""
        return np.asarray(levels @ self.radix, dtype=np.int64)

    def lookup(self, keys: npt.NDArray[np.int64]) -> npt.NDArray[np.int64]:
        """Dense indices of the given keys, -1 where a key is not in the basis."""
        positions = np.searchsorted(self.keys, keys)
        clipped = np.minimum(positions, self.dim - 1)
        found = self.keys[clipped] == keys
        return np.where(found, clipped, -1)

    def index_of(self, state: Sequence[LevelId]) -> int:
        """Dense index of a product state.

        Raises:
            KeyError: If the state is outside the window.

        """
        if len(state) != self.n_atoms:
            msg = f"Expected {self.n_atoms} levels, got {len(state)}"
            raise KeyError(msg)
        levels = np.array([self.manifold.level_index(lv) for lv in state])
        index = int(self.lookup(self.encode(levels[None, :]))[0])
        if index < 0:
            msg = f"State {tuple(state)} is not in the basis"
            raise KeyError(msg)
        return index

    def state(self, index: int) -> tuple[LevelId, ...]:
        """The product state stored at a dense index."""
        return tuple(self.manifold.level_id(int(lv)) for lv in self.levels[index])


def default_reference_energy(manifold: StarkManifold, n_atoms: int) -> float:
    """Mean unperturbed energy of all atoms in cluster 0, averaged over sublevels."""
    cluster_zero = manifold.energies[manifold.cluster_levels(0)]
    return float(n_atoms * cluster_zero.mean())


def enumerate_basis(  # noqa: PLR0913
    manifold: StarkManifold,
    n_atoms: int,
    e_ref: float | None = None,
    delta_cut: float = math.inf,
    max_dim: int = 2_000_000,
    logger: logging.Logger | None = None,
) -> ProductBasis:
    """Enumerate all N-atom product states with |E - e_ref| <= delta_cut.

    Atoms are added one at a time in lexicographic order; partial tuples that
    can no longer reach the window are pruned. Membership itself is decided by
    a single comparison on the left-to-right sum of single-atom energies.

    Raises:
        InputError: On invalid arguments, or when the window holds more than
            ``max_dim`` states.

    """
    logger = logger or get_fallback_logger()
    if n_atoms < 1:
        msg = f"n_atoms must be at least 1, got {n_atoms}"
        raise InputError(msg)
    if not delta_cut > 0:
        msg = f"delta_cut must be positive, got {delta_cut}"
        raise InputError(msg)
    if e_ref is None:
        e_ref = default_reference_energy(manifold, n_atoms)
    if not math.isfinite(e_ref):
        msg = f"Reference energy must be finite, got {e_ref}"
        raise InputError(msg)

    energies = manifold.energies
    n_levels = manifold.n_levels
    e_min, e_max = float(energies.min()), float(energies.max())
    slack = 1e-9 * (abs(e_ref) + n_atoms * max(abs(e_min), abs(e_max)) + 1.0)
    lower, upper = e_ref - delta_cut, e_ref + delta_cut

    partial_levels = np.zeros((1, 0), dtype=np.int64)
    partial_energy = np.zeros(1, dtype=np.float64)
    for depth in range(n_atoms):
        if partial_energy.size * n_levels > 50 * max_dim:
            msg = (
                f"Basis enumeration exceeds the memory cap "
                f"({partial_energy.size * n_levels} candidates at atom {depth}, "
                f"max_dim={max_dim})"
            )
            raise InputError(msg)
        candidates = partial_energy[:, None] + energies[None, :]
        remaining = n_atoms - depth - 1
        if remaining:
            keep = (candidates + remaining * e_min <= upper + slack) & (
                candidates + remaining * e_max >= lower - slack
            )
        else:
            keep = np.abs(candidates - e_ref) <= delta_cut
        (flat,) = np.nonzero(keep.ravel())
        parents, new_levels = np.divmod(flat, n_levels)
        partial_levels = np.column_stack([partial_levels[parents], new_levels])
        partial_energy = candidates.ravel()[flat]

    dim = partial_energy.size
    if dim > max_dim:
        msg = f"Basis dimension {dim} exceeds the configured cap {max_dim}"
        raise InputError(msg)
    if dim == 0:
        msg = "No product state lies inside the energy window"
        raise InputError(msg)

    radix = np.array(
        [n_levels ** (n_atoms - 1 - i) for i in range(n_atoms)],
        dtype=np.int64,
    )
    basis = ProductBasis(
        manifold=manifold,
        n_atoms=n_atoms,
        levels=partial_levels,
        keys=partial_levels @ radix,
        e_diag=partial_energy,
        e_ref=e_ref,
        delta_cut=delta_cut,
    )
    logger.info(
        "Enumerated basis: %d atoms, %d states (window +/- %.6g rad/us)",
        n_atoms,
        dim,
        delta_cut,
    )
    return basis


def basis_summary(basis: ProductBasis) -> dict[str, Any]:
    """JSON-ready summary of a basis: dimension, window and per-cluster counts."""
    clusters = basis.manifold.clusters
    transfer = basis.atom_clusters.sum(axis=1)
    sectors, sector_counts = np.unique(transfer, return_counts=True)
    slots = basis.cluster_fractions.sum(axis=0) * basis.n_atoms
    return {
        "dim": basis.dim,
        "n_atoms": basis.n_atoms,
        "n_levels": basis.manifold.n_levels,
        "e_ref_rad_per_us": basis.e_ref,
        "delta_cut_rad_per_us": basis.delta_cut,
        "states_by_cluster_sum": {
            str(int(s)): int(n) for s, n in zip(sectors, sector_counts, strict=True)
        },
        "atom_slots_by_cluster": {
            str(int(c)): int(round(n)) for c, n in zip(clusters, slots, strict=True)
        },
    }


def measure_populations(
    basis: ProductBasis,
    psi: npt.NDArray[np.complex128],
) -> ClusterPopulations:
    """Fractional population of every cluster in state psi.

    Each basis state contributes its weight times the fraction of its atoms
    in a cluster. Weights are divided by the squared norm of psi so the
    result sums to one even when an integrator has drifted slightly.

    Raises:
        InputError: If psi does not match the basis dimension.

    """
    if psi.shape != (basis.dim,):
        msg = f"State has shape {psi.shape}, basis dimension is {basis.dim}"
        raise InputError(msg)
    weights = np.abs(psi) ** 2
    return ClusterPopulations.from_weights(
        weights @ basis.cluster_fractions,
        basis.manifold.max_cluster,
    )


def initial_state(
    basis: ProductBasis,
    cluster: int = 0,
    sublevels: Sequence[int] | None = None,
) -> npt.NDArray[np.complex128]:
    """Equal superposition of all product states with every atom in one cluster.

    Args:
        basis: The product basis.
        cluster: The initially excited cluster.
        sublevels: Optional subset of sublevels that are excited; all
            sublevels of the cluster when omitted.

    Raises:
        InputError: If some of the support states fall outside the window.

    """
    manifold = basis.manifold
    levels = manifold.cluster_levels(cluster)
    if sublevels is not None and len(sublevels) > 0:
        if any(not 0 <= s < manifold.n_sublevels for s in sublevels):
            msg = f"Sublevels {list(sublevels)} outside 0..{manifold.n_sublevels - 1}"
            raise InputError(msg)
        levels = levels[sorted(set(sublevels))]
    support = np.all(np.isin(basis.levels, levels), axis=1)
    count = int(support.sum())
    expected = len(levels) ** basis.n_atoms
    if count != expected:
        msg = (
            f"Only {count} of the {expected} initial product states in cluster "
            f"{cluster} are inside the energy window"
        )
        raise InputError(msg)
    psi = np.zeros(basis.dim, dtype=np.complex128)
    psi[support] = 1.0 / math.sqrt(count)
    return psi
