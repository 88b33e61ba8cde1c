"""Dipole-dipole Hamiltonian assembly and spectral bounds."""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass
from itertools import combinations
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp
from sparse_operator import SparseOperator
from stark_utils import InputError, NumericalFailureError, get_fallback_logger

if TYPE_CHECKING:
    import logging

    from basis import ProductBasis
    from geometry import AtomGeometry
    from manifold import DipoleTable, StarkManifold

THREE_BODY_PATHS = ("outside", "inside", "all")

# Safety margin added on each side of power-iteration bounds, as a fraction
# of the estimated spectral width.
BOUNDS_MARGIN = 0.01


class SpectralBoundsError(NumericalFailureError):
    """Power iteration did not converge."""


@dataclass(frozen=True)
class AssemblyReport:
    """Bookkeeping of one Hamiltonian assembly."""

    two_body_entries: int
    three_body_entries: int
    skipped_denominators: int
    dropped_products: int


@dataclass(frozen=True)
class _PairMoves:
    """One batch of two-body moves out of basis rows."""

    rows: npt.NDArray[np.int64]
    keys: npt.NDArray[np.int64]
    values: npt.NDArray[np.float64]
    energy_change: npt.NDArray[np.float64]


def _pair_moves(
    basis: ProductBasis,
    dipoles: DipoleTable,
    inv_r3: npt.NDArray[np.float64],
) -> Iterator[_PairMoves]:
    """Yield every exchange move: atoms i < j change level a->a', b->b'.

    Each move carries the coupling d[a,a'] * d[b,b'] / r_ij**3 and the key
    of the resulting product state, which need not lie in the window.
    """
    targets, strengths = dipoles.transitions()
    energies = basis.manifold.energies
    radix = basis.radix
    for i, j in combinations(range(basis.n_atoms), 2):
        a, b = basis.levels[:, i], basis.levels[:, j]
        for k1 in range(targets.shape[1]):
            a_new, d_a = targets[a, k1], strengths[a, k1]
            for k2 in range(targets.shape[1]):
                b_new, d_b = targets[b, k2], strengths[b, k2]
                (rows,) = np.nonzero((a_new >= 0) & (b_new >= 0))
                if rows.size == 0:
                    continue
                a0, a1, b0, b1 = a[rows], a_new[rows], b[rows], b_new[rows]
                shift = (a1 - a0) * radix[i] + (b1 - b0) * radix[j]
                yield _PairMoves(
                    rows=rows,
                    keys=basis.keys[rows] + shift,
                    values=d_a[rows] * d_b[rows] * inv_r3[i, j],
                    energy_change=(energies[a1] - energies[a0])
                    + (energies[b1] - energies[b0]),
                )


def _validate_inputs(
    manifold: StarkManifold,
    dipoles: DipoleTable,
    geometry: AtomGeometry,
    basis: ProductBasis,
) -> None:
    if dipoles.n_levels != manifold.n_levels:
        msg = (
            f"Dipole table has {dipoles.n_levels} levels, manifold "
            f"{manifold.n_levels}"
        )
        raise InputError(msg)
    if basis.manifold is not manifold:
        msg = "Basis was enumerated on a different manifold"
        raise InputError(msg)
    if geometry.n_atoms != basis.n_atoms:
        msg = f"Geometry holds {geometry.n_atoms} atoms, basis {basis.n_atoms}"
        raise InputError(msg)
    distances = geometry.pair_distances[~np.eye(geometry.n_atoms, dtype=bool)]
    if np.any(distances <= 0):
        msg = "Pair distances must be positive"
        raise InputError(msg)


def assemble_with_report(  # noqa: PLR0913
    manifold: StarkManifold,
    dipoles: DipoleTable,
    geometry: AtomGeometry,
    basis: ProductBasis,
    *,
    three_body: bool = True,
    three_body_paths: str = "outside",
    denominator_floor: float = 2.0 * math.pi,
    drop_tol: float = 1e-12,
    logger: logging.Logger | None = None,
) -> tuple[SparseOperator, AssemblyReport]:
    """Assemble H and report what the assembly did.

    The diagonal is the unperturbed energy minus the reference energy. Every
    pair of states that differ in exactly two atoms, each moving along a
    dipole-allowed transition, is coupled by d * d' / r**3.

    With ``three_body`` set, states differing in three atoms are also coupled
    through second-order paths 1 -> m -> 2 of two exchange moves sharing one
    atom, with amplitude V1m * Vm2 * (1/(E1 - Em) + 1/(E2 - Em)) / 2 summed over
    intermediates m. ``three_body_paths`` selects the intermediates: those
    outside the window (the default, since paths through in-window states are
    already generated by the two-body terms), inside it, or all. Denominators
    below ``denominator_floor`` are skipped and counted.

    Raises:
        InputError: If the inputs are inconsistent.
        HamiltonianAssemblyError: If the result is not Hermitian.

    """
    logger = logger or get_fallback_logger()
    _validate_inputs(manifold, dipoles, geometry, basis)
    if three_body_paths not in THREE_BODY_PATHS:
        msg = f"three_body_paths must be one of {THREE_BODY_PATHS}"
        raise InputError(msg)

    dim = basis.dim
    inv_r3 = geometry.pair_inv_r3
    rows_parts = [np.arange(dim)]
    cols_parts = [np.arange(dim)]
    value_parts = [basis.e_diag - basis.e_ref]

    inter_rows: list[npt.NDArray[np.int64]] = []
    inter_keys: list[npt.NDArray[np.int64]] = []
    inter_values: list[npt.NDArray[np.float64]] = []
    inter_gaps: list[npt.NDArray[np.float64]] = []
    two_body_entries = 0
    for moves in _pair_moves(basis, dipoles, inv_r3):
        cols = basis.lookup(moves.keys)
        inside = cols >= 0
        rows_parts.append(moves.rows[inside])
        cols_parts.append(cols[inside])
        value_parts.append(moves.values[inside])
        two_body_entries += int(inside.sum())
        if three_body:
            if three_body_paths == "outside":
                chosen = ~inside
            elif three_body_paths == "inside":
                chosen = inside
            else:
                chosen = np.ones_like(inside)
            inter_rows.append(moves.rows[chosen])
            inter_keys.append(moves.keys[chosen])
            inter_values.append(moves.values[chosen])
            # E1 - Em for the first leg of a path
            inter_gaps.append(-moves.energy_change[chosen])

    three_body_entries = skipped = dropped = 0
    if three_body and inter_rows:
        rows3, cols3, values3, skipped, dropped = _three_body_triplets(
            basis,
            np.concatenate(inter_rows),
            np.concatenate(inter_keys),
            np.concatenate(inter_values),
            np.concatenate(inter_gaps),
            denominator_floor,
        )
        rows_parts.append(rows3)
        cols_parts.append(cols3)
        value_parts.append(values3)
        three_body_entries = int(rows3.size)
        if skipped:
            logger.warning(
                "Skipped %d three-body denominators below %.4g rad/us",
                skipped,
                denominator_floor,
            )

    operator = SparseOperator.from_triplets(
        np.concatenate(rows_parts),
        np.concatenate(cols_parts),
        np.concatenate(value_parts),
        dim,
        drop_tol=drop_tol,
    )
    report = AssemblyReport(
        two_body_entries=two_body_entries,
        three_body_entries=three_body_entries,
        skipped_denominators=skipped,
        dropped_products=dropped,
    )
    logger.info(
        "Assembled H: dim=%d nnz=%d two-body=%d three-body=%d",
        dim,
        operator.nnz,
        two_body_entries,
        three_body_entries,
    )
    return operator, report


def _three_body_triplets(  # noqa: PLR0913
    basis: ProductBasis,
    rows: npt.NDArray[np.int64],
    keys: npt.NDArray[np.int64],
    values: npt.NDArray[np.float64],
    gaps: npt.NDArray[np.float64],
    denominator_floor: float,
) -> tuple[
    npt.NDArray[np.int64],
    npt.NDArray[np.int64],
    npt.NDArray[np.float64],
    int,
    int,
]:
    """Second-order couplings between basis states differing in three atoms.

    With V the (basis x intermediate) two-body coupling matrix and W the same
    matrix divided by E1 - Em, the effective block is (W V^T + V W^T) / 2;
    only its entries between states that differ in exactly three atoms are
    kept.
    """
    unique_keys, columns = np.unique(keys, return_inverse=True)
    shape = (basis.dim, unique_keys.size)
    coupling = sp.csr_matrix((values, (rows, columns)), shape=shape)

    small = np.abs(gaps) < denominator_floor
    weighted_values = np.where(small, 0.0, values / np.where(small, 1.0, gaps))
    weighted = sp.csr_matrix((weighted_values, (rows, columns)), shape=shape)

    effective = 0.5 * (weighted @ coupling.conj().T + coupling @ weighted.conj().T)
    effective = effective.tocoo()
    differing = (basis.levels[effective.row] != basis.levels[effective.col]).sum(
        axis=1,
    )
    keep = differing == 3  # noqa: PLR2004
    return (
        effective.row[keep].astype(np.int64),
        effective.col[keep].astype(np.int64),
        np.asarray(effective.data[keep], dtype=np.float64),
        int(small.sum()),
        int((~keep).sum()),
    )


def assemble(  # noqa: PLR0913
    manifold: StarkManifold,
    dipoles: DipoleTable,
    geometry: AtomGeometry,
    basis: ProductBasis,
    *,
    three_body: bool = True,
    three_body_paths: str = "outside",
    denominator_floor: float = 2.0 * math.pi,
    drop_tol: float = 1e-12,
    logger: logging.Logger | None = None,
) -> SparseOperator:
    """Assemble the Hamiltonian; see assemble_with_report."""
    operator, _ = assemble_with_report(
        manifold,
        dipoles,
        geometry,
        basis,
        three_body=three_body,
        three_body_paths=three_body_paths,
        denominator_floor=denominator_floor,
        drop_tol=drop_tol,
        logger=logger,
    )
    return operator


@dataclass(frozen=True)
class SpectralBounds:
    """Interval [e_min, e_max] (rad/us) containing the whole spectrum."""

    e_min: float
    e_max: float

    @property
    def spectral_radius(self) -> float:
        return max(abs(self.e_min), abs(self.e_max))

    @property
    def center(self) -> float:
        return 0.5 * (self.e_max + self.e_min)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.e_max - self.e_min)

    def contains(self, energy: float) -> bool:
        return self.e_min <= energy <= self.e_max


def _power_iterate(
    apply: Callable[[npt.NDArray[np.complex128]], npt.NDArray[np.complex128]],
    start: npt.NDArray[np.complex128],
    max_iter: int,
    tol: float,
    *,
    rayleigh: bool,
) -> tuple[float, float]:
    """Power iteration returning the estimate and its residual norm.

    The estimate is the Rayleigh quotient or the norm ratio. The residual
    ||Av - theta v|| is zero for the norm ratio.
    """
    vector = start / np.linalg.norm(start)
    previous = math.nan
    for _ in range(max_iter):
        image = apply(vector)
        norm = float(np.linalg.norm(image))
        estimate = float(np.vdot(vector, image).real) if rayleigh else norm
        if norm == 0.0:
            return 0.0, 0.0
        if abs(estimate - previous) <= tol * max(abs(estimate), 1e-300):
            residual = image - estimate * vector if rayleigh else np.zeros(1)
            return estimate, float(np.linalg.norm(residual))
        previous = estimate
        vector = image / norm
    msg = f"Power iteration did not converge in {max_iter} iterations"
    raise SpectralBoundsError(msg)


def spectral_bounds(
    operator: SparseOperator,
    *,
    max_iter: int = 20_000,
    tol: float = 1e-10,
    seed: int = 0,
) -> SpectralBounds:
    """Bounds on the spectrum from power iteration.

    The norm ratio ||Hv|| / ||v|| first gives the spectral radius rho; power
    iteration on the positive semi-definite operators H + rho and rho - H then
    gives the top and bottom of the spectrum. Each end is widened by 1 % of
    the larger of the width and 2 rho, plus the residual of its iteration,
    since an early stop leaves the Rayleigh quotient inside the spectrum.

    Raises:
        SpectralBoundsError: If an iteration does not converge.

    """
    rng = np.random.default_rng(seed)
    start = rng.normal(size=operator.dim) + 1j * rng.normal(size=operator.dim)
    radius, _ = _power_iterate(operator.matvec, start, max_iter, tol, rayleigh=False)
    if radius == 0.0:
        return SpectralBounds(e_min=-1e-6, e_max=1e-6)

    # Both shifted operators must stay positive semi-definite.
    shift = (1.0 + BOUNDS_MARGIN) * radius
    top, top_residual = _power_iterate(
        lambda v: operator.matvec(v) + shift * v,
        start,
        max_iter,
        tol,
        rayleigh=True,
    )
    bottom, bottom_residual = _power_iterate(
        lambda v: shift * v - operator.matvec(v),
        start,
        max_iter,
        tol,
        rayleigh=True,
    )
    e_max, e_min = top - shift, shift - bottom
    margin = max(BOUNDS_MARGIN * max(e_max - e_min, 2.0 * radius), 1e-6)
    return SpectralBounds(
        e_min=e_min - margin - bottom_residual,
        e_max=e_max + margin + top_residual,
    )
