"""Exact-diagonalization reference for small instances."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt
import scipy.linalg
from basis import ClusterPopulations, ProductBasis
from stark_utils import InputError, NumericalFailureError, get_fallback_logger

if TYPE_CHECKING:
    import logging

    from sparse_operator import SparseOperator
    from typicality import EnergyShell

DEFAULT_MAX_DIM = 6000


class EmptyShellError(NumericalFailureError):
    """No eigenvalue lies inside the requested shell."""


@dataclass(frozen=True, eq=False)
class EigenDecomposition:
    """Ascending eigenvalues with eigenvectors as dense columns."""

    eigenvalues: npt.NDArray[np.float64] = field(repr=False)
    eigenvectors: npt.NDArray[np.complex128] = field(repr=False)

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.shape[0])

    def residual(self, operator: SparseOperator) -> float:
        """max_n ||H phi_n - E_n phi_n||."""
        image = operator.matrix @ self.eigenvectors
        return float(
            np.linalg.norm(image - self.eigenvectors * self.eigenvalues, axis=0).max(),
        )

    def orthonormality_error(self) -> float:
        """max |Phi^dagger Phi - 1|."""
        gram = self.eigenvectors.conj().T @ self.eigenvectors
        return float(np.abs(gram - np.eye(self.dim)).max())

    def shell_mask(self, shell: EnergyShell) -> npt.NDArray[np.bool_]:
        """Eigenstates with E_n in the closed interval of the shell."""
        return (self.eigenvalues >= shell.lower) & (self.eigenvalues <= shell.upper)

    def overlaps(self, psi: npt.NDArray[np.complex128]) -> npt.NDArray[np.complex128]:
        """Coefficients <phi_n|psi>."""
        if psi.shape != (self.dim,):
            msg = f"State has shape {psi.shape}, decomposition dimension {self.dim}"
            raise InputError(msg)
        return np.asarray(self.eigenvectors.conj().T @ psi)


def exact_diagonalize(
    operator: SparseOperator,
    max_dim: int = DEFAULT_MAX_DIM,
    logger: logging.Logger | None = None,
) -> EigenDecomposition:
    """Full dense Hermitian eigendecomposition.

    Raises:
        InputError: If the operator is larger than ``max_dim``.

    """
    logger = logger or get_fallback_logger()
    if operator.dim > max_dim:
        msg = f"Operator dimension {operator.dim} exceeds the oracle cap {max_dim}"
        raise InputError(msg)
    eigenvalues, eigenvectors = scipy.linalg.eigh(operator.to_dense())
    logger.info(
        "Diagonalized dim=%d: E in [%.6g, %.6g]",
        operator.dim,
        eigenvalues[0],
        eigenvalues[-1],
    )
    return EigenDecomposition(
        eigenvalues=np.asarray(eigenvalues, dtype=np.float64),
        eigenvectors=np.asarray(eigenvectors, dtype=np.complex128),
    )


def microcanonical_populations(
    eig: EigenDecomposition,
    shell: EnergyShell,
    basis: ProductBasis,
) -> ClusterPopulations:
    """Average cluster populations of every eigenstate in the shell.

    Raises:
        EmptyShellError: If the shell holds no eigenvalue.

    """
    if eig.dim != basis.dim:
        msg = f"Decomposition dimension {eig.dim} does not match basis {basis.dim}"
        raise InputError(msg)
    mask = eig.shell_mask(shell)
    count = int(mask.sum())
    if count == 0:
        msg = f"No eigenvalue in the shell [{shell.lower:.6g}, {shell.upper:.6g}]"
        raise EmptyShellError(msg)
    weights = np.abs(eig.eigenvectors[:, mask]) ** 2
    per_state = weights.T @ basis.cluster_fractions
    return ClusterPopulations.from_weights(
        per_state.mean(axis=0),
        basis.manifold.max_cluster,
    )


def microcanonical_average(
    eig: EigenDecomposition,
    cluster: int,
    shell: EnergyShell,
    basis: ProductBasis,
) -> float:
    """(1/N_S) sum over shell eigenstates of <phi_n|A_c|phi_n> for one cluster."""
    return microcanonical_populations(eig, shell, basis)[cluster]


def exact_evolve(
    eig: EigenDecomposition,
    psi0: npt.NDArray[np.complex128],
    t: float,
) -> npt.NDArray[np.complex128]:
    """sum_n exp(-i E_n t) <phi_n|psi0> |phi_n>."""
    coefficients = eig.overlaps(psi0) * np.exp(-1j * eig.eigenvalues * t)
    return np.asarray(eig.eigenvectors @ coefficients)


def exact_filter(
    eig: EigenDecomposition,
    psi: npt.NDArray[np.complex128],
    shell: EnergyShell,
) -> npt.NDArray[np.complex128]:
    """Normalized sum_n exp(-(E_n - e0)**2 / (4 delta_e**2)) c_n |phi_n>."""
    factors = np.exp(-((eig.eigenvalues - shell.e0) ** 2) * shell.filter_time)
    filtered = eig.eigenvectors @ (eig.overlaps(psi) * factors)
    norm = float(np.linalg.norm(filtered))
    if norm == 0:
        msg = "Exact filter removed the whole state"
        raise EmptyShellError(msg)
    return np.asarray(filtered / norm)


def fidelity(
    psi: npt.NDArray[np.complex128],
    phi: npt.NDArray[np.complex128],
) -> float:
    """|<psi|phi>|^2 / (<psi|psi> <phi|phi>)."""
    overlap = np.vdot(psi, phi)
    return float(
        abs(overlap) ** 2 / (np.vdot(psi, psi).real * np.vdot(phi, phi).real),
    )
