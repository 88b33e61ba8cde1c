"""Hermitian row-compressed sparse operator shared by all solvers."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Any

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp
from stark_utils import InputError, NumericalFailureError, provenance_header

if TYPE_CHECKING:
    from concurrent.futures import Executor
    from pathlib import Path

# Relative tolerance of the structural Hermiticity check.
HERMITIAN_RTOL = 1e-12


class HamiltonianAssemblyError(NumericalFailureError):
    """Assembly produced an operator that is not Hermitian."""


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """A Hermitian operator in CSR form with no explicit zeros or duplicates."""

    matrix: sp.csr_matrix = field(repr=False)

    @classmethod
    def from_triplets(
        cls,
        rows: npt.NDArray[np.int64],
        cols: npt.NDArray[np.int64],
        values: npt.NDArray[np.float64] | npt.NDArray[np.complex128],
        dim: int,
        drop_tol: float = 1e-12,
    ) -> SparseOperator:
        """Assemble from (row, col, value) triplets.

        Coincident triplets are summed, entries with magnitude below
        ``drop_tol`` are dropped, and the result is checked for Hermiticity.

        Raises:
            HamiltonianAssemblyError: If the summed operator is not Hermitian.

        """
        matrix = sp.coo_matrix((values, (rows, cols)), shape=(dim, dim)).tocsr()
        matrix.sum_duplicates()
        matrix.data[np.abs(matrix.data) < drop_tol] = 0
        matrix.eliminate_zeros()
        operator = cls(matrix=matrix)
        operator.check_hermitian()
        return operator

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.matrix.data)

    def check_hermitian(self) -> None:
        """Verify value(i, j) == conj(value(j, i)) for every stored entry."""
        difference = self.matrix - self.matrix.conj().T
        scale = float(np.abs(self.matrix.data).max(initial=0.0))
        worst = float(np.abs(difference.data).max(initial=0.0))
        if worst > HERMITIAN_RTOL * max(scale, 1.0):
            msg = (
                f"Operator is not Hermitian: max |H - H^dagger| = {worst:.3e} "
                f"(scale {scale:.3e})"
            )
            raise HamiltonianAssemblyError(msg)

    def matvec(
        self,
        vector: npt.NDArray[np.complex128],
    ) -> npt.NDArray[np.complex128]:
        return np.asarray(self.matrix @ vector)

    @cached_property
    def row_blocks(self) -> list[tuple[int, int, sp.csr_matrix]]:
        """Row slices for partitioned matvec, about equal in stored entries."""
        n_blocks = 8
        targets = np.linspace(0, self.nnz, n_blocks + 1)
        bounds = np.unique(np.searchsorted(self.matrix.indptr, targets))
        bounds = np.clip(bounds, 0, self.dim)
        bounds[0], bounds[-1] = 0, self.dim
        bounds = np.unique(bounds)
        return [
            (int(start), int(stop), self.matrix[start:stop])
            for start, stop in zip(bounds[:-1], bounds[1:], strict=True)
        ]

    def matvec_partitioned(
        self,
        vector: npt.NDArray[np.complex128],
        executor: Executor,
    ) -> npt.NDArray[np.complex128]:
        """Matvec with rows split across an executor; blocks write disjoint rows."""
        out = np.empty(self.dim, dtype=np.result_type(self.matrix.dtype, vector))

        def _block(block: tuple[int, int, sp.csr_matrix]) -> None:
            start, stop, rows = block
            out[start:stop] = rows @ vector

        list(executor.map(_block, self.row_blocks))
        return out

    def expectation(self, psi: npt.NDArray[np.complex128]) -> float:
        """<psi|H|psi> / <psi|psi>."""
        return float(np.vdot(psi, self.matvec(psi)).real / np.vdot(psi, psi).real)

    def diagonal(self) -> npt.NDArray[np.float64]:
        return np.asarray(self.matrix.diagonal().real, dtype=np.float64)

    def scaled(self, factor: float) -> SparseOperator:
        return SparseOperator(matrix=(self.matrix * factor).tocsr())

    def to_dense(self) -> npt.NDArray[np.complex128]:
        return np.asarray(self.matrix.toarray())

    def export_text(self, path: Path, record: dict[str, Any] | None = None) -> None:
        """Write 'dim nnz' followed by one 'row col re im' line per entry.

        A provenance record, when given, precedes the data as '#' lines.
        """
        coo = self.matrix.tocoo()
        table = np.column_stack(
            [coo.row, coo.col, np.real(coo.data), np.imag(coo.data)],
        )
        with path.open("w") as handle:
            if record is not None:
                handle.writelines(f"{line}\n" for line in provenance_header(record))
            handle.write(f"{self.dim} {self.nnz}\n")
            np.savetxt(handle, table, fmt=["%d", "%d", "%.17g", "%.17g"])

    @classmethod
    def load_text(cls, path: Path) -> SparseOperator:
        """Read an operator written by export_text."""
        with path.open() as handle:
            line = handle.readline()
            while line.startswith("#"):
                line = handle.readline()
            header = line.split()
            if len(header) != 2:  # noqa: PLR2004
                msg = f"Malformed operator header in {path}: {header}"
                raise InputError(msg)
            dim, nnz = int(header[0]), int(header[1])
            table = np.loadtxt(handle, ndmin=2)
        if table.shape[0] != nnz:
            msg = f"{path} declares {nnz} entries but holds {table.shape[0]}"
            raise InputError(msg)
        values = table[:, 2] + 1j * table[:, 3]
        if not np.any(table[:, 3]):
            values = table[:, 2]
        return cls.from_triplets(
            table[:, 0].astype(np.int64),
            table[:, 1].astype(np.int64),
            values,
            dim,
            drop_tol=0.0,
        )
