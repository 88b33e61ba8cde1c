"""Kernel polynomial estimate of the density of states and shell selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
import numpy.typing as npt
import pandas as pd
from hamiltonian import SpectralBounds, spectral_bounds
from scipy.fft import dct
from scipy.optimize import isotonic_regression
from stark_jobs import run_jobs
from stark_utils import (
    InputError,
    NumericalFailureError,
    get_fallback_logger,
    write_csv,
)
from typicality import EnergyShell

if TYPE_CHECKING:
    import logging
    from collections.abc import Sequence
    from pathlib import Path

    from sparse_operator import SparseOperator

# ||T_m(H~) r|| may exceed ||r|| only by roundoff when H~ is inside [-1, 1].
GROWTH_TOL = 1e-6
# Tolerated CDF decrease before an isotonic correction is reported.
CDF_NOISE = 1e-12


class KpmRescalingError(NumericalFailureError):
    """The rescaled operator left [-1, 1]; the spectral bounds are wrong."""


@dataclass(frozen=True, eq=False)
class ChebyshevMoments:
    """Stochastic Chebyshev moments of H~ = (H - b) / a."""

    moments: npt.NDArray[np.float64] = field(repr=False)
    per_vector: npt.NDArray[np.float64] = field(repr=False)
    a: float
    b: float

    @property
    def n_moments(self) -> int:
        return int(self.moments.shape[0])

    @property
    def n_vectors(self) -> int:
        return int(self.per_vector.shape[0])

    def variance(self) -> npt.NDArray[np.float64]:
        """Variance of the moment estimate (of the mean over vectors)."""
        if self.n_vectors < 2:  # noqa: PLR2004
            return np.zeros(self.n_moments)
        return np.asarray(
            self.per_vector.var(axis=0, ddof=1) / self.n_vectors,
            dtype=np.float64,
        )


def _vector_moments(
    operator: SparseOperator,
    r: npt.NDArray[np.complex128],
    n_moments: int,
    a: float,
    b: float,
) -> npt.NDArray[np.float64]:
    def rescaled(v: npt.NDArray[np.complex128]) -> npt.NDArray[np.complex128]:
        return (operator.matvec(v) - b * v) / a

    moments = np.empty(n_moments)
    moments[0] = float(np.vdot(r, r).real)
    if n_moments == 1:
        return moments
    previous, current = r, rescaled(r)
    moments[1] = float(np.vdot(r, current).real)
    limit = (1.0 + GROWTH_TOL) * math.sqrt(moments[0])
    for m in range(2, n_moments):
        previous, current = current, 2.0 * rescaled(current) - previous
        norm = float(np.linalg.norm(current))
        if norm > limit:
            msg = (
                f"Chebyshev recurrence grew to norm {norm:.4g} at moment {m}; "
                f"rescaling a={a:.6g}, b={b:.6g} does not cover the spectrum"
            )
            raise KpmRescalingError(msg)
        moments[m] = float(np.vdot(r, current).real)
    return moments


def chebyshev_moments(  # noqa: PLR0913
    operator: SparseOperator,
    n_moments: int,
    n_vectors: int,
    seed: int = 0,
    *,
    bounds: SpectralBounds | None = None,
    workers: int = 1,
    logger: logging.Logger | None = None,
) -> ChebyshevMoments:
    """Average <r|T_m(H~)|r> over random-phase unit vectors r.

    Every entry of r has modulus 1/sqrt(dim), so mu_0 = 1 and, for diagonal
    H, each vector reproduces the exact normalized trace.

    Raises:
        InputError: If n_moments < 1 or n_vectors < 1.
        KpmRescalingError: If the recurrence grows, i.e. the bounds are wrong.

    """
    logger = logger or get_fallback_logger()
    if n_moments < 1 or n_vectors < 1:
        msg = f"Need n_moments >= 1 and n_vectors >= 1, got {n_moments}, {n_vectors}"
        raise InputError(msg)
    bounds = bounds or spectral_bounds(operator)
    a, b = bounds.half_width, bounds.center
    dim = operator.dim

    def _one(k: int) -> npt.NDArray[np.float64]:
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        r = np.exp(2j * math.pi * rng.random(dim)) / math.sqrt(dim)
        return _vector_moments(operator, r, n_moments, a, b)

    outcomes = run_jobs(_one, list(range(n_vectors)), workers, logger)
    per_vector = np.vstack([o.result for o in outcomes if o.result is not None])
    logger.info(
        "KPM: %d moments from %d vectors (a=%.6g, b=%.6g)",
        n_moments,
        n_vectors,
        a,
        b,
    )
    return ChebyshevMoments(
        moments=per_vector.mean(axis=0),
        per_vector=per_vector,
        a=a,
        b=b,
    )


def jackson_kernel(n_moments: int) -> npt.NDArray[np.float64]:
    """Jackson damping factors g_m, m = 0..n_moments-1."""
    m = np.arange(n_moments)
    q = math.pi / (n_moments + 1)
    kernel = (n_moments - m + 1) * np.cos(q * m) + np.sin(q * m) / math.tan(q)
    return np.asarray(kernel / (n_moments + 1), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DosEstimate:
    """Density of states on Chebyshev nodes mapped to physical energies.

    ``weights`` are the Chebyshev-Gauss quadrature weights in energy, so
    ``sum(weights * density)`` equals mu_0.
    """

    a: float
    b: float
    damped_moments: npt.NDArray[np.float64] = field(repr=False)
    energies: npt.NDArray[np.float64] = field(repr=False)
    density: npt.NDArray[np.float64] = field(repr=False)
    weights: npt.NDArray[np.float64] = field(repr=False)

    def integrate(self) -> float:
        return float(np.sum(self.weights * self.density))

    @property
    def edge_energies(self) -> npt.NDArray[np.float64]:
        """Boundaries of the quadrature cells, one more than the nodes.

        Node k owns the arc between angles k pi / N and (k + 1) pi / N, so the
        cells tile [b - a, b + a] exactly.
        """
        n_nodes = self.density.size
        edges = -np.cos(np.arange(n_nodes + 1) * math.pi / n_nodes)
        return np.asarray(self.a * edges + self.b, dtype=np.float64)

    def cdf(self) -> npt.NDArray[np.float64]:
        """Integrated DOS at ``edge_energies``: 0 at the bottom, mu_0 at the top."""
        mass = self.weights * self.density
        return np.concatenate([[0.0], np.cumsum(mass)]).astype(np.float64)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"E_rad_per_us": self.energies, "density": self.density},
        )

    def export_csv(self, path: Path, record: dict[str, Any] | None = None) -> None:
        write_csv(self.to_frame(), path, record)


def dos_estimate(moments: ChebyshevMoments, grid_size: int) -> DosEstimate:
    """Jackson-damped Chebyshev series of the DOS, evaluated by a DCT.

    Raises:
        InputError: If grid_size is smaller than the number of moments.

    """
    n_moments = moments.n_moments
    if grid_size < n_moments:
        msg = f"grid_size {grid_size} must be at least the moment count {n_moments}"
        raise InputError(msg)
    damped = moments.moments * jackson_kernel(n_moments)
    padded = np.zeros(grid_size)
    padded[:n_moments] = damped
    # DCT-III gives mu_0 + 2 sum mu_m T_m(x_k) on descending nodes
    gammas = dct(padded, type=3)[::-1]
    phase = (np.arange(grid_size) + 0.5) * math.pi / grid_size
    nodes = np.cos(phase)[::-1]
    root = np.sqrt((1.0 - nodes) * (1.0 + nodes))
    density_x = gammas / (math.pi * root)
    return DosEstimate(
        a=moments.a,
        b=moments.b,
        damped_moments=damped,
        energies=moments.a * nodes + moments.b,
        density=density_x / moments.a,
        weights=moments.a * math.pi * root / grid_size,
    )


@dataclass(frozen=True)
class ShellSelection:
    """Shell chosen from the integrated DOS."""

    shell: EnergyShell
    e_lo: float
    e_hi: float
    lower_fraction: float
    upper_fraction: float
    corrected: bool

    def as_dict(self) -> dict[str, Any]:
        return {
            **self.shell.as_dict(),
            "cdf_e_lo_rad_per_us": self.e_lo,
            "cdf_e_hi_rad_per_us": self.e_hi,
            "lower_fraction": self.lower_fraction,
            "upper_fraction": self.upper_fraction,
            "isotonic_correction": self.corrected,
        }


def select_shell(
    dos: DosEstimate,
    lower: float = 1.0 / 3.0,
    upper: float = 2.0 / 3.0,
    center: float | None = None,
    logger: logging.Logger | None = None,
) -> ShellSelection:
    """Energy shell holding the eigenstates between two CDF fractions.

    E_lo and E_hi solve CDF(E) = lower and upper by interpolation of the
    integrated DOS. The half-width is (E_hi - E_lo) / 2; the center is their
    midpoint unless ``center`` (typically the initial-state energy) is given.
    A CDF that decreases anywhere is replaced by its isotonic fit.

    Raises:
        InputError: If the fractions are not 0 < lower < upper < 1.

    """
    logger = logger or get_fallback_logger()
    if not 0 < lower < upper < 1:
        msg = f"Shell fractions need 0 < lower < upper < 1, got {lower}, {upper}"
        raise InputError(msg)
    cdf = dos.cdf()
    corrected = bool(np.any(np.diff(cdf) < -CDF_NOISE))
    if corrected:
        cdf = np.asarray(isotonic_regression(cdf).x, dtype=np.float64)
        logger.warning("DOS CDF was not monotone; applied isotonic correction")
    cdf = np.maximum.accumulate(cdf)
    edges = dos.edge_energies
    e_lo = float(np.interp(lower, cdf, edges))
    e_hi = float(np.interp(upper, cdf, edges))
    e0 = 0.5 * (e_lo + e_hi) if center is None else center
    shell = EnergyShell(e0=e0, delta_e=0.5 * (e_hi - e_lo))
    logger.info(
        "Shell [%.3g, %.3g] of CDF: E_lo=%.6g E_hi=%.6g E0=%.6g",
        lower,
        upper,
        e_lo,
        e_hi,
        e0,
    )
    return ShellSelection(
        shell=shell,
        e_lo=e_lo,
        e_hi=e_hi,
        lower_fraction=lower,
        upper_fraction=upper,
        corrected=corrected,
    )


def shell_fraction_sweep(
    dos: DosEstimate,
    fractions: Sequence[float],
    center: float | None = None,
    logger: logging.Logger | None = None,
) -> list[ShellSelection]:
    """Shells holding the middle ``f`` of the eigenstates for each fraction f."""
    selections = []
    for fraction in fractions:
        if not 0 < fraction < 1:
            msg = f"Shell fraction must be in (0, 1), got {fraction}"
            raise InputError(msg)
        selections.append(
            select_shell(
                dos,
                lower=0.5 - 0.5 * fraction,
                upper=0.5 + 0.5 * fraction,
                center=center,
                logger=logger,
            ),
        )
    return selections
