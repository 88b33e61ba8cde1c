"""Thermal cluster populations from dynamical typicality.

Random states are pushed through a Gaussian energy filter in imaginary time;
the filtered states behave like the microcanonical ensemble of the shell, so
averaging their cluster populations over a few dozen samples predicts the
thermal state without diagonalizing H.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
import numpy.typing as npt
import pandas as pd
from basis import ClusterPopulations, ProductBasis, cluster_column, measure_populations
from hamiltonian import SpectralBounds, spectral_bounds
from stark_jobs import run_jobs
from stark_utils import (
    InputError,
    NumericalFailureError,
    get_fallback_logger,
    write_csv,
)

if TYPE_CHECKING:
    import logging
    from pathlib import Path

    from sparse_operator import SparseOperator

DEFAULT_DS_FACTOR = 0.05
MAX_DS_FACTOR = 0.1
# The stderr stop rule is only consulted once this many samples are in.
MIN_STOP_SAMPLES = 8
_MAX_DRAW_ATTEMPTS = 16
# log of the smallest normal double
_LOG_TINY = math.log(np.finfo(np.float64).tiny)


class FilterUnderflowError(NumericalFailureError):
    """The filtered state lost all weight; the shell is too narrow."""


class TypicalityError(NumericalFailureError):
    """Too many typicality samples failed."""


@dataclass(frozen=True)
class EnergyShell:
    """Shell [e0 - delta_e, e0 + delta_e] (rad/us)."""

    e0: float
    delta_e: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.e0):
            msg = f"Shell center must be finite, got {self.e0}"
            raise InputError(msg)
        if not self.delta_e > 0:
            msg = f"Shell half-width must be positive, got {self.delta_e}"
            raise InputError(msg)

    @property
    def lower(self) -> float:
        return self.e0 - self.delta_e

    @property
    def upper(self) -> float:
        return self.e0 + self.delta_e

    @property
    def filter_time(self) -> float:
        """Imaginary time 1 / (4 delta_e**2) that realizes the filter."""
        return 1.0 / (4.0 * self.delta_e**2)

    def as_dict(self) -> dict[str, float]:
        return {
            "e0_rad_per_us": self.e0,
            "delta_e_rad_per_us": self.delta_e,
            "e_lo_rad_per_us": self.lower,
            "e_hi_rad_per_us": self.upper,
        }


def random_state(
    dim: int,
    seed: int,
    stream: int = 0,
) -> npt.NDArray[np.complex128]:
    """Random normalized state with moduli in [0, 1) and uniform phases.

    ``stream`` selects an independent substream of ``seed``; an all-zero
    draw is redrawn from the next substream.

    Raises:
        InputError: If dim < 1.

    """
    if dim < 1:
        msg = f"dim must be at least 1, got {dim}"
        raise InputError(msg)
    for attempt in range(_MAX_DRAW_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, stream, attempt]))
        moduli = rng.random(dim)
        phases = rng.random(dim) * (2.0 * math.pi)
        psi = moduli * np.exp(1j * phases)
        norm = float(np.linalg.norm(psi))
        if norm > 0:
            return psi / norm
    msg = f"Random state draws were all zero for seed {seed}"
    raise NumericalFailureError(msg)


def _filter_with_log_norm(
    operator: SparseOperator,
    psi: npt.NDArray[np.complex128],
    shell: EnergyShell,
    ds: float | None,
    bounds: SpectralBounds,
) -> tuple[npt.NDArray[np.complex128], float]:
    lam = max(abs(bounds.e_min - shell.e0), abs(bounds.e_max - shell.e0))
    ds_max = MAX_DS_FACTOR / lam**2
    if ds is None:
        ds = DEFAULT_DS_FACTOR / lam**2
    if not 0 < ds <= ds_max:
        msg = f"Filter step ds = {ds:.4g} must be in (0, {ds_max:.4g}] (0.1/lambda^2)"
        raise InputError(msg)

    state = np.asarray(psi, dtype=np.complex128) / np.linalg.norm(psi)
    s_final = shell.filter_time
    if s_final == 0:
        return state, 0.0
    n_steps = max(1, math.ceil(s_final / ds - 1e-9))
    step = s_final / n_steps

    def rhs(vector: npt.NDArray[np.complex128]) -> npt.NDArray[np.complex128]:
        shifted = operator.matvec(vector) - shell.e0 * vector
        return -(operator.matvec(shifted) - shell.e0 * shifted)

    log_norm = 0.0
    for _ in range(n_steps):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * step * k1)
        k3 = rhs(state + 0.5 * step * k2)
        k4 = rhs(state + step * k3)
        state = state + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        norm = float(np.linalg.norm(state))
        if not (math.isfinite(norm) and norm > 0):
            msg = "Filtered state vanished during imaginary-time integration"
            raise FilterUnderflowError(msg)
        log_norm += math.log(norm)
        if log_norm < _LOG_TINY:
            msg = (
                f"Filtered norm underflowed (log norm {log_norm:.1f}); the shell "
                f"half-width {shell.delta_e:.4g} is too narrow for double precision"
            )
            raise FilterUnderflowError(msg)
        state /= norm
    return state, log_norm


def apply_energy_filter(
    operator: SparseOperator,
    psi: npt.NDArray[np.complex128],
    shell: EnergyShell,
    ds: float | None = None,
    bounds: SpectralBounds | None = None,
) -> npt.NDArray[np.complex128]:
    """Apply exp(-(H - e0)**2 / (4 delta_e**2)) to psi and normalize.

    Integrates dpsi/ds = -(H - e0)**2 psi from 0 to 1/(4 delta_e**2) with
    RK4, each right-hand side costing two matvecs; the state is renormalized
    after every step while the log-norm is accumulated.

    Args:
        operator: The Hamiltonian.
        psi: Input state.
        shell: The energy shell.
        ds: Imaginary-time step; 0.05 / lambda**2 when omitted, where lambda
            is the largest distance from e0 to a spectral bound.
        bounds: Spectral bounds of H; computed when omitted.

    Raises:
        InputError: If ds exceeds 0.1 / lambda**2 or e0 lies outside the bounds.
        FilterUnderflowError: If the filtered weight underflows.

    """
    bounds = bounds or spectral_bounds(operator)
    if not bounds.contains(shell.e0):
        msg = (
            f"Shell center {shell.e0:.6g} outside spectral bounds "
            f"[{bounds.e_min:.6g}, {bounds.e_max:.6g}]"
        )
        raise InputError(msg)
    state, _ = _filter_with_log_norm(operator, psi, shell, ds, bounds)
    return state


@dataclass(frozen=True, eq=False)
class ThermalEstimate:
    """Sample mean and standard error of the filtered-state populations."""

    mean: ClusterPopulations
    stderr: npt.NDArray[np.float64] = field(repr=False)
    n_samples: int
    sample_energies: npt.NDArray[np.float64] = field(repr=False)
    failures: int
    shell: EnergyShell

    def as_dict(self) -> dict[str, Any]:
        return {
            "populations": self.mean.as_dict(),
            "stderr": {
                cluster_column(int(c)): float(e)
                for c, e in zip(self.mean.clusters, self.stderr, strict=True)
            },
            "n_samples": self.n_samples,
            "failures": self.failures,
            "shell": self.shell.as_dict(),
            "sample_energies_rad_per_us": [float(e) for e in self.sample_energies],
        }

    def to_frame(self) -> pd.DataFrame:
        """Mean and stderr rows using the trace's population columns."""
        columns = [cluster_column(int(c)) for c in self.mean.clusters]
        frame = pd.DataFrame([self.mean.values, self.stderr], columns=columns)
        frame.insert(0, "statistic", ["mean", "stderr"])
        return frame

    def export_csv(self, path: Path, record: dict[str, Any] | None = None) -> None:
        write_csv(self.to_frame(), path, record)


@dataclass(frozen=True)
class _Sample:
    populations: npt.NDArray[np.float64]
    energy: float


def thermal_populations(  # noqa: PLR0913
    operator: SparseOperator,
    basis: ProductBasis,
    shell: EnergyShell,
    n_samples: int = 48,
    seed: int = 0,
    *,
    workers: int = 1,
    stop_stderr: float | None = None,
    ds: float | None = None,
    bounds: SpectralBounds | None = None,
    logger: logging.Logger | None = None,
) -> ThermalEstimate:
    """Average the cluster populations of filtered random states.

    Sample k starts from ``random_state(dim, seed, stream=k)``. With
    ``stop_stderr`` the run stops at the first sample count (at least
    MIN_STOP_SAMPLES, scanned in sample order) whose largest per-cluster
    standard error falls below it, so the result does not depend on
    ``workers``.

    Raises:
        InputError: If n_samples < 2.
        TypicalityError: If more than half of the samples failed.

    """
    logger = logger or get_fallback_logger()
    if n_samples < 2:  # noqa: PLR2004
        msg = f"n_samples must be at least 2, got {n_samples}"
        raise InputError(msg)
    bounds = bounds or spectral_bounds(operator)
    if not bounds.contains(shell.e0):
        msg = (
            f"Shell center {shell.e0:.6g} outside spectral bounds "
            f"[{bounds.e_min:.6g}, {bounds.e_max:.6g}]"
        )
        raise InputError(msg)

    def _one(k: int) -> _Sample:
        psi = random_state(basis.dim, seed, stream=k)
        state, _ = _filter_with_log_norm(operator, psi, shell, ds, bounds)
        return _Sample(
            populations=measure_populations(basis, state).values,
            energy=operator.expectation(state),
        )

    batch = max(workers, 1) * 2
    samples: list[_Sample] = []
    failures = 0
    considered = 0
    stopped = False
    for start in range(0, n_samples, batch):
        indices = list(range(start, min(start + batch, n_samples)))
        outcomes = run_jobs(_one, indices, workers, logger, raise_on_error=False)
        for outcome in outcomes:
            considered += 1
            if outcome.error is not None:
                if not isinstance(outcome.error, NumericalFailureError):
                    raise outcome.error
                failures += 1
                continue
            if outcome.result is None:
                continue
            samples.append(outcome.result)
            if (
                stop_stderr is not None
                and len(samples) >= MIN_STOP_SAMPLES
                and _stderr(samples).max() < stop_stderr
            ):
                stopped = True
                break
        if stopped:
            break

    if failures * 2 > considered or len(samples) < 2:  # noqa: PLR2004
        msg = f"{failures} of {considered} typicality samples failed"
        raise TypicalityError(msg)

    values = np.vstack([s.populations for s in samples])
    mean = ClusterPopulations.from_weights(
        values.mean(axis=0),
        basis.manifold.max_cluster,
    )
    estimate = ThermalEstimate(
        mean=mean,
        stderr=_stderr(samples),
        n_samples=len(samples),
        sample_energies=np.array([s.energy for s in samples]),
        failures=failures,
        shell=shell,
    )
    logger.info(
        "Typicality: %d samples (%d failed), max stderr %.3g",
        estimate.n_samples,
        failures,
        float(estimate.stderr.max()),
    )
    return estimate


def _stderr(samples: list[_Sample]) -> npt.NDArray[np.float64]:
    values = np.vstack([s.populations for s in samples])
    return np.asarray(
        values.std(axis=0, ddof=1) / math.sqrt(len(samples)),
        dtype=np.float64,
    )
