"""Fixed-step RK4 propagation of the Schroedinger equation and equilibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
import numpy.typing as npt
import pandas as pd
from basis import ClusterPopulations, ProductBasis, cluster_column, measure_populations
from hamiltonian import SpectralBounds, spectral_bounds
from stark_utils import (
    InputError,
    NumericalFailureError,
    get_fallback_logger,
    write_csv,
)

if TYPE_CHECKING:
    import logging
    from collections.abc import Callable
    from concurrent.futures import Executor
    from pathlib import Path

    from sparse_operator import SparseOperator

DT_POLICIES = ("spectral", "auto")

# Classic RK4 is stable on the imaginary axis up to |lambda dt| = 2 sqrt(2).
STABILITY_LIMIT = 2.8
DEFAULT_DT_FACTOR = 0.1
NORM_TOL = 1e-6


class NormDriftError(NumericalFailureError):
    """The state norm drifted beyond tolerance during propagation."""


def choose_dt(
    bounds: SpectralBounds,
    t_total: float,
    policy: str = "spectral",
    factor: float = DEFAULT_DT_FACTOR,
    norm_tol: float = NORM_TOL,
) -> float:
    """Pick the RK4 step for a propagation of length t_total.

    ``spectral`` returns factor / rho. ``auto`` also bounds the step so the
    predicted norm loss, t * rho * (rho dt)**5 / 72 for the fastest mode,
    stays at half of ``norm_tol``.

    Raises:
        InputError: On an unknown policy or non-positive factor.

    """
    if policy not in DT_POLICIES:
        msg = f"dt policy must be one of {DT_POLICIES}, got {policy!r}"
        raise InputError(msg)
    if not 0 < factor <= STABILITY_LIMIT:
        msg = f"dt factor must be in (0, {STABILITY_LIMIT}], got {factor}"
        raise InputError(msg)
    rho = bounds.spectral_radius
    dt = factor / rho
    if policy == "auto":
        x_max = (36.0 * norm_tol / max(t_total * rho, 1e-300)) ** 0.2
        dt = min(dt, x_max / rho)
    return dt


@dataclass(frozen=True, eq=False)
class PopulationTrace:
    """Cluster populations, norm drift and energy sampled along a propagation."""

    times: npt.NDArray[np.float64] = field(repr=False)
    populations: npt.NDArray[np.float64] = field(repr=False)
    norm_drift: npt.NDArray[np.float64] = field(repr=False)
    energies: npt.NDArray[np.float64] = field(repr=False)
    max_cluster: int

    @property
    def n_samples(self) -> int:
        return int(self.times.shape[0])

    @property
    def clusters(self) -> npt.NDArray[np.int64]:
        return np.arange(-self.max_cluster, self.max_cluster + 1)

    def at(self, sample: int) -> ClusterPopulations:
        return ClusterPopulations(
            values=self.populations[sample],
            max_cluster=self.max_cluster,
        )

    def population(self, cluster: int) -> npt.NDArray[np.float64]:
        """Time series of one cluster's population."""
        return self.populations[:, cluster + self.max_cluster]

    def resample(self, times: npt.NDArray[np.float64]) -> PopulationTrace:
        """Linearly interpolate every column onto new sample times.

        Raises:
            InputError: If a time lies outside the sampled interval.

        """
        times = np.asarray(times, dtype=np.float64)
        tol = 1e-9 * max(abs(float(self.times[-1])), 1.0)
        if times.min() < self.times[0] - tol or times.max() > self.times[-1] + tol:
            msg = (
                f"Resampling times {times.min():.6g}-{times.max():.6g} us exceed "
                f"the trace {self.times[0]:.6g}-{self.times[-1]:.6g} us"
            )
            raise InputError(msg)

        def interp(values: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
            return np.asarray(np.interp(times, self.times, values), dtype=np.float64)

        return PopulationTrace(
            times=times,
            populations=np.column_stack(
                [interp(column) for column in self.populations.T]
            ),
            norm_drift=interp(self.norm_drift),
            energies=interp(self.energies),
            max_cluster=self.max_cluster,
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t_us": self.times})
        for index, cluster in enumerate(self.clusters):
            frame[cluster_column(int(cluster))] = self.populations[:, index]
        frame["norm_drift"] = self.norm_drift
        frame["energy_rad_per_us"] = self.energies
        return frame

    def export_csv(self, path: Path, record: dict[str, Any] | None = None) -> None:
        """Write columns t_us, p_m6 ... p_p6, norm_drift, energy_rad_per_us."""
        write_csv(self.to_frame(), path, record)


@dataclass(frozen=True, eq=False)
class EvolutionResult:
    """Outcome of evolve: the sampled trace and the final state."""

    trace: PopulationTrace
    final_state: npt.NDArray[np.complex128] = field(repr=False)
    dt: float
    n_steps: int

    @property
    def final_norm_drift(self) -> float:
        return float(self.trace.norm_drift[-1])


def _rk4_step(
    apply: Callable[[npt.NDArray[np.complex128]], npt.NDArray[np.complex128]],
    psi: npt.NDArray[np.complex128],
    dt: float,
) -> npt.NDArray[np.complex128]:
    k1 = apply(psi)
    k2 = apply(psi + 0.5 * dt * k1)
    k3 = apply(psi + 0.5 * dt * k2)
    k4 = apply(psi + dt * k3)
    return psi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def evolve(  # noqa: PLR0913
    operator: SparseOperator,
    psi0: npt.NDArray[np.complex128],
    basis: ProductBasis | None,
    t_total: float,
    dt: float | None = None,
    sample_every: int = 100,
    *,
    bounds: SpectralBounds | None = None,
    norm_tol: float = NORM_TOL,
    reverse: bool = False,
    executor: Executor | None = None,
    logger: logging.Logger | None = None,
) -> EvolutionResult:
    """Propagate psi0 under dpsi/dt = -i H psi with classic fixed-step RK4.

    The interval is split into ceil(t_total / dt) equal steps so the last
    step lands exactly on t_total. The state is never renormalized; the norm
    drift is recorded at every sample and the run aborts once it exceeds
    ``norm_tol``. With ``reverse`` the state is propagated under -H, which
    undoes a forward propagation of the same length.

    Args:
        operator: The Hamiltonian.
        psi0: Initial state, normalized.
        basis: Basis used to measure cluster populations; None records only
            norm and energy.
        t_total: Propagation time (us).
        dt: Requested step (us); 0.1 / rho when omitted.
        sample_every: Steps between recorded samples. The initial and the
            final step are always recorded.
        bounds: Spectral bounds of H; computed when omitted.
        norm_tol: Maximum tolerated |1 - ||psi||^2|.
        reverse: Propagate under -H.
        executor: Optional pool for row-partitioned matvecs.
        logger: Logger for progress diagnostics.

    Returns:
        The sampled trace, the final state and the step actually used.

    Raises:
        InputError: On invalid arguments or a step above the stability bound.
        NormDriftError: If the norm drift exceeds ``norm_tol``.

    """
    logger = logger or get_fallback_logger()
    if not t_total > 0:
        msg = f"t_total must be positive, got {t_total}"
        raise InputError(msg)
    if sample_every < 1:
        msg = f"sample_every must be at least 1, got {sample_every}"
        raise InputError(msg)
    if psi0.shape != (operator.dim,):
        msg = f"State has shape {psi0.shape}, operator dimension {operator.dim}"
        raise InputError(msg)

    bounds = bounds or spectral_bounds(operator)
    rho = bounds.spectral_radius
    if dt is None:
        dt = DEFAULT_DT_FACTOR / rho
    if not dt > 0:
        msg = f"dt must be positive, got {dt}"
        raise InputError(msg)
    if dt > STABILITY_LIMIT / rho:
        msg = (
            f"dt = {dt:.4g} us exceeds the RK4 stability bound "
            f"{STABILITY_LIMIT}/rho = {STABILITY_LIMIT / rho:.4g} us"
        )
        raise InputError(msg)

    n_steps = max(1, math.ceil(t_total / dt - 1e-9))
    step = t_total / n_steps
    sign = 1.0 if reverse else -1.0

    def apply(vector: npt.NDArray[np.complex128]) -> npt.NDArray[np.complex128]:
        if executor is None:
            image = operator.matvec(vector)
        else:
            image = operator.matvec_partitioned(vector, executor)
        return sign * 1j * image

    max_cluster = basis.manifold.max_cluster if basis is not None else 0
    times: list[float] = []
    rows: list[npt.NDArray[np.float64]] = []
    drifts: list[float] = []
    energies: list[float] = []

    def record(n: int, psi: npt.NDArray[np.complex128]) -> float:
        norm_sq = float(np.vdot(psi, psi).real)
        drift = abs(1.0 - norm_sq)
        times.append(n * step)
        drifts.append(drift)
        energies.append(float(np.vdot(psi, operator.matvec(psi)).real) / norm_sq)
        if basis is not None:
            rows.append(measure_populations(basis, psi).values)
        else:
            rows.append(np.ones(1))
        return drift

    psi = np.asarray(psi0, dtype=np.complex128).copy()
    record(0, psi)
    logger.info(
        "Evolving dim=%d for %.4g us: %d RK4 steps of %.4g us (rho=%.4g)",
        operator.dim,
        t_total,
        n_steps,
        step,
        rho,
    )
    for n in range(1, n_steps + 1):
        psi = _rk4_step(apply, psi, step)
        if n % sample_every and n != n_steps:
            continue
        drift = record(n, psi)
        logger.debug("t=%.4g us norm drift %.3e", n * step, drift)
        if drift > norm_tol:
            suggested = (36.0 * norm_tol / (t_total * rho)) ** 0.2 / rho
            msg = (
                f"Norm drift {drift:.3e} exceeds {norm_tol:.1e} at t = "
                f"{n * step:.4g} us with dt = {step:.4g} us (rho dt = "
                f"{rho * step:.3g}); try dt <= {suggested:.4g} us"
            )
            raise NormDriftError(msg)

    trace = PopulationTrace(
        times=np.array(times),
        populations=np.vstack(rows),
        norm_drift=np.array(drifts),
        energies=np.array(energies),
        max_cluster=max_cluster,
    )
    return EvolutionResult(trace=trace, final_state=psi, dt=step, n_steps=n_steps)


@dataclass(frozen=True, eq=False)
class EquilibriumResult:
    """Outcome of detect_equilibrium.

    ``t_eq`` is None when the trace never settled; ``p_eq`` is always the
    average over the final window.
    """

    equilibrated: bool
    t_eq: float | None
    p_eq: ClusterPopulations
    window_means: npt.NDArray[np.float64] = field(repr=False)
    window_ends: npt.NDArray[np.float64] = field(repr=False)


def detect_equilibrium(
    trace: PopulationTrace,
    window: float,
    tol: float,
    logger: logging.Logger | None = None,
) -> EquilibriumResult:
    """Find when windowed cluster populations stop changing.

    The trace is cut into consecutive non-overlapping windows of length
    ``window``. The trace is equilibrated from window k on when, for every
    pair of consecutive windows from k to the end, no cluster's mean
    population changes by ``tol`` or more; t_eq is the end of window k.

    Raises:
        InputError: If the trace spans fewer than two windows or a window
            holds no samples.

    """
    logger = logger or get_fallback_logger()
    if not window > 0 or not tol > 0:
        msg = f"window and tol must be positive, got {window}, {tol}"
        raise InputError(msg)
    t0 = float(trace.times[0])
    span = float(trace.times[-1]) - t0
    n_windows = math.floor(span / window + 1e-9)
    if n_windows < 2:  # noqa: PLR2004
        msg = f"Trace of {span:.4g} us spans fewer than two {window:.4g} us windows"
        raise InputError(msg)

    index = np.floor((trace.times - t0) / window + 1e-9).astype(np.int64)
    index = np.minimum(index, n_windows - 1)
    means = np.empty((n_windows, trace.populations.shape[1]))
    for k in range(n_windows):
        members = index == k
        if not members.any():
            msg = f"Window {k} holds no samples; sample the trace more often"
            raise InputError(msg)
        means[k] = trace.populations[members].mean(axis=0)
    ends = t0 + window * np.arange(1, n_windows + 1)

    changes = np.abs(np.diff(means, axis=0)).max(axis=1)
    stable = changes < tol
    start: int | None = None
    for k in range(n_windows - 2, -1, -1):
        if not stable[k]:
            break
        start = k

    p_eq = ClusterPopulations.from_weights(means[-1], trace.max_cluster)
    if start is None:
        logger.warning(
            "Trace did not equilibrate: last window change %.3g >= tol %.3g",
            changes[-1],
            tol,
        )
        return EquilibriumResult(
            equilibrated=False,
            t_eq=None,
            p_eq=p_eq,
            window_means=means,
            window_ends=ends,
        )
    return EquilibriumResult(
        equilibrated=True,
        t_eq=float(ends[start]),
        p_eq=p_eq,
        window_means=means,
        window_ends=ends,
    )
