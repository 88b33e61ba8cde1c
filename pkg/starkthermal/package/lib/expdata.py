"""Reduction of measured microwave spectra to cluster populations.

Shots are binned by total signal (a density proxy), each spectrum is
integrated over one frequency region per cluster, the integrals are divided
by the cluster-to-d-state coupling strengths and normalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import numpy.typing as npt
import pandas as pd
from basis import ClusterPopulations, cluster_column
from scipy.integrate import trapezoid
from stark_utils import InputError, get_fallback_logger, read_csv

if TYPE_CHECKING:
    import logging
    from collections.abc import Sequence

NORMALIZE_ORDERS = ("shot", "bin")


def _cluster_labels(n_regions: int) -> npt.NDArray[np.int64]:
    if n_regions < 1 or n_regions % 2 == 0:
        msg = f"Need an odd number of clusters, got {n_regions}"
        raise InputError(msg)
    half = n_regions // 2
    return np.arange(-half, half + 1)


@dataclass(frozen=True, eq=False)
class SpectrumShot:
    """One measured spectrum: signal against microwave frequency (GHz)."""

    frequencies_ghz: npt.NDArray[np.float64] = field(repr=False)
    signal: npt.NDArray[np.float64] = field(repr=False)
    total_signal: float
    shot_id: str = ""

    def __post_init__(self) -> None:
        if self.frequencies_ghz.shape != self.signal.shape or self.signal.ndim != 1:
            msg = f"Shot {self.shot_id!r}: frequency and signal lengths differ"
            raise InputError(msg)
        if self.signal.size < 2:  # noqa: PLR2004
            msg = f"Shot {self.shot_id!r} needs at least two samples"
            raise InputError(msg)
        if not (
            np.all(np.isfinite(self.frequencies_ghz))
            and np.all(np.isfinite(self.signal))
        ):
            msg = f"Shot {self.shot_id!r} holds non-finite samples"
            raise InputError(msg)
        if np.any(np.diff(self.frequencies_ghz) <= 0):
            msg = f"Shot {self.shot_id!r}: frequencies must be strictly increasing"
            raise InputError(msg)

    def check_scan_range(self, scan_min_ghz: float, scan_max_ghz: float) -> None:
        """Raise InputError if any sample lies outside the scan range."""
        if (
            self.frequencies_ghz[0] < scan_min_ghz
            or self.frequencies_ghz[-1] > scan_max_ghz
        ):
            msg = (
                f"Shot {self.shot_id!r} spans {self.frequencies_ghz[0]:.6g}-"
                f"{self.frequencies_ghz[-1]:.6g} GHz, outside the scan range "
                f"{scan_min_ghz:.6g}-{scan_max_ghz:.6g} GHz"
            )
            raise InputError(msg)

    @classmethod
    def from_samples(
        cls,
        frequencies_ghz: npt.ArrayLike,
        signal: npt.ArrayLike,
        total_signal: float | None = None,
        shot_id: str = "",
    ) -> SpectrumShot:
        """Build a shot; the total signal defaults to the integrated spectrum."""
        frequencies = np.asarray(frequencies_ghz, dtype=np.float64)
        values = np.asarray(signal, dtype=np.float64)
        if total_signal is None or not math.isfinite(total_signal):
            total_signal = float(trapezoid(values, frequencies))
        return cls(
            frequencies_ghz=frequencies,
            signal=values,
            total_signal=float(total_signal),
            shot_id=shot_id,
        )


@dataclass(frozen=True, eq=False)
class RegionBoundaries:
    """Contiguous frequency regions, one per cluster, in ascending frequency.

    Region k spans edges[k]..edges[k+1] and is labeled with cluster
    k - n_regions // 2, so the 14 default edges give labels -6..6.
    """

    edges_ghz: npt.NDArray[np.float64] = field(repr=False)

    def __post_init__(self) -> None:
        if self.edges_ghz.ndim != 1 or self.edges_ghz.size < 2:  # noqa: PLR2004
            msg = "Region boundaries need at least two edges"
            raise InputError(msg)
        if not np.all(np.isfinite(self.edges_ghz)) or np.any(
            np.diff(self.edges_ghz) <= 0,
        ):
            msg = f"Region edges must be finite and increasing: {self.edges_ghz}"
            raise InputError(msg)
        _cluster_labels(self.n_regions)

    @property
    def n_regions(self) -> int:
        return int(self.edges_ghz.size - 1)

    @property
    def clusters(self) -> npt.NDArray[np.int64]:
        return _cluster_labels(self.n_regions)

    @classmethod
    def from_edges(cls, edges_ghz: Sequence[float]) -> RegionBoundaries:
        return cls(edges_ghz=np.asarray(edges_ghz, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class CouplingTable:
    """Positive coupling strength of every cluster to the probed d states."""

    values: npt.NDArray[np.float64] = field(repr=False)

    def __post_init__(self) -> None:
        _cluster_labels(self.values.size)
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            msg = f"Couplings must be finite and positive: {self.values}"
            raise InputError(msg)

    @classmethod
    def from_values(cls, values: Sequence[float]) -> CouplingTable:
        return cls(values=np.asarray(values, dtype=np.float64))


def bin_by_total_signal(
    shots: Sequence[SpectrumShot],
    n_bins: int,
) -> list[list[SpectrumShot]]:
    """Split shots into n_bins equal-count groups of ascending total signal.

    Ties keep shot order; when the count does not divide evenly the first
    bins hold one extra shot.

    Raises:
        InputError: If n_bins < 1 or there are fewer shots than bins.

    """
    if n_bins < 1:
        msg = f"n_bins must be at least 1, got {n_bins}"
        raise InputError(msg)
    if len(shots) < n_bins:
        msg = f"{len(shots)} shots cannot fill {n_bins} bins"
        raise InputError(msg)
    totals = np.array([shot.total_signal for shot in shots])
    order = np.argsort(totals, kind="stable")
    return [[shots[int(i)] for i in part] for part in np.array_split(order, n_bins)]


@dataclass(frozen=True, eq=False)
class RegionIntegrals:
    """Integrated signal per region and the regions that held no sample."""

    values: npt.NDArray[np.float64] = field(repr=False)
    empty_regions: tuple[int, ...]


def integrate_regions(
    shot: SpectrumShot,
    boundaries: RegionBoundaries,
    logger: logging.Logger | None = None,
) -> RegionIntegrals:
    """Trapezoidal integral of the signal over each region.

    The signal is linearly interpolated at the region edges, so adjacent
    regions share their edge values and the integrals add up to the integral
    over the covered range. Negative signal is kept.

    Raises:
        InputError: If the regions reach outside the measured frequencies.

    """
    logger = logger or get_fallback_logger()
    freq, signal = shot.frequencies_ghz, shot.signal
    edges = boundaries.edges_ghz
    if edges[0] < freq[0] or edges[-1] > freq[-1]:
        msg = (
            f"Regions {edges[0]:.6g}-{edges[-1]:.6g} GHz exceed the data range "
            f"{freq[0]:.6g}-{freq[-1]:.6g} GHz of shot {shot.shot_id!r}"
        )
        raise InputError(msg)
    edge_signal = np.interp(edges, freq, signal)
    values = np.empty(boundaries.n_regions)
    empty: list[int] = []
    for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:], strict=True)):
        inside = (freq > lo) & (freq < hi)
        if not np.any((freq >= lo) & (freq <= hi)):
            empty.append(int(boundaries.clusters[k]))
        x = np.concatenate([[lo], freq[inside], [hi]])
        y = np.concatenate([[edge_signal[k]], signal[inside], [edge_signal[k + 1]]])
        values[k] = trapezoid(y, x)
    if empty:
        logger.warning("Shot %r: regions %s hold no samples", shot.shot_id, empty)
    return RegionIntegrals(values=values, empty_regions=tuple(empty))


@dataclass(frozen=True, eq=False)
class ScaledPopulations:
    """Populations recovered from integrals and how many were clamped at 0."""

    populations: ClusterPopulations
    clamped: int


def scale_and_normalize(
    integrals: npt.NDArray[np.float64],
    couplings: CouplingTable,
    logger: logging.Logger | None = None,
) -> ScaledPopulations:
    """p[c] = (I_c / g_c) / sum_c' (I_c' / g_c').

    Negative scaled values are clamped to zero before normalizing; the number
    of clamped clusters is reported.

    Raises:
        InputError: On a length mismatch or when nothing positive remains.

    """
    logger = logger or get_fallback_logger()
    if integrals.shape != couplings.values.shape:
        msg = (
            f"{integrals.size} integrals do not match {couplings.values.size} "
            "couplings"
        )
        raise InputError(msg)
    scaled = integrals / couplings.values
    negative = scaled < 0
    clamped = int(negative.sum())
    scaled = np.where(negative, 0.0, scaled)
    if not np.any(scaled > 0):
        msg = "All region integrals are zero or negative"
        raise InputError(msg)
    if clamped:
        logger.warning("Clamped %d negative cluster populations to zero", clamped)
    return ScaledPopulations(
        populations=ClusterPopulations.from_weights(scaled, scaled.size // 2),
        clamped=clamped,
    )


def stderr_per_cluster(
    populations: npt.NDArray[np.float64],
    logger: logging.Logger | None = None,
) -> npt.NDArray[np.float64]:
    """Standard error of the mean per cluster over shots (rows).

    A single shot has no defined error; NaN is returned and flagged.
    """
    logger = logger or get_fallback_logger()
    if populations.ndim != 2 or populations.shape[0] == 0:  # noqa: PLR2004
        msg = f"Expected a non-empty (shots, clusters) array, got {populations.shape}"
        raise InputError(msg)
    n_shots = populations.shape[0]
    if n_shots == 1:
        logger.warning("Single-shot bin: standard error undefined")
        return np.full(populations.shape[1], np.nan)
    return np.asarray(
        populations.std(axis=0, ddof=1) / math.sqrt(n_shots),
        dtype=np.float64,
    )


@dataclass(frozen=True, eq=False)
class BinReduction:
    """Reduced populations of one density bin."""

    bin_index: int
    n_shots: int
    populations: ClusterPopulations
    stderr: npt.NDArray[np.float64] = field(repr=False)
    clamped: int
    mean_total_signal: float
    empty_regions: tuple[int, ...]

    def as_dict(self) -> dict[str, Any]:
        return {
            "bin_index": self.bin_index,
            "n_shots": self.n_shots,
            "populations": [float(p) for p in self.populations.values],
            "stderr": [None if math.isnan(e) else float(e) for e in self.stderr],
            "clamped": self.clamped,
            "mean_total_signal": self.mean_total_signal,
            "empty_regions": list(self.empty_regions),
        }


def _average_spectrum(shots: Sequence[SpectrumShot]) -> SpectrumShot:
    grid = shots[0].frequencies_ghz
    stacked = np.vstack(
        [np.interp(grid, s.frequencies_ghz, s.signal) for s in shots],
    )
    return SpectrumShot(
        frequencies_ghz=grid,
        signal=stacked.mean(axis=0),
        total_signal=float(np.mean([s.total_signal for s in shots])),
        shot_id="average",
    )


def reduce_bin(  # noqa: PLR0913
    shots: Sequence[SpectrumShot],
    boundaries: RegionBoundaries,
    couplings: CouplingTable,
    bin_index: int = 0,
    normalize_order: str = "shot",
    logger: logging.Logger | None = None,
) -> BinReduction:
    """Populations and error bars of one bin of shots.

    ``shot`` normalizes every shot and averages the populations; ``bin``
    averages the spectra first and normalizes once. Error bars always come
    from the per-shot populations.

    Raises:
        InputError: On an empty bin, an unknown order or mismatched tables.

    """
    logger = logger or get_fallback_logger()
    if not shots:
        msg = f"Bin {bin_index} holds no shots"
        raise InputError(msg)
    if normalize_order not in NORMALIZE_ORDERS:
        msg = f"normalize_order must be one of {NORMALIZE_ORDERS}"
        raise InputError(msg)
    if boundaries.n_regions != couplings.values.size:
        msg = (
            f"{boundaries.n_regions} regions do not match "
            f"{couplings.values.size} couplings"
        )
        raise InputError(msg)

    per_shot: list[npt.NDArray[np.float64]] = []
    clamped = 0
    empty: set[int] = set()
    for shot in shots:
        integrals = integrate_regions(shot, boundaries, logger)
        empty.update(integrals.empty_regions)
        scaled = scale_and_normalize(integrals.values, couplings, logger)
        per_shot.append(scaled.populations.values)
        clamped += scaled.clamped
    per_shot_array = np.vstack(per_shot)

    if normalize_order == "shot":
        populations = ClusterPopulations.from_weights(
            per_shot_array.mean(axis=0),
            boundaries.n_regions // 2,
        )
    else:
        averaged = _average_spectrum(shots)
        integrals = integrate_regions(averaged, boundaries, logger)
        scaled = scale_and_normalize(integrals.values, couplings, logger)
        populations = scaled.populations
        clamped = scaled.clamped

    return BinReduction(
        bin_index=bin_index,
        n_shots=len(shots),
        populations=populations,
        stderr=stderr_per_cluster(per_shot_array, logger),
        clamped=clamped,
        mean_total_signal=float(np.mean([s.total_signal for s in shots])),
        empty_regions=tuple(sorted(empty)),
    )


@dataclass(frozen=True, eq=False)
class ComparisonReport:
    """Distance between measured and predicted cluster populations."""

    total_variation: float
    residuals: npt.NDArray[np.float64] = field(repr=False)
    z_scores: npt.NDArray[np.float64] = field(repr=False)
    initial_excess: float
    table: pd.DataFrame = field(repr=False)

    def as_dict(self) -> dict[str, Any]:
        return {
            "total_variation": self.total_variation,
            "initial_excess": self.initial_excess,
            "residuals": [float(r) for r in self.residuals],
            "z_scores": [float(z) for z in self.z_scores],
        }

    def render(self) -> str:
        """Human-readable comparison table."""
        return (
            self.table.to_string(index=False, float_format=lambda v: f"{v:.4f}")
            + f"\n\ntotal variation distance: {self.total_variation:.6f}"
            + f"\ninitial-cluster excess:   {self.initial_excess:+.6f}\n"
        )


def compare(
    experimental: ClusterPopulations,
    predicted: ClusterPopulations,
    errors: npt.NDArray[np.float64] | None = None,
    initial_cluster: int = 0,
) -> ComparisonReport:
    """Total variation distance, residuals in error bars and initial excess.

    Clusters without a usable error bar get a z-score of 0 when the residual
    is 0 and of +/- inf otherwise.

    Raises:
        InputError: If the distributions cover different clusters.

    """
    if experimental.max_cluster != predicted.max_cluster:
        msg = (
            f"Experimental populations cover +/-{experimental.max_cluster}, "
            f"predicted +/-{predicted.max_cluster}"
        )
        raise InputError(msg)
    residuals = experimental.values - predicted.values
    if errors is None:
        errors = np.full(residuals.shape, np.nan)
    usable = np.isfinite(errors) & (errors > 0)
    z_scores = np.where(
        usable,
        residuals / np.where(usable, errors, 1.0),
        np.where(residuals == 0, 0.0, np.copysign(np.inf, residuals)),
    )
    table = pd.DataFrame(
        {
            "cluster": experimental.clusters,
            "experimental": experimental.values,
            "predicted": predicted.values,
            "stderr": errors,
            "residual": residuals,
            "z": z_scores,
        },
    )
    return ComparisonReport(
        total_variation=float(0.5 * np.abs(residuals).sum()),
        residuals=residuals,
        z_scores=z_scores,
        initial_excess=experimental[initial_cluster] - predicted[initial_cluster],
        table=table,
    )


def _read_shot_csv(path: Path, shot_id: str, total: float | None) -> SpectrumShot:
    frame = read_csv(path)
    missing = {"freq_ghz", "signal"} - set(frame.columns)
    if missing:
        msg = f"{path} lacks columns {sorted(missing)}"
        raise InputError(msg)
    return SpectrumShot.from_samples(
        frame["freq_ghz"].to_numpy(dtype=np.float64),
        frame["signal"].to_numpy(dtype=np.float64),
        total,
        shot_id,
    )


def load_shots_manifest(path: Path) -> list[SpectrumShot]:
    """Load shots listed in a manifest CSV.

    The manifest has columns ``shot_id`` and ``path`` (relative to the
    manifest) and optionally ``total_signal``; each shot file has columns
    ``freq_ghz`` and ``signal``.

    Raises:
        InputError: On missing columns or malformed shots.
        FileNotFoundError: If a listed shot file does not exist.

    """
    manifest = read_csv(path)
    missing = {"shot_id", "path"} - set(manifest.columns)
    if missing:
        msg = f"Manifest {path} lacks columns {sorted(missing)}"
        raise InputError(msg)
    has_total = "total_signal" in manifest.columns
    shots = []
    for row in manifest.itertuples(index=False):
        total = float(row.total_signal) if has_total else None
        shot_path = Path(str(row.path))
        if not shot_path.is_absolute():
            shot_path = path.parent / shot_path
        shots.append(_read_shot_csv(shot_path, str(row.shot_id), total))
    return shots


def load_long_format(path: Path) -> list[SpectrumShot]:
    """Load shots from one CSV with columns shot_id, freq_ghz, signal.

    An optional ``total_signal`` column is read from each shot's first row.
    Shots keep the order of their first appearance.
    """
    frame = read_csv(path)
    missing = {"shot_id", "freq_ghz", "signal"} - set(frame.columns)
    if missing:
        msg = f"{path} lacks columns {sorted(missing)}"
        raise InputError(msg)
    has_total = "total_signal" in frame.columns
    shots = []
    for shot_id, group in frame.groupby("shot_id", sort=False):
        total = float(group["total_signal"].iloc[0]) if has_total else None
        shots.append(
            SpectrumShot.from_samples(
                group["freq_ghz"].to_numpy(dtype=np.float64),
                group["signal"].to_numpy(dtype=np.float64),
                total,
                str(shot_id),
            ),
        )
    return shots


def load_shots(path: Path) -> list[SpectrumShot]:
    """Load a manifest or a long-format CSV, chosen by its columns."""
    columns = set(read_csv(path, nrows=0).columns)
    if "path" in columns:
        return load_shots_manifest(path)
    return load_long_format(path)


def suggest_region_boundaries(
    shot: SpectrumShot,
    n_regions: int,
    period_ghz: float,
    center_ghz: float | None = None,
    logger: logging.Logger | None = None,
) -> npt.NDArray[np.float64]:
    """Suggest region edges from the periodicity of the cluster pattern.

    The spectrum is folded modulo ``period_ghz``; edges are placed at the
    folded phase of lowest mean signal, one period apart, with the regions
    centered on ``center_ghz`` (the positive-signal centroid by default).
    The result is only a suggestion to review; it is never applied.
    """
    logger = logger or get_fallback_logger()
    _cluster_labels(n_regions)
    if not period_ghz > 0:
        msg = f"period_ghz must be positive, got {period_ghz}"
        raise InputError(msg)
    freq, signal = shot.frequencies_ghz, shot.signal
    n_phase_bins = 64
    phase_bin = np.minimum(
        ((freq % period_ghz) / period_ghz * n_phase_bins).astype(np.int64),
        n_phase_bins - 1,
    )
    counts = np.bincount(phase_bin, minlength=n_phase_bins)
    sums = np.bincount(phase_bin, weights=signal, minlength=n_phase_bins)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), np.inf)
    gap = (int(np.argmin(means)) + 0.5) / n_phase_bins * period_ghz

    if center_ghz is None:
        weights = np.clip(signal, 0.0, None)
        if weights.sum() <= 0:
            msg = "Cannot locate the spectrum center: no positive signal"
            raise InputError(msg)
        center_ghz = float(np.average(freq, weights=weights))
    start = center_ghz - 0.5 * n_regions * period_ghz
    first = gap + period_ghz * round((start - gap) / period_ghz)
    edges = first + period_ghz * np.arange(n_regions + 1)
    logger.info(
        "Suggested %d regions from %.6g to %.6g GHz (period %.4g GHz)",
        n_regions,
        edges[0],
        edges[-1],
        period_ghz,
    )
    return np.asarray(edges, dtype=np.float64)


def populations_frame(reductions: Sequence[BinReduction]) -> pd.DataFrame:
    """One row per bin: bin_index, n_shots, p_* columns, stderr_* columns."""
    rows = []
    for reduction in reductions:
        row: dict[str, Any] = {
            "bin_index": reduction.bin_index,
            "n_shots": reduction.n_shots,
            "mean_total_signal": reduction.mean_total_signal,
        }
        for cluster, value, error in zip(
            reduction.populations.clusters,
            reduction.populations.values,
            reduction.stderr,
            strict=True,
        ):
            name = cluster_column(int(cluster))
            row[name] = value
            row[f"stderr_{name.removeprefix('p_')}"] = error
        rows.append(row)
    return pd.DataFrame(rows)
