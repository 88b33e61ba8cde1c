from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Keep run artifacts of the tests out of the working tree
repo_root = Path(__file__).parent.parent
os.environ.setdefault("STARK_OUT_DIR", str(repo_root / "tests" / ".output"))

# Add the package bin and lib directories to the path
bin_dir = repo_root / "starkthermal" / "package" / "bin"
lib_dir = repo_root / "starkthermal" / "package" / "lib"
sys.path.insert(0, str(bin_dir))
sys.path.insert(0, str(lib_dir))

from basis import ProductBasis, enumerate_basis  # noqa: E402
from geometry import AtomGeometry, sample_positions  # noqa: E402
from hamiltonian import SpectralBounds, assemble, spectral_bounds  # noqa: E402
from manifold import (  # noqa: E402
    DipoleParams,
    DipoleTable,
    ManifoldParams,
    StarkManifold,
    build_dipole_table,
    build_manifold,
    mhz_to_rad_per_us,
)
from sparse_operator import SparseOperator  # noqa: E402

# A three-cluster, two-sublevel ladder with a narrow spacing keeps the
# spectral radius (and so the RK4 and filter step counts) small.
SMALL_MANIFOLD = ManifoldParams(
    cluster_spacing_mhz=100.0,
    anharmonicity_mhz=1.0,
    intra_offsets_mhz=(-5.0, 5.0),
    max_cluster=1,
    n_sublevels=2,
)
SMALL_DENSITY_CM3 = 1.0e10

SMALL_CONFIG = """
[run]
seed = 7
workers = 1

[logging]
loglevel = WARNING

[manifold]
cluster_spacing_mhz = 100.0
anharmonicity_mhz = 1.0
intra_offsets_mhz = -5.0, 5.0
max_cluster = 1
n_sublevels = 2

[geometry]
densities_cm3 = 3.0e9, 1.0e10
realizations = 2

[basis]
n_atoms = 3

[dynamics]
t_total_us = 0.04
sample_every = 20
eq_window_us = 0.01
eq_tol = 0.5

[typicality]
n_samples = 4
stop_stderr = 0
sweep_fractions = 0.4

[kpm]
n_moments = 64
n_vectors = 4
grid_size = 256

[expdata]
couplings = 0.1, 0.2, 0.1
scan_min_ghz = 0.0
scan_max_ghz = 10.0
n_bins = 2
"""


@pytest.fixture
def small_manifold() -> StarkManifold:
    return build_manifold(SMALL_MANIFOLD)


@pytest.fixture
def small_dipoles(small_manifold: StarkManifold) -> DipoleTable:
    return build_dipole_table(DipoleParams(), small_manifold, seed=3)


@pytest.fixture
def small_basis(small_manifold: StarkManifold) -> ProductBasis:
    return enumerate_basis(
        small_manifold,
        3,
        delta_cut=mhz_to_rad_per_us(SMALL_MANIFOLD.cluster_spacing_mhz),
    )


@pytest.fixture
def small_geometry() -> AtomGeometry:
    return sample_positions(3, SMALL_DENSITY_CM3, seed=11)


@pytest.fixture
def small_operator(
    small_manifold: StarkManifold,
    small_dipoles: DipoleTable,
    small_geometry: AtomGeometry,
    small_basis: ProductBasis,
) -> SparseOperator:
    return assemble(small_manifold, small_dipoles, small_geometry, small_basis)


@pytest.fixture
def small_bounds(small_operator: SparseOperator) -> SpectralBounds:
    return spectral_bounds(small_operator)


@pytest.fixture
def random_hermitian() -> SparseOperator:
    """A dense 40 x 40 real symmetric operator with spectrum of order 10."""
    rng = np.random.default_rng(5)
    dim = 40
    matrix = rng.normal(size=(dim, dim))
    matrix = (matrix + matrix.T) / np.sqrt(2 * dim)
    rows, cols = np.nonzero(np.ones((dim, dim), dtype=bool))
    return SparseOperator.from_triplets(rows, cols, 5.0 * matrix[rows, cols], dim)


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    path = tmp_path / "small.conf"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture
def small_config_text() -> str:
    return SMALL_CONFIG
