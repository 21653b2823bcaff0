#!/usr/bin/env python3
"""Exponential-of-GRF diffusivity datasets and their binary file format.

Exponent fields r are sampled from a truncated Karhunen-Loeve expansion of
the covariance exp(-|x_p - x_q| / l) over the grid nodes; D = exp(r) and u is
the finite-volume solution for D.

Random numbers come from numpy's PCG64 generator. A dataset seed feeds a
numpy SeedSequence, which spawns one child stream per record in record order,
so record k depends only on (seed, k) and records can be produced in any
order or in parallel.

PCGPDS1 layout (little-endian):

    magic      8 bytes  b"PCGPDS1\\0"
    nx, ny     u32, u32
    count      u32
    spacing    f64
    length     f64      KL correlation length (NaN for imported data)
    modes      u32      KL truncation (0 for imported data)
    seed       u64
    records    count * (nx*ny f64 D, row-major, then nx*ny f64 u)
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pcgp import common as rc
from pcgp import gp_core, physics
from pcgp.binio import ByteReader, f64_bytes
from pcgp.physics import ScalarField

MAGIC = b"PCGPDS1\x00"
HEADER_FIELDS = "IIIddIQ"
HEADER = struct.Struct("<8s" + HEADER_FIELDS)


@dataclass(frozen=True, eq=False)
class KLBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    kept: int
    nx: int
    ny: int
    h: float
    trace: float


@dataclass(frozen=True, eq=False)
class SampleRecord:
    D: ScalarField
    u: ScalarField

    def __post_init__(self):
        if self.D.shape != self.u.shape:
            raise rc.InputError(f"record shapes differ: D {self.D.shape}, u {self.u.shape}")
        if not np.all(self.D.values > 0):
            raise rc.InputError("record diffusivity must be strictly positive")


@dataclass(frozen=True, eq=False)
class Dataset:
    records: tuple[SampleRecord, ...]
    nx: int
    ny: int
    h: float
    length: float = math.nan
    modes: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.records:
            raise rc.InputError("dataset is empty")
        for index, record in enumerate(self.records):
            if record.D.shape != (self.ny, self.nx):
                raise rc.InputError(f"record {index} has shape {record.D.shape}, expected {(self.ny, self.nx)}")

    def __len__(self) -> int:
        return len(self.records)

    def diffusivities(self) -> np.ndarray:
        """(count, nx*ny) matrix of flattened D fields."""
        return np.stack([r.D.flat() for r in self.records])

    def solutions(self) -> np.ndarray:
        return np.stack([r.u.flat() for r in self.records])

    def subset(self, indices) -> "Dataset":
        return Dataset(
            tuple(self.records[i] for i in indices),
            self.nx, self.ny, self.h, self.length, self.modes, self.seed,
        )


def grid_points(nx: int, ny: int, h: float) -> np.ndarray:
    """Node coordinates (x, y) in row-major order."""
    xs, ys = np.meshgrid(np.arange(nx) * h, np.arange(ny) * h)
    return np.column_stack([xs.ravel(), ys.ravel()])


def build_kl_basis(nx: int, ny: int, l: float, M: int) -> KLBasis:
    size = nx * ny
    if not 1 <= M <= size:
        raise rc.InputError(f"KL truncation {M} must lie in [1, {size}]")
    h = 1.0 / (nx - 1)
    points = grid_points(nx, ny, h)
    C = gp_core.cross_kernel(points, points, l)
    try:
        values, vectors = np.linalg.eigh(C)
    except np.linalg.LinAlgError as exc:
        raise rc.NumericalError(f"KL eigendecomposition failed: {exc}") from None
    order = np.argsort(values)[::-1]
    values = np.clip(values[order], 0.0, None)
    vectors = vectors[:, order]
    return KLBasis(
        eigenvalues=values[:M],
        eigenvectors=vectors[:, :M],
        kept=M,
        nx=nx,
        ny=ny,
        h=h,
        trace=float(np.trace(C)),
    )


def retained_mass(basis: KLBasis) -> float:
    return float(np.sum(basis.eigenvalues) / basis.trace)


def _generator(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_grf(basis: KLBasis, seed=None, xi=None) -> ScalarField:
    """One exponent field r = sum sqrt(lambda_m) xi_m phi_m.

    ``seed`` may be an int or a SeedSequence; ``xi`` overrides the draw.
    """
    if xi is None:
        xi = _generator(seed).standard_normal(basis.kept)
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (basis.kept,):
        raise rc.InputError(f"expected {basis.kept} KL coefficients, got {xi.shape}")
    r = basis.eigenvectors @ (np.sqrt(basis.eigenvalues) * xi)
    return ScalarField(basis.nx, basis.ny, basis.h, r.reshape(basis.ny, basis.nx))


def sample_grf_batch(basis: KLBasis, rng: np.random.Generator, count: int) -> np.ndarray:
    """(count, nx*ny) exponent fields drawn from one generator."""
    xi = rng.standard_normal((count, basis.kept))
    return (xi * np.sqrt(basis.eigenvalues)) @ basis.eigenvectors.T


def generate_dataset(nx: int, ny: int, l: float, M: int, count: int, seed: int) -> Dataset:
    if count < 1:
        raise rc.InputError(f"record count must be at least 1, got {count}")
    if seed < 0:
        raise rc.InputError(f"seed must be non-negative, got {seed}")
    basis = build_kl_basis(nx, ny, l, M)
    records = []
    for index, stream in enumerate(np.random.SeedSequence(seed).spawn(count)):
        r = sample_grf(basis, seed=stream)
        D = ScalarField(nx, ny, basis.h, np.exp(r.values))
        records.append(SampleRecord(D, physics.solve_diffusion(D)))
        if (index + 1) % 100 == 0:
            rc.debug(f"generated {index + 1}/{count} records")
    return Dataset(tuple(records), nx, ny, basis.h, float(l), int(M), int(seed))


def dataset_from_arrays(D, u, h: float | None = None, length: float = math.nan, modes: int = 0, seed: int = 0) -> Dataset:
    """Wrap (count, ny, nx) arrays of externally produced fields."""
    D = np.asarray(D, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if D.ndim != 3 or D.shape != u.shape:
        raise rc.InputError(f"expected matching (count, ny, nx) arrays, got {D.shape} and {u.shape}")
    _, ny, nx = D.shape
    h = h if h is not None else 1.0 / (nx - 1)
    records = tuple(
        SampleRecord(ScalarField(nx, ny, h, d.copy()), ScalarField(nx, ny, h, s.copy()))
        for d, s in zip(D, u)
    )
    return Dataset(records, nx, ny, h, length, modes, seed)


def split_dataset(ds: Dataset, counts: list[int]) -> list[Dataset]:
    """Consecutive slices of the requested sizes."""
    if sum(counts) > len(ds):
        raise rc.InputError(f"dataset holds {len(ds)} records, {sum(counts)} requested")
    parts, start = [], 0
    for count in counts:
        parts.append(ds.subset(range(start, start + count)))
        start += count
    return parts


def save_dataset(ds: Dataset, path: str | Path) -> None:
    chunks = [HEADER.pack(MAGIC, ds.nx, ds.ny, len(ds), ds.h, ds.length, ds.modes, ds.seed)]
    for record in ds.records:
        chunks.append(f64_bytes(record.D.values))
        chunks.append(f64_bytes(record.u.values))
    Path(path).write_bytes(b"".join(chunks))


def load_dataset(path: str | Path) -> Dataset:
    reader = ByteReader(Path(path).read_bytes(), str(path))
    reader.expect_magic(MAGIC)
    nx, ny, count, h, length, modes, seed = reader.unpack(HEADER_FIELDS, "header")
    if nx < 3 or ny < 3 or count < 1:
        raise rc.FormatError(f"invalid header: {nx}x{ny} grid, {count} records", 8, str(path))
    size = nx * ny
    records = []
    for index in range(count):
        at = reader.offset
        D = reader.floats(size, f"record {index} diffusivity").reshape(ny, nx)
        u = reader.floats(size, f"record {index} solution").reshape(ny, nx)
        try:
            records.append(SampleRecord(ScalarField(nx, ny, h, D), ScalarField(nx, ny, h, u)))
        except rc.InputError as exc:
            raise rc.FormatError(f"record {index}: {exc}", at, str(path)) from None
    reader.expect_end()
    return Dataset(tuple(records), nx, ny, h, length, modes, seed)
